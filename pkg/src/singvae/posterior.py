"""Posterior encoder q(z|y), latent slicing, the waveform generator and the
multi-period / multi-scale discriminators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .errors import ValidationError
from .layers import WaveNet

LRELU_SLOPE = 0.1


@dataclass
class LatentSequence:
    """Posterior sample ``z = mu + exp(log_sigma) * noise``; tensors are (B, T, D)."""

    z: torch.Tensor
    mu: torch.Tensor
    log_sigma: torch.Tensor
    noise: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)


class PosteriorEncoder(nn.Module):
    def __init__(self, n_freqs: int, cfg: ModelConfig):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        self.pre = nn.Conv1d(n_freqs, cfg.posterior_hidden, 1)
        self.wn = WaveNet(cfg.posterior_hidden, cfg.posterior_kernel, cfg.posterior_layers)
        self.proj = nn.Conv1d(cfg.posterior_hidden, 2 * cfg.latent_dim, 1)

    def forward(self, spec: torch.Tensor, mask: torch.Tensor | None = None,
                noise: torch.Tensor | None = None, generator: torch.Generator | None = None) -> LatentSequence:
        """Encode a linear spectrogram ``(B, T, F)``.

        ``noise`` (B, T, D) replaces the standard-normal draw when given;
        zero noise yields ``z == mu``.
        """
        if spec.shape[1] == 0:
            raise ValidationError("empty spectrogram")
        if mask is None:
            mask = torch.ones(spec.shape[:2], dtype=torch.bool, device=spec.device)
        m = mask.unsqueeze(1).to(spec.dtype)
        h = self.pre(spec.transpose(1, 2)) * m
        stats = (self.proj(self.wn(h, m)) * m).transpose(1, 2)
        mu, log_sigma = stats.split(self.latent_dim, dim=-1)
        if noise is None:
            noise = torch.randn(mu.shape, dtype=mu.dtype, device=mu.device, generator=generator)
        noise = noise * mask.unsqueeze(-1).to(mu.dtype)
        z = mu + torch.exp(log_sigma) * noise
        return LatentSequence(z=z, mu=mu, log_sigma=log_sigma, noise=noise)


@dataclass(frozen=True)
class SliceWindow:
    start_frame: int
    length_frames: int


def slice_latent(z: torch.Tensor, window: SliceWindow, hop_size: int):
    """Cut ``length_frames`` frames of ``z`` (T, D) and return the matching
    audio sample range ``(start, stop)``."""
    start, length = window.start_frame, window.length_frames
    if start < 0 or length < 1 or start + length > z.shape[0]:
        raise ValidationError(f"window [{start}, {start + length}) outside {z.shape[0]} frames")
    return z[start:start + length], (start * hop_size, (start + length) * hop_size)


def random_slices(z: torch.Tensor, lengths: torch.Tensor, segment: int,
                  generator: torch.Generator | None = None):
    """One random ``segment``-frame window per batch item; returns (slices, starts)."""
    max_start = (lengths - segment).clamp_min(0)
    u = torch.rand(len(z), generator=generator, dtype=torch.float64)
    starts = (u * (max_start + 1).to(torch.float64)).long().clamp_max(max_start)
    idx = starts[:, None] + torch.arange(segment)[None, :]
    return torch.gather(z, 1, idx.unsqueeze(-1).expand(-1, -1, z.shape[-1])), starts


class ResBlock(nn.Module):
    """HiFiGAN residual block (type 1): dilated conv pairs with skip adds."""

    def __init__(self, channels: int, kernel_size: int, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=d * (kernel_size - 1) // 2)
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, padding=(kernel_size - 1) // 2) for _ in dilations
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            y = c2(F.leaky_relu(c1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + y
        return x


class HarmonicSource(nn.Module):
    """Sine excitation at a frame-level F0, merged into one channel.

    Harmonics ``1..H`` of ``exp(lf0)`` are rendered with a running phase,
    silenced on unvoiced frames and above Nyquist, then mixed by a learned
    linear layer.
    """

    def __init__(self, hop: int, sample_rate: int, harmonics: int):
        super().__init__()
        self.hop = hop
        self.sample_rate = sample_rate
        self.merge = nn.Linear(harmonics, 1)
        self.register_buffer("orders", torch.arange(1, harmonics + 1, dtype=torch.float64), persistent=False)

    def forward(self, lf0: torch.Tensor, voiced: torch.Tensor) -> torch.Tensor:
        """Map ``lf0``/``voiced`` (B, T) frames to an excitation (B, 1, T * hop)."""
        f0 = torch.exp(lf0.detach().to(torch.float64)) * voiced.to(torch.float64)
        f0 = f0.repeat_interleave(self.hop, dim=1)
        # float64 phase accumulation; wrapping keeps sin() accurate on long clips
        phase = torch.remainder(2 * torch.pi * torch.cumsum(f0 / self.sample_rate, dim=1), 2 * torch.pi)
        harm = f0.unsqueeze(-1) * self.orders
        keep = (f0.unsqueeze(-1) > 0) & (harm < self.sample_rate / 2)
        sines = torch.sin(phase.unsqueeze(-1) * self.orders) * keep
        dtype = self.merge.weight.dtype
        return torch.tanh(self.merge(sines.to(dtype))).transpose(1, 2)


class Generator(nn.Module):
    """Transposed-conv upsampler mapping latent frames (B, T, D) to samples (B, T * hop).

    With ``cfg.harmonic_source`` a :class:`HarmonicSource` excitation, driven by
    frame LF0 and voicing, is strided down and added after every upsampling stage.
    """

    def __init__(self, cfg: ModelConfig, sample_rate: int | None = None):
        super().__init__()
        self.hop = cfg.hop
        ch = cfg.upsample_initial_channels
        self.conv_pre = nn.Conv1d(cfg.latent_dim, ch, 7, padding=3)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.n_kernels = len(cfg.resblock_kernels)
        self.source = None
        if cfg.uses_harmonic_source:
            if sample_rate is None:
                raise ValidationError("the harmonic source needs the sample rate")
            self.source = HarmonicSource(cfg.hop, sample_rate, cfg.source_harmonics)
            self.source_convs = nn.ModuleList()
        for i, (rate, k) in enumerate(zip(cfg.upsample_rates, cfg.upsample_kernels)):
            c_in, c_out = ch // 2 ** i, ch // 2 ** (i + 1)
            self.ups.append(nn.ConvTranspose1d(c_in, c_out, k, rate, padding=(k - rate) // 2))
            for rk, rd in zip(cfg.resblock_kernels, cfg.resblock_dilations):
                self.blocks.append(ResBlock(c_out, rk, rd))
            if self.source is not None:
                # stride from the sample rate down to this stage's rate; rates are even
                stride = math.prod(cfg.upsample_rates[i + 1:])
                if stride > 1:
                    self.source_convs.append(nn.Conv1d(1, c_out, 2 * stride, stride, padding=stride // 2))
                else:
                    self.source_convs.append(nn.Conv1d(1, c_out, 1))
        self.conv_post = nn.Conv1d(c_out, 1, 7, padding=3, bias=False)

    def forward(self, z: torch.Tensor, lf0: torch.Tensor | None = None,
                voiced: torch.Tensor | None = None) -> torch.Tensor:
        """Render ``z`` (B, T, D); ``lf0`` and ``voiced`` (B, T) drive the source when present."""
        if z.shape[1] == 0:
            raise ValidationError("empty latent slice")
        excitation = None
        if self.source is not None:
            if lf0 is None or voiced is None:
                raise ValidationError("this generator needs frame lf0 and voicing")
            if lf0.shape != z.shape[:2] or voiced.shape != z.shape[:2]:
                raise ValidationError(f"lf0/voicing shape {tuple(lf0.shape)} does not match {tuple(z.shape[:2])}")
            excitation = self.source(lf0, voiced)
        x = self.conv_pre(z.transpose(1, 2))
        for i, up in enumerate(self.ups):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            if excitation is not None:
                x = x + self.source_convs[i](excitation)
            blocks = self.blocks[i * self.n_kernels:(i + 1) * self.n_kernels]
            x = sum(b(x) for b in blocks) / self.n_kernels
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x).squeeze(1)


@dataclass
class DiscriminatorOutput:
    """Score maps and intermediate feature maps, one entry per sub-discriminator."""

    scores: list[torch.Tensor]
    features: list[list[torch.Tensor]]

    def structure(self):
        return [len(f) for f in self.features]


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, channels):
        super().__init__()
        self.period = period
        chans = [1, *channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], (5, 1), (3, 1), padding=(2, 0)) for i in range(len(channels))
        )
        self.convs.append(nn.Conv2d(chans[-1], chans[-1], (5, 1), 1, padding=(2, 0)))
        self.post = nn.Conv2d(chans[-1], 1, (3, 1), 1, padding=(1, 0))

    def forward(self, y: torch.Tensor):
        b, t = y.shape
        if t % self.period:
            pad = self.period - t % self.period
            y = F.pad(y.unsqueeze(1), (0, pad), "reflect").squeeze(1)
            t += pad
        x = y.view(b, 1, t // self.period, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.flatten(1), feats


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels):
        super().__init__()
        c = list(channels)
        layers = [nn.Conv1d(1, c[0], 15, 1, padding=7)]
        for i in range(1, len(c)):
            groups = max(1, min(c[i - 1], c[i]) // 4)
            layers.append(nn.Conv1d(c[i - 1], c[i], 41, 4, groups=groups, padding=20))
        layers.append(nn.Conv1d(c[-1], c[-1], 5, 1, padding=2))
        self.convs = nn.ModuleList(layers)
        self.post = nn.Conv1d(c[-1], 1, 3, 1, padding=1)

    def forward(self, y: torch.Tensor):
        x = y.unsqueeze(1)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.flatten(1), feats


class Discriminator(nn.Module):
    """Multi-period (2-D, reshape-by-period) plus multi-scale (1-D, pooled) critics."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.periods = nn.ModuleList(PeriodDiscriminator(p, cfg.mpd_channels) for p in cfg.mpd_periods)
        self.scales = nn.ModuleList(ScaleDiscriminator(cfg.msd_channels) for _ in range(cfg.msd_scales))
        self.pool = nn.AvgPool1d(4, 2, padding=2)
        self.min_samples = 4 * max(max(cfg.mpd_periods, default=1), 2 ** cfg.msd_scales)

    def forward(self, y: torch.Tensor) -> DiscriminatorOutput:
        if y.shape[-1] < self.min_samples:
            raise ValidationError(f"segment of {y.shape[-1]} samples is shorter than {self.min_samples}")
        scores, features = [], []
        for d in self.periods:
            s, f = d(y)
            scores.append(s)
            features.append(f)
        x = y
        for i, d in enumerate(self.scales):
            if i:
                x = self.pool(x.unsqueeze(1)).squeeze(1)
            s, f = d(x)
            scores.append(s)
            features.append(f)
        return DiscriminatorOutput(scores, features)
