"""Score-conditioned prior: text encoder, note-normalised durations, length
regulation, F0 prediction, the frame prior network, the affine-coupling flow
and the CTC phoneme predictor.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .errors import ValidationError
from .layers import ConvStack, FFTStack, WaveNet, sequence_mask


def duration_bucket(note_dur: torch.Tensor, buckets: int, max_frames: int) -> torch.Tensor:
    """Log-spaced bucket index of a note duration in frames."""
    scaled = torch.log(note_dur.clamp(1, max_frames).to(torch.float64)) / math.log(max_frames)
    return torch.clamp((scaled * (buckets - 1)).round().long(), 0, buckets - 1)


class TextEncoder(nn.Module):
    """Phoneme, pitch and note-duration embeddings through a stack of FFT blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.inventory_size = cfg.inventory_size
        self.dur_buckets = cfg.dur_buckets
        self.max_note_frames = cfg.max_note_frames
        self.phoneme_emb = nn.Embedding(cfg.inventory_size, cfg.phoneme_emb)
        self.pitch_emb = nn.Embedding(128, cfg.pitch_emb)
        self.dur_emb = nn.Embedding(cfg.dur_buckets, cfg.dur_emb)
        self.proj = nn.Linear(cfg.phoneme_emb + cfg.pitch_emb + cfg.dur_emb, cfg.hidden)
        self.encoder = FFTStack(cfg.text_encoder_blocks, cfg.hidden, cfg.heads, cfg.ffn_filter,
                                cfg.ffn_kernel, cfg.dropout)

    def embed(self, phonemes, note_pitch, note_dur) -> torch.Tensor:
        if phonemes.numel() and (phonemes.min() < 0 or phonemes.max() >= self.inventory_size):
            raise ValidationError(f"phoneme ID outside inventory of size {self.inventory_size}")
        bucket = duration_bucket(note_dur, self.dur_buckets, self.max_note_frames)
        emb = torch.cat([self.phoneme_emb(phonemes), self.pitch_emb(note_pitch), self.dur_emb(bucket)], dim=-1)
        return self.proj(emb)

    def forward(self, phonemes, note_pitch, note_dur, mask) -> torch.Tensor:
        return self.encoder(self.embed(phonemes, note_pitch, note_dur), mask)


class DurationPredictor(nn.Module):
    """Three 1-D conv layers and a linear head giving one value per phoneme.

    With note normalisation the value is the ratio of phoneme to note
    duration; without it, the raw duration in frames. ``offset`` is a
    data-derived constant added to the head (0 on a fresh module).
    """

    def __init__(self, hidden: int, filter_size: int, kernel_size: int, n_layers: int = 3,
                 dropout: float = 0.0):
        super().__init__()
        chans = [hidden] + [filter_size] * n_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(chans[i], chans[i + 1], kernel_size, padding=kernel_size // 2) for i in range(n_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(filter_size) for _ in range(n_layers))
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(filter_size, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("offset", torch.zeros(()))

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.unsqueeze(-1).to(h.dtype)
        x = h * m
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x.transpose(1, 2)).transpose(1, 2)
            x = self.dropout(norm(F.relu(x))) * m
        return (self.head(x).squeeze(-1) + self.offset) * mask.to(h.dtype)


def predicted_duration(r: torch.Tensor, note_dur: torch.Tensor) -> torch.Tensor:
    """Integer frames for the length regulator: max(1, round-half-up(r x note_dur))."""
    frames = torch.floor(r.clamp_min(0).to(torch.float64) * note_dur.to(torch.float64) + 0.5)
    return frames.long().clamp_min(1)


def duration_loss(r: torch.Tensor, note_dur: torch.Tensor, gt_dur: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of the per-sequence L2 norm of ``r * note_dur - gt_dur``."""
    if r.shape != note_dur.shape or r.shape != gt_dur.shape:
        raise ValidationError(f"shape mismatch: r {tuple(r.shape)}, note_dur {tuple(note_dur.shape)}, "
                              f"gt {tuple(gt_dur.shape)}")
    if r.dim() == 1:
        r, note_dur, gt_dur = r[None], note_dur[None], gt_dur[None]
        mask = None if mask is None else mask[None]
    err = r * note_dur.to(r.dtype) - gt_dur.to(r.dtype)
    if mask is not None:
        err = err * mask.to(r.dtype)
    return torch.linalg.vector_norm(err, dim=-1).mean()


def lf0_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of the per-sequence L2 norm of the LF0 error."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 1:
        pred, target = pred[None], target[None]
        mask = None if mask is None else mask[None]
    err = pred - target
    if mask is not None:
        err = err * mask.to(pred.dtype)
    return torch.linalg.vector_norm(err, dim=-1).mean()


def length_regulator(h: torch.Tensor, dur: torch.Tensor, mask: torch.Tensor | None = None):
    """Repeat phoneme vector ``h[i]`` ``dur[i]`` times.

    Accepts a single sequence ``(N, H)`` / ``(N,)`` and returns ``(sum(dur), H)``,
    or a padded batch ``(B, N, H)`` / ``(B, N)`` with phoneme ``mask`` and
    returns ``(frames (B, T, H), frame_mask (B, T))``.
    """
    if h.dim() == 2:
        if dur.numel() and dur.min() < 1:
            raise ValidationError("durations must be >= 1 frame")
        return torch.repeat_interleave(h, dur.long(), dim=0)
    if mask is None:
        mask = torch.ones(dur.shape, dtype=torch.bool, device=dur.device)
    dur = dur.long() * mask
    if (dur[mask] < 1).any():
        raise ValidationError("durations must be >= 1 frame")
    ends = torch.cumsum(dur, dim=1)
    lengths = ends[:, -1]
    total = int(lengths.max())
    t = torch.arange(total, device=dur.device)
    idx = torch.searchsorted(ends, t.expand(len(dur), total).contiguous(), right=True)
    idx = idx.clamp_max(dur.shape[1] - 1)
    frame_mask = sequence_mask(lengths, total)
    out = torch.gather(h, 1, idx.unsqueeze(-1).expand(-1, -1, h.shape[-1]))
    return out * frame_mask.unsqueeze(-1).to(h.dtype), frame_mask


class F0Predictor(nn.Module):
    """FFT-block stack predicting one LF0 value per frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stack = FFTStack(cfg.f0_predictor_blocks, cfg.hidden, cfg.heads, cfg.ffn_filter,
                              cfg.ffn_kernel, cfg.dropout)
        self.head = nn.Linear(cfg.hidden, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("offset", torch.zeros(()))

    def forward(self, h_text: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if h_text.shape[1] == 0:
            raise ValidationError("empty frame sequence")
        return (self.head(self.stack(h_text, mask)).squeeze(-1) + self.offset) * mask.to(h_text.dtype)


class FramePriorNetwork(nn.Module):
    """Frame-level prior mean / log-scale from expanded score features.

    LF0 (centred on ``lf0_offset``) enters through a learned projection added
    to the frame features; ``use_f0=False`` drops that path.
    """

    def __init__(self, cfg: ModelConfig, use_f0: bool = True):
        super().__init__()
        self.use_f0 = use_f0
        self.latent_dim = cfg.latent_dim
        if use_f0:
            self.lf0_proj = nn.Linear(1, cfg.hidden)
        if cfg.frame_prior_type == "fft":
            self.net = FFTStack(cfg.frame_prior_blocks, cfg.hidden, cfg.heads, cfg.ffn_filter,
                                cfg.ffn_kernel, cfg.dropout)
        else:
            self.net = ConvStack(cfg.frame_prior_blocks, cfg.hidden, cfg.ffn_kernel, cfg.dropout)
        self.proj = nn.Linear(cfg.hidden, 2 * cfg.latent_dim)
        self.register_buffer("lf0_offset", torch.zeros(()))

    def forward(self, h_text: torch.Tensor, mask: torch.Tensor, lf0: torch.Tensor | None = None):
        x = h_text
        if self.use_f0:
            if lf0 is None or lf0.shape != h_text.shape[:2]:
                raise ValidationError("lf0 must have one value per frame")
            x = x + self.lf0_proj((lf0 - self.lf0_offset).unsqueeze(-1))
        stats = self.proj(self.net(x, mask)) * mask.unsqueeze(-1).to(x.dtype)
        mu, log_sigma = stats.split(self.latent_dim, dim=-1)
        return mu, log_sigma


class PhonemeLevelPrior(nn.Module):
    """Ablation stand-in for the frame prior: phoneme-level statistics."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        self.proj = nn.Linear(cfg.hidden, 2 * cfg.latent_dim)

    def forward(self, h_ph: torch.Tensor, ph_mask: torch.Tensor):
        stats = self.proj(h_ph) * ph_mask.unsqueeze(-1).to(h_ph.dtype)
        return stats.split(self.latent_dim, dim=-1)


class AffineCoupling(nn.Module):
    """One affine coupling layer over the channel axis.

    ``flip=False`` transforms the second half conditioned on the first;
    ``flip=True`` the reverse. The shift/log-scale head starts at zero, so a
    fresh layer is the identity.
    """

    def __init__(self, channels: int, hidden: int, kernel_size: int, n_layers: int, flip: bool):
        super().__init__()
        self.half = channels // 2
        self.flip = flip
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.wn = WaveNet(hidden, kernel_size, n_layers)
        self.post = nn.Conv1d(hidden, 2 * self.half, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _split(self, x):
        a, b = x[:, : self.half], x[:, self.half:]
        return (b, a) if self.flip else (a, b)

    def _join(self, cond, moved):
        return torch.cat([moved, cond] if self.flip else [cond, moved], dim=1)

    def _params(self, cond, m):
        h = self.wn(self.pre(cond) * m, m)
        shift, log_scale = self.post(h).split(self.half, dim=1)
        return shift * m, log_scale * m

    def forward(self, x: torch.Tensor, m: torch.Tensor):
        cond, moved = self._split(x)
        shift, log_scale = self._params(cond, m)
        moved = (shift + moved * torch.exp(log_scale)) * m
        return self._join(cond, moved), log_scale.sum(dim=(1, 2))

    def inverse(self, y: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        cond, moved = self._split(y)
        shift, log_scale = self._params(cond, m)
        moved = (moved - shift) * torch.exp(-log_scale) * m
        return self._join(cond, moved)


class Flow(nn.Module):
    """Stack of affine couplings with alternating split halves.

    Tensors are ``(batch, frames, channels)``; ``mask`` is ``(batch, frames)``.
    """

    def __init__(self, channels: int, hidden: int, kernel_size: int, n_layers: int, depth: int):
        super().__init__()
        if channels % 2:
            raise ValidationError(f"flow needs an even channel count, got {channels}")
        self.layers = nn.ModuleList(
            AffineCoupling(channels, hidden, kernel_size, n_layers, flip=bool(i % 2)) for i in range(depth)
        )

    @staticmethod
    def _mask(z, mask):
        if mask is None:
            mask = torch.ones(z.shape[:2], dtype=torch.bool, device=z.device)
        return mask.unsqueeze(1).to(z.dtype)

    def forward(self, z: torch.Tensor, mask: torch.Tensor | None = None):
        m = self._mask(z, mask)
        x = z.transpose(1, 2) * m
        logdet = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        for layer in self.layers:
            x, ld = layer(x, m)
            logdet = logdet + ld
        return x.transpose(1, 2), logdet

    def inverse(self, u: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        m = self._mask(u, mask)
        x = u.transpose(1, 2) * m
        for layer in reversed(self.layers):
            x = layer.inverse(x, m)
        return x.transpose(1, 2)


class PhonemePredictor(nn.Module):
    """Two FFT blocks over the latent and a head over phonemes + CTC blank."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.inp = nn.Linear(cfg.latent_dim, cfg.hidden)
        self.stack = FFTStack(cfg.phoneme_predictor_blocks, cfg.hidden, cfg.heads, cfg.ffn_filter,
                              cfg.ffn_kernel, cfg.dropout)
        self.head = nn.Linear(cfg.hidden, cfg.inventory_size + 1)

    @property
    def blank(self) -> int:
        return self.head.out_features - 1

    def forward(self, z: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if z.shape[1] == 0:
            raise ValidationError("empty latent sequence")
        return self.head(self.stack(self.inp(z), mask))
