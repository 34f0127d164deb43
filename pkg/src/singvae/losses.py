"""Loss terms for the generator-side objective and the discriminator."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch.nn import functional as F

from .config import SpectrogramConfig
from .dsp import mel_spectrogram
from .errors import ValidationError
from .posterior import DiscriminatorOutput

_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def recon_loss(y_ref: torch.Tensor, y_gen: torch.Tensor, cfg: SpectrogramConfig) -> torch.Tensor:
    """Mean absolute difference between log-mel spectrograms."""
    if y_ref.shape != y_gen.shape:
        raise ValidationError(f"length mismatch: {tuple(y_ref.shape)} vs {tuple(y_gen.shape)}")
    return (mel_spectrogram(y_ref, cfg) - mel_spectrogram(y_gen, cfg)).abs().mean()


def gaussian_log_prob(x, mu, log_sigma):
    return -log_sigma - _HALF_LOG_2PI - 0.5 * ((x - mu) * torch.exp(-log_sigma)) ** 2


def kl_loss(mu_q: torch.Tensor, log_sigma_q: torch.Tensor, z: torch.Tensor,
            mu_p: torch.Tensor, log_sigma_p: torch.Tensor, flow=None,
            mask: torch.Tensor | None = None) -> torch.Tensor:
    """Single-sample estimate of KL(q(z|y) || p(z|c)) per latent element.

    ``p`` is the flow-transformed prior: ``log p(z) = log N(f(z); mu_p,
    sigma_p) + log|det df/dz|``. Tensors are (B, T, D); the estimate is
    averaged over valid frames and latent dimensions. ``flow=None`` means the
    identity map.
    """
    shapes = {tuple(t.shape) for t in (mu_q, log_sigma_q, z, mu_p, log_sigma_p)}
    if len(shapes) != 1:
        raise ValidationError(f"frame/latent shape mismatch: {sorted(shapes)}")
    if mask is None:
        mask = torch.ones(z.shape[:2], dtype=torch.bool, device=z.device)
    if flow is None:
        f_z, logdet = z, torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
    else:
        f_z, logdet = flow(z, mask)
    m = mask.unsqueeze(-1).to(z.dtype)
    log_q = gaussian_log_prob(z, mu_q, log_sigma_q)
    log_p = gaussian_log_prob(f_z, mu_p, log_sigma_p)
    count = m.sum() * z.shape[-1]
    return (((log_q - log_p) * m).sum() - logdet.sum()) / count


def _check_structure(a: DiscriminatorOutput, b: DiscriminatorOutput):
    if len(a.scores) != len(b.scores) or a.structure() != b.structure():
        raise ValidationError(f"discriminator structures differ: {a.structure()} vs {b.structure()}")


def adv_losses(d_real: DiscriminatorOutput, d_fake: DiscriminatorOutput):
    """Least-squares GAN losses summed over sub-discriminators.

    Returns ``(adv_g, adv_d)`` with ``adv_g = sum E[(D(G(z)) - 1)^2]`` and
    ``adv_d = sum E[(D(y) - 1)^2 + D(G(z))^2]``.
    """
    _check_structure(d_real, d_fake)
    adv_g = sum(torch.mean((1 - f) ** 2) for f in d_fake.scores)
    adv_d = sum(torch.mean((1 - r) ** 2) + torch.mean(f ** 2) for r, f in zip(d_real.scores, d_fake.scores))
    return adv_g, adv_d


def generator_adv_loss(d_fake: DiscriminatorOutput) -> torch.Tensor:
    return sum(torch.mean((1 - f) ** 2) for f in d_fake.scores)


def discriminator_adv_loss(d_real: DiscriminatorOutput, d_fake: DiscriminatorOutput) -> torch.Tensor:
    return adv_losses(d_real, d_fake)[1]


def feature_matching_loss(d_real: DiscriminatorOutput, d_fake: DiscriminatorOutput) -> torch.Tensor:
    """Sum over every intermediate layer of the mean L1 feature distance.

    Real features are detached, so gradients reach only the generator.
    """
    _check_structure(d_real, d_fake)
    total = 0.0
    for fr, ff in zip(d_real.features, d_fake.features):
        for a, b in zip(fr, ff):
            if a.shape != b.shape:
                raise ValidationError(f"feature map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
            total = total + torch.mean(torch.abs(a.detach() - b))
    return total


def ctc_min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target`` (repeats need a blank between)."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_objective(logits: torch.Tensor, targets, input_lengths=None, target_lengths=None,
                  reduction: str = "sum") -> torch.Tensor:
    """CTC negative log-likelihood with the blank as the last class.

    ``logits`` is (T, C) with a single target sequence, or (B, T, C) with
    padded ``targets`` (B, S) plus lengths. ``reduction``: ``"sum"`` (total
    NLL), ``"mean"`` (per-sequence NLL divided by target length, averaged
    over the batch) or ``"none"``.
    """
    single = logits.dim() == 2
    if single:
        logits = logits[None]
        targets = torch.as_tensor(list(targets), dtype=torch.long)[None]
    targets = torch.as_tensor(targets, dtype=torch.long)
    b, t, c = logits.shape
    if input_lengths is None:
        input_lengths = torch.full((b,), t, dtype=torch.long)
    if target_lengths is None:
        target_lengths = torch.full((b,), targets.shape[1], dtype=torch.long)
    input_lengths = torch.as_tensor(input_lengths, dtype=torch.long)
    target_lengths = torch.as_tensor(target_lengths, dtype=torch.long)
    for i in range(b):
        tgt = targets[i, : target_lengths[i]].tolist()
        if any(s < 0 or s >= c - 1 for s in tgt):
            raise ValidationError(f"CTC target symbol outside [0, {c - 1})")
        need = ctc_min_frames(tgt)
        if need > int(input_lengths[i]):
            raise ValidationError(f"target needs {need} frames for CTC but input has {int(input_lengths[i])}")
    log_probs = F.log_softmax(logits, dim=-1).transpose(0, 1)
    return F.ctc_loss(log_probs, targets, input_lengths, target_lengths, blank=c - 1,
                      reduction=reduction, zero_infinity=False)
