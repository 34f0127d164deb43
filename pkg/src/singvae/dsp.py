"""Signal-processing front end.

Linear and mel spectrograms are computed in torch so the mel reconstruction
loss can backpropagate into the waveform generator; they accept numpy input
too and then return numpy. F0 extraction is numpy-only.

Frame convention: frame ``t`` is centred on sample ``t * hop_size`` with
``fft_size // 2`` reflect padding on both sides, so a signal of ``n``
samples yields ``1 + n // hop_size`` frames (see :func:`frame_count`).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .config import SpectrogramConfig
from .errors import ValidationError
from .score import AudioClip

LOG_FLOOR = 1e-5
VOICING_THRESHOLD = 0.1
SILENCE_RMS = 1e-3


def frame_count(n_samples: int, cfg: SpectrogramConfig) -> int:
    """Number of analysis frames for ``n_samples`` samples (centred frames)."""
    if n_samples < cfg.win_size:
        raise ValidationError(f"{n_samples} samples is shorter than one window ({cfg.win_size})")
    return 1 + n_samples // cfg.hop_size


def _as_tensor(audio, cfg: SpectrogramConfig) -> tuple[torch.Tensor, bool]:
    if isinstance(audio, AudioClip):
        if audio.sample_rate != cfg.sample_rate:
            raise ValidationError(f"audio is {audio.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
        return torch.from_numpy(audio.samples), True
    if isinstance(audio, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(audio, dtype=np.float64)), True
    return audio, False


def _stft_magnitude(x: torch.Tensor, cfg: SpectrogramConfig) -> torch.Tensor:
    if x.shape[-1] < cfg.win_size:
        raise ValidationError(f"{x.shape[-1]} samples is shorter than one window ({cfg.win_size})")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    window = torch.hann_window(cfg.win_size, dtype=x.dtype, device=x.device)
    spec = torch.stft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_size,
        win_length=cfg.win_size,
        window=window,
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    mag = spec.abs().transpose(-1, -2)
    return mag.reshape(*lead, *mag.shape[-2:])


def linear_spectrogram(audio, cfg: SpectrogramConfig):
    """Magnitude STFT, shape ``(..., frames, fft_size // 2 + 1)``."""
    x, to_numpy = _as_tensor(audio, cfg)
    mag = _stft_magnitude(x, cfg)
    return mag.numpy() if to_numpy else mag


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _mel_basis(sample_rate: int, fft_size: int, mel_bins: int, fmin: float, fmax: float) -> np.ndarray:
    fft_freqs = np.linspace(0.0, sample_rate / 2, fft_size // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    lower = (fft_freqs[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - fft_freqs[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    # area normalisation keeps band energy comparable across widths
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular mel filters on the HTK mel scale, shape ``(mel_bins, n_freqs)``."""
    return _mel_basis(cfg.sample_rate, cfg.fft_size, cfg.mel_bins, float(cfg.fmin), float(cfg.fmax)).copy()


def mel_spectrogram(audio, cfg: SpectrogramConfig):
    """Log mel magnitudes, shape ``(..., frames, mel_bins)``, floored at 1e-5."""
    x, to_numpy = _as_tensor(audio, cfg)
    mag = _stft_magnitude(x, cfg)
    basis = torch.from_numpy(mel_filterbank(cfg)).to(dtype=mag.dtype, device=mag.device)
    mel = torch.log(torch.clamp(mag @ basis.T, min=LOG_FLOOR))
    return mel.numpy() if to_numpy else mel


@dataclass(frozen=True, eq=False)
class F0Contour:
    f0_hz: np.ndarray
    lf0: np.ndarray
    voiced_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.f0_hz)


def interpolate_lf0(f0_hz: np.ndarray, floor_hz: float) -> np.ndarray:
    """Log-F0 with unvoiced gaps filled by linear interpolation in the log domain.

    Edges hold the nearest voiced value; an all-unvoiced contour maps to
    ``log(floor_hz)``.
    """
    f0_hz = np.asarray(f0_hz, dtype=np.float64)
    voiced = f0_hz > 0
    if not voiced.any():
        return np.full(len(f0_hz), np.log(floor_hz))
    idx = np.arange(len(f0_hz))
    lf0 = np.interp(idx, idx[voiced], np.log(f0_hz[voiced]))
    lf0[voiced] = np.log(f0_hz[voiced])
    return lf0


def _frames(x: np.ndarray, centers: np.ndarray, start_offset: int, length: int) -> np.ndarray:
    pad = length + abs(start_offset)
    padded = np.pad(x, (pad, pad))
    starts = centers + start_offset + pad
    return padded[starts[:, None] + np.arange(length)[None, :]]


def _cmnd(frames: np.ndarray, window: int, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw and cumulative-mean-normalised difference functions per frame (YIN)."""
    n = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    head = np.zeros_like(frames)
    head[:, :window] = frames[:, :window]
    spec_full = np.fft.rfft(frames, nfft)
    spec_head = np.fft.rfft(head, nfft)
    xcorr = np.fft.irfft(np.conj(spec_head) * spec_full, nfft)[:, : max_lag + 1]

    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    energy0 = sq[:, window][:, None]
    lags = np.arange(max_lag + 1)
    energy_lag = sq[:, lags + window] - sq[:, lags]
    diff = np.maximum(energy0 + energy_lag - 2.0 * xcorr, 0.0)

    cmnd = np.ones_like(diff)
    running = np.cumsum(diff[:, 1:], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(running > 0, diff[:, 1:] * lags[1:] / running, 1.0)
    return diff, cmnd


def extract_f0(audio, cfg: SpectrogramConfig) -> F0Contour:
    """Frame-level F0 by a YIN-style autocorrelation search in [f0_min, f0_max].

    For each centred frame the cumulative-mean-normalised difference is
    scanned for the first lag dipping under the absolute threshold (falling
    back to the global minimum), then refined by parabolic interpolation.
    Frames whose best dip stays above the voicing threshold, or whose RMS is
    below the silence gate, are unvoiced (F0 = 0).
    """
    if isinstance(audio, AudioClip):
        if audio.sample_rate != cfg.sample_rate:
            raise ValidationError(f"audio is {audio.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
        x = audio.samples
    else:
        x = np.asarray(audio, dtype=np.float64)
    sr = cfg.sample_rate
    n_frames = frame_count(len(x), cfg)
    # one guard lag on each side so in-range pitches never sit on the search edge
    min_lag = max(2, int(np.floor(sr / cfg.f0_max)) - 1)
    max_lag = int(np.ceil(sr / cfg.f0_min)) + 1
    window = max(max_lag, cfg.win_size // 2)
    length = window + max_lag + 1
    centers = np.arange(n_frames) * cfg.hop_size
    frames = _frames(x, centers, -(length // 2), length)

    diff, cmnd = _cmnd(frames, window, max_lag)
    search = cmnd[:, min_lag: max_lag + 1]
    below = search < VOICING_THRESHOLD
    first = np.where(below.any(axis=1), below.argmax(axis=1), search.argmin(axis=1))
    # walk down to the bottom of the dip we landed in
    lag = first + min_lag
    rows = np.arange(n_frames)
    for _ in range(max_lag):
        nxt = np.minimum(lag + 1, max_lag)
        step = cmnd[rows, nxt] < cmnd[rows, lag]
        if not step.any():
            break
        lag = np.where(step, nxt, lag)

    best = cmnd[rows, lag]
    # refine on the raw difference: the normalisation skews the dip at short lags
    left = diff[rows, np.maximum(lag - 1, 0)]
    mid = diff[rows, lag]
    right = diff[rows, np.minimum(lag + 1, max_lag)]
    denom = left - 2.0 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / denom, 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    period = lag + shift

    rms = np.sqrt(np.mean(frames[:, :window] ** 2, axis=1))
    voiced = (best < VOICING_THRESHOLD) & (rms > SILENCE_RMS) & (lag > min_lag) & (lag < max_lag)
    with np.errstate(divide="ignore"):
        hz = sr / period
    voiced &= (hz >= cfg.f0_min) & (hz <= cfg.f0_max)
    f0 = np.where(voiced, hz, 0.0)
    voiced = f0 > 0
    return F0Contour(f0_hz=f0, lf0=interpolate_lf0(f0, cfg.f0_min), voiced_mask=voiced)
