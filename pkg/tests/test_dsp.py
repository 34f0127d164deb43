import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from singvae.config import SpectrogramConfig, desk_spectrogram
from singvae.dsp import (
    LOG_FLOOR,
    extract_f0,
    frame_count,
    interpolate_lf0,
    linear_spectrogram,
    mel_spectrogram,
)
from singvae.errors import ValidationError
from singvae.score import AudioClip, midi_to_hz

CFG = desk_spectrogram()
SR = CFG.sample_rate


def sine(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), SR)


def harmonic(freq, seconds=1.0, n=8):
    t = np.arange(int(seconds * SR)) / SR
    y = sum(np.sin(2 * np.pi * h * freq * t) / h for h in range(1, n + 1) if h * freq < SR / 2)
    return AudioClip(0.5 * y / np.max(np.abs(y)), SR)


# Independent references ----------------------------------------------------------

def reference_linear(x, cfg):
    """Frame-by-frame loop: reflect pad, periodic Hann, rfft magnitude."""
    pad = cfg.fft_size // 2
    xp = np.pad(x, pad, mode="reflect")
    n = np.arange(cfg.win_size)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.win_size)
    off = (cfg.fft_size - cfg.win_size) // 2
    full = np.zeros(cfg.fft_size)
    full[off:off + cfg.win_size] = win
    frames = []
    t = 0
    while t * cfg.hop_size + cfg.fft_size <= len(xp):
        seg = xp[t * cfg.hop_size: t * cfg.hop_size + cfg.fft_size]
        frames.append(np.abs(np.fft.rfft(seg * full)))
        t += 1
    return np.array(frames)


def reference_filterbank(cfg):
    def mel(f):
        return 2595.0 * math.log10(1 + f / 700.0)

    def hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1)

    lo, hi = mel(cfg.fmin), mel(cfg.fmax)
    pts = [hz(lo + (hi - lo) * i / (cfg.mel_bins + 1)) for i in range(cfg.mel_bins + 2)]
    bins = [k * cfg.sample_rate / cfg.fft_size for k in range(cfg.fft_size // 2 + 1)]
    fb = np.zeros((cfg.mel_bins, len(bins)))
    for m in range(cfg.mel_bins):
        a, c, b = pts[m], pts[m + 1], pts[m + 2]
        for k, f in enumerate(bins):
            if a < f <= c:
                w = (f - a) / (c - a)
            elif c < f < b:
                w = (b - f) / (b - c)
            else:
                w = 0.0
            fb[m, k] = w * 2.0 / (b - a)
    return fb


# frame_count -------------------------------------------------------------------

def test_frame_count_examples():
    assert frame_count(CFG.hop_size * 100, CFG) == 101
    assert frame_count(CFG.win_size, CFG) == 1 + CFG.win_size // CFG.hop_size
    with pytest.raises(ValidationError):
        frame_count(CFG.win_size - 1, CFG)


def test_frame_count_matches_spectrograms(rng):
    for _ in range(100):
        n = int(rng.integers(CFG.win_size, 6000))
        x = rng.uniform(-0.5, 0.5, n)
        # independent count: windows of fft_size that fit in the reflect-padded signal
        oracle = (n + 2 * (CFG.fft_size // 2) - CFG.fft_size) // CFG.hop_size + 1
        assert frame_count(n, CFG) == oracle == len(linear_spectrogram(x, CFG))


def test_frame_alignment_across_features(rng):
    x = AudioClip(rng.uniform(-0.5, 0.5, 4321), SR)
    n = frame_count(len(x), CFG)
    assert len(linear_spectrogram(x, CFG)) == len(mel_spectrogram(x, CFG)) == len(extract_f0(x, CFG)) == n


# linear spectrogram -------------------------------------------------------------

def test_silence_spectrogram_is_zero():
    spec = linear_spectrogram(AudioClip(np.zeros(SR), SR), CFG)
    assert spec.shape == (frame_count(SR, CFG), CFG.n_freqs)
    assert np.all(spec == 0)


def test_sine_peak_bin():
    spec = linear_spectrogram(sine(440.0), CFG)
    expected = round(440 * CFG.fft_size / SR)
    assert np.all(spec[2:-2].argmax(axis=1) == expected)


def test_linear_matches_reference(rng):
    x = rng.normal(0, 0.2, 3000).clip(-1, 1)
    np.testing.assert_allclose(linear_spectrogram(x, CFG), reference_linear(x, CFG), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 4.0), st.integers(0, 10_000))
def test_linear_scaling(alpha, seed):
    x = np.random.default_rng(seed).uniform(-0.2, 0.2, 1500)
    np.testing.assert_allclose(linear_spectrogram(alpha * x, CFG), alpha * linear_spectrogram(x, CFG),
                               rtol=1e-6, atol=1e-12)


def test_sample_rate_mismatch():
    with pytest.raises(ValidationError):
        linear_spectrogram(AudioClip(np.zeros(2000), 22050), CFG)


def test_tensor_input_is_differentiable():
    x = torch.randn(2, 1024, dtype=torch.float64, requires_grad=True)
    mel = mel_spectrogram(x, CFG)
    assert isinstance(mel, torch.Tensor) and mel.shape == (2, 9, CFG.mel_bins)
    mel.sum().backward()
    assert torch.isfinite(x.grad).all()


# mel spectrogram -------------------------------------------------------------

def test_mel_silence_is_log_floor():
    mel = mel_spectrogram(AudioClip(np.zeros(SR), SR), CFG)
    np.testing.assert_allclose(mel, np.log(LOG_FLOOR))


def test_mel_decreases_with_scale(rng):
    x = AudioClip(rng.uniform(-0.8, 0.8, SR // 2), SR)
    half = AudioClip(0.5 * x.samples, SR)
    assert np.all(mel_spectrogram(half, CFG) < mel_spectrogram(x, CFG))


def test_mel_white_noise_matches_reference(rng):
    x = rng.normal(0, 0.3, SR // 2).clip(-1, 1)
    ref = np.log(np.maximum(reference_linear(x, CFG) @ reference_filterbank(CFG).T, LOG_FLOOR))
    np.testing.assert_allclose(mel_spectrogram(x, CFG), ref, atol=1e-4)


def test_mel_full_size_config(rng):
    cfg = SpectrogramConfig()
    x = rng.normal(0, 0.3, 6000).clip(-1, 1)
    ref = np.log(np.maximum(reference_linear(x, cfg) @ reference_filterbank(cfg).T, LOG_FLOOR))
    np.testing.assert_allclose(mel_spectrogram(x, cfg), ref, atol=1e-4)


# F0 -------------------------------------------------------------------------------

def test_f0_sine_440():
    f0 = extract_f0(sine(440.0), CFG)
    interior = f0.f0_hz[3:-3]
    assert f0.voiced_mask[3:-3].all()
    assert np.max(np.abs(interior - 440.0)) < 3.0


def test_f0_silence_unvoiced():
    f0 = extract_f0(AudioClip(np.zeros(SR), SR), CFG)
    assert not f0.voiced_mask.any()
    assert np.all(f0.f0_hz == 0)
    np.testing.assert_allclose(f0.lf0, np.log(CFG.f0_min))


@pytest.mark.parametrize("pitch", [45, 48, 57, 64, 69, 76, 79, 81])
def test_f0_harmonic_sources(pitch):
    hz = midi_to_hz(pitch)
    f0 = extract_f0(harmonic(hz, 0.5), CFG).f0_hz[3:-3]
    assert np.all(f0 > 0)
    assert np.max(np.abs(f0 - hz)) < 3.0


def test_lf0_consistent_with_f0(rng):
    x = np.concatenate([sine(300.0, 0.3).samples, np.zeros(3000), sine(500.0, 0.3).samples])
    f0 = extract_f0(x, CFG)
    assert np.isfinite(f0.lf0).all()
    v = f0.voiced_mask
    assert v.any() and (~v).any()
    np.testing.assert_allclose(np.exp(f0.lf0[v]), f0.f0_hz[v], rtol=1e-9)


def test_interpolate_lf0_gaps():
    lf0 = interpolate_lf0(np.array([0, 100.0, 0, 0, 400.0, 0]), 80.0)
    np.testing.assert_allclose(np.exp(lf0), [100, 100, 100 * 4 ** (1 / 3), 100 * 4 ** (2 / 3), 400, 400])
