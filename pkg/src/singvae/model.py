"""Generator-side network: prior encoder, posterior encoder, flow, phoneme
predictor and waveform decoder wired together for training and synthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, SpectrogramConfig
from .dsp import extract_f0, linear_spectrogram
from .errors import ValidationError
from .layers import sequence_mask
from .posterior import Generator, LatentSequence, PosteriorEncoder, random_slices
from .prior import (
    DurationPredictor,
    F0Predictor,
    Flow,
    FramePriorNetwork,
    PhonemeLevelPrior,
    PhonemePredictor,
    TextEncoder,
    length_regulator,
    predicted_duration,
)
from .score import CorpusEntry, MusicScore


@dataclass
class PreparedClip:
    """Corpus entry converted to model inputs on the score's frame grid."""

    name: str
    phonemes: np.ndarray
    note_pitch: np.ndarray
    note_dur: np.ndarray
    phn_dur: np.ndarray
    spec: np.ndarray       # (T, n_freqs)
    lf0: np.ndarray        # (T,)
    audio: np.ndarray      # (T * hop,)

    @property
    def frames(self) -> int:
        return len(self.lf0)


def prepare_entry(entry: CorpusEntry, cfg: SpectrogramConfig) -> PreparedClip:
    """Spectrogram and LF0 targets trimmed to ``sum(phn_dur)`` frames.

    Centred analysis yields one frame more than the score covers; the last
    frame is dropped and the audio is cut/padded to exactly ``T * hop``.
    """
    score = entry.score
    if score.phn_dur is None:
        raise ValidationError(f"{entry.name or 'entry'} has no phoneme durations")
    t = score.total_frames
    n = t * cfg.hop_size
    audio = entry.audio.samples[:n]
    if len(audio) < n:
        audio = np.pad(audio, (0, n - len(audio)))
    spec = linear_spectrogram(audio, cfg)[:t]
    lf0 = extract_f0(audio, cfg).lf0[:t]
    return PreparedClip(
        name=entry.name,
        phonemes=np.asarray(score.phonemes, dtype=np.int64),
        note_pitch=np.asarray(score.note_pitch, dtype=np.int64),
        note_dur=np.asarray(score.note_dur, dtype=np.int64),
        phn_dur=np.asarray(score.phn_dur, dtype=np.int64),
        spec=spec.astype(np.float32),
        lf0=lf0.astype(np.float32),
        audio=audio.astype(np.float32),
    )


@dataclass
class Batch:
    phonemes: torch.Tensor     # (B, N)
    note_pitch: torch.Tensor
    note_dur: torch.Tensor
    phn_dur: torch.Tensor
    ph_lengths: torch.Tensor   # (B,)
    spec: torch.Tensor         # (B, T, F)
    lf0: torch.Tensor          # (B, T)
    frame_lengths: torch.Tensor
    audio: torch.Tensor        # (B, T * hop)

    @property
    def ph_mask(self) -> torch.Tensor:
        return sequence_mask(self.ph_lengths, self.phonemes.shape[1])

    @property
    def frame_mask(self) -> torch.Tensor:
        return sequence_mask(self.frame_lengths, self.spec.shape[1])


def _pad(arrays, dtype, fill=0):
    width = max(len(a) for a in arrays)
    out = np.full((len(arrays), width, *arrays[0].shape[1:]), fill, dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return torch.from_numpy(out)


def collate(clips: list[PreparedClip]) -> Batch:
    return Batch(
        phonemes=_pad([c.phonemes for c in clips], np.int64),
        note_pitch=_pad([c.note_pitch for c in clips], np.int64),
        note_dur=_pad([c.note_dur for c in clips], np.int64, fill=1),
        phn_dur=_pad([c.phn_dur for c in clips], np.int64),
        ph_lengths=torch.tensor([len(c.phonemes) for c in clips]),
        spec=_pad([c.spec for c in clips], np.float32),
        lf0=_pad([c.lf0 for c in clips], np.float32),
        frame_lengths=torch.tensor([c.frames for c in clips]),
        audio=_pad([c.audio for c in clips], np.float32),
    )


def score_tensors(score: MusicScore):
    as_t = lambda v: torch.tensor([list(v)], dtype=torch.long)  # noqa: E731
    return as_t(score.phonemes), as_t(score.note_pitch), as_t(score.note_dur)


@dataclass
class TrainOutputs:
    y_hat: torch.Tensor            # (B, S * hop)
    y_ref: torch.Tensor            # (B, S * hop)
    starts: torch.Tensor
    dur_pred: torch.Tensor         # (B, N) ratio (note norm) or frames
    lf0_pred: torch.Tensor | None  # (B, T)
    posterior: LatentSequence
    mu_p: torch.Tensor
    log_sigma_p: torch.Tensor
    ctc_logits: torch.Tensor | None
    frame_mask: torch.Tensor
    ph_mask: torch.Tensor


@dataclass
class Synthesis:
    audio: torch.Tensor            # (B, sum(d_hat) * hop)
    durations: torch.Tensor        # (B, N) integer frames
    lf0: torch.Tensor | None       # (B, T)
    frame_mask: torch.Tensor


class SynthesizerModel(nn.Module):
    """Everything trained by the generator optimizer."""

    def __init__(self, cfg: ModelConfig, spec_cfg: SpectrogramConfig):
        super().__init__()
        self.cfg = cfg
        self.hop = spec_cfg.hop_size
        self.text_encoder = TextEncoder(cfg)
        self.duration_predictor = DurationPredictor(cfg.hidden, cfg.duration_filter, cfg.duration_kernel,
                                                    cfg.duration_layers, cfg.dropout)
        self.f0_predictor = None if cfg.remove_f0_predictor else F0Predictor(cfg)
        if cfg.remove_frame_prior:
            self.frame_prior = None
            self.phoneme_prior = PhonemeLevelPrior(cfg)
        else:
            self.frame_prior = FramePriorNetwork(cfg, use_f0=not cfg.remove_f0_predictor)
            self.phoneme_prior = None
        self.flow = Flow(cfg.latent_dim, cfg.flow_hidden, cfg.flow_kernel, cfg.flow_layers, cfg.flow_depth)
        self.posterior_encoder = PosteriorEncoder(spec_cfg.n_freqs, cfg)
        self.phoneme_predictor = None if cfg.remove_phoneme_predictor else PhonemePredictor(cfg)
        self.generator = Generator(cfg, spec_cfg.sample_rate)

    def set_data_offsets(self, lf0_mean: float, dur_target_mean: float) -> None:
        """Centre the LF0 and duration heads on corpus statistics."""
        if self.f0_predictor is not None:
            self.f0_predictor.offset.fill_(lf0_mean)
        if self.frame_prior is not None:
            self.frame_prior.lf0_offset.fill_(lf0_mean)
        self.duration_predictor.offset.fill_(dur_target_mean)

    def _voicing(self, note_pitch, dur, ph_mask) -> torch.Tensor:
        """Frame voicing (B, T): 1 inside sung notes, 0 on rests and padding."""
        voiced = (note_pitch > 0).to(torch.float32).unsqueeze(-1)
        return length_regulator(voiced, dur, ph_mask)[0].squeeze(-1)

    def _prior(self, h_ph, ph_mask, dur, lf0_for_prior):
        h_text, frame_mask = length_regulator(h_ph, dur, ph_mask)
        lf0_pred = None
        if self.f0_predictor is not None:
            lf0_pred = self.f0_predictor(h_text, frame_mask)
        if self.frame_prior is not None:
            lf0_in = lf0_for_prior if lf0_for_prior is not None else lf0_pred
            mu_p, log_sigma_p = self.frame_prior(h_text, frame_mask, lf0_in if self.frame_prior.use_f0 else None)
        else:
            mu_ph, ls_ph = self.phoneme_prior(h_ph, ph_mask)
            mu_p, _ = length_regulator(mu_ph, dur, ph_mask)
            log_sigma_p, _ = length_regulator(ls_ph, dur, ph_mask)
        return mu_p, log_sigma_p, lf0_pred, frame_mask

    def forward(self, batch: Batch, segment_frames: int, generator: torch.Generator | None = None,
                noise: torch.Tensor | None = None) -> TrainOutputs:
        """Teacher-forced pass: labeled durations and ground-truth LF0 drive the prior and the source."""
        ph_mask = batch.ph_mask
        h_ph = self.text_encoder(batch.phonemes, batch.note_pitch, batch.note_dur, ph_mask)
        dur_pred = self.duration_predictor(h_ph, ph_mask)
        mu_p, log_sigma_p, lf0_pred, frame_mask = self._prior(h_ph, ph_mask, batch.phn_dur, batch.lf0)
        if frame_mask.shape[1] != batch.spec.shape[1] or not torch.equal(frame_mask, batch.frame_mask):
            raise ValidationError("phoneme durations do not cover the spectrogram frames")

        post = self.posterior_encoder(batch.spec, frame_mask, noise=noise, generator=generator)
        ctc_logits = None if self.phoneme_predictor is None else self.phoneme_predictor(post.z, frame_mask)

        seg = min(segment_frames, int(batch.frame_lengths.min()))
        z_slice, starts = random_slices(post.z, batch.frame_lengths, seg, generator)
        if self.generator.source is None:
            y_hat = self.generator(z_slice)
        else:
            frame_idx = starts[:, None] + torch.arange(seg)[None, :]
            voiced = self._voicing(batch.note_pitch, batch.phn_dur, ph_mask)
            y_hat = self.generator(z_slice, torch.gather(batch.lf0, 1, frame_idx),
                                   torch.gather(voiced, 1, frame_idx))
        idx = (starts * self.hop)[:, None] + torch.arange(seg * self.hop)[None, :]
        y_ref = torch.gather(batch.audio, 1, idx)
        return TrainOutputs(y_hat, y_ref, starts, dur_pred, lf0_pred, post, mu_p, log_sigma_p,
                            ctc_logits, frame_mask, ph_mask)

    def durations_from_prediction(self, dur_pred: torch.Tensor, note_dur: torch.Tensor) -> torch.Tensor:
        if self.cfg.note_norm:
            return predicted_duration(dur_pred, note_dur)
        return predicted_duration(dur_pred, torch.ones_like(note_dur))

    @torch.no_grad()
    def infer(self, phonemes, note_pitch, note_dur, noise_scale: float = 1.0,
              generator: torch.Generator | None = None, ph_lengths: torch.Tensor | None = None) -> Synthesis:
        """Score -> durations -> frame prior -> inverse flow -> waveform."""
        if ph_lengths is None:
            ph_lengths = torch.full((phonemes.shape[0],), phonemes.shape[1], dtype=torch.long)
        ph_mask = sequence_mask(ph_lengths, phonemes.shape[1])
        h_ph = self.text_encoder(phonemes, note_pitch, note_dur, ph_mask)
        dur_pred = self.duration_predictor(h_ph, ph_mask)
        durations = self.durations_from_prediction(dur_pred, note_dur) * ph_mask
        mu_p, log_sigma_p, lf0_pred, frame_mask = self._prior(h_ph, ph_mask, durations, None)
        eps = torch.randn(mu_p.shape, dtype=mu_p.dtype, generator=generator)
        u = (mu_p + noise_scale * torch.exp(log_sigma_p) * eps) * frame_mask.unsqueeze(-1).to(mu_p.dtype)
        z = self.flow.inverse(u, frame_mask)
        if self.generator.source is None:
            audio = self.generator(z)
        else:
            audio = self.generator(z, lf0_pred, self._voicing(note_pitch, durations, ph_mask))
        sample_mask = frame_mask.repeat_interleave(self.hop, dim=1)
        return Synthesis(audio * sample_mask.to(audio.dtype), durations, lf0_pred, frame_mask)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
