"""Stand-alone duration model for comparing note-normalized and raw targets.

Only the text encoder and duration predictor are involved, so the
comparison needs scores but no audio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .layers import sequence_mask
from .prior import DurationPredictor, TextEncoder, duration_loss, predicted_duration
from .score import MusicScore


class DurationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.note_norm = cfg.note_norm
        self.text_encoder = TextEncoder(cfg)
        self.duration_predictor = DurationPredictor(cfg.hidden, cfg.duration_filter, cfg.duration_kernel,
                                                    cfg.duration_layers, cfg.dropout)

    def forward(self, phonemes, note_pitch, note_dur, mask) -> torch.Tensor:
        return self.duration_predictor(self.text_encoder(phonemes, note_pitch, note_dur, mask), mask)

    def scale(self, note_dur: torch.Tensor) -> torch.Tensor:
        """Multiplier turning the head output into frames."""
        return note_dur if self.note_norm else torch.ones_like(note_dur)


@dataclass
class ScoreBatch:
    phonemes: torch.Tensor
    note_pitch: torch.Tensor
    note_dur: torch.Tensor
    phn_dur: torch.Tensor
    mask: torch.Tensor


def collate_scores(scores: Sequence[MusicScore]) -> ScoreBatch:
    n = max(len(s.phonemes) for s in scores)

    def pad(key, fill):
        return torch.tensor([list(getattr(s, key)) + [fill] * (n - len(s.phonemes)) for s in scores])

    lengths = torch.tensor([len(s.phonemes) for s in scores])
    return ScoreBatch(pad("phonemes", 0), pad("note_pitch", 0), pad("note_dur", 1), pad("phn_dur", 0),
                      sequence_mask(lengths, n))


def train_duration_model(scores: Sequence[MusicScore], cfg: ModelConfig, seed: int, steps: int = 600,
                         batch_size: int = 16, learning_rate: float = 1e-3) -> DurationModel:
    """Fit a :class:`DurationModel` with the duration L2 objective."""
    torch.manual_seed(seed)
    model = DurationModel(cfg)
    targets = np.concatenate([np.asarray(s.phn_dur) / (np.asarray(s.note_dur) if cfg.note_norm else 1.0)
                              for s in scores])
    model.duration_predictor.offset.fill_(float(targets.mean()))
    opt = torch.optim.Adam(model.parameters(), learning_rate)
    rng = np.random.default_rng(seed)
    model.train()
    for _ in range(steps):
        idx = rng.choice(len(scores), size=min(batch_size, len(scores)), replace=False)
        b = collate_scores([scores[i] for i in idx])
        r = model(b.phonemes, b.note_pitch, b.note_dur, b.mask)
        loss = duration_loss(r, model.scale(b.note_dur), b.phn_dur, b.mask)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return model


@torch.no_grad()
def predict_durations(model: DurationModel, score: MusicScore) -> np.ndarray:
    model.eval()
    b = collate_scores([score])
    r = model(b.phonemes, b.note_pitch, b.note_dur, b.mask)
    return predicted_duration(r, model.scale(b.note_dur))[0].numpy()


def heldout_dur_mae(model: DurationModel, scores: Sequence[MusicScore]) -> float:
    """Mean absolute frame error over every phoneme in ``scores``."""
    err = np.concatenate([predict_durations(model, s) - np.asarray(s.phn_dur) for s in scores])
    return float(np.mean(np.abs(err)))
