"""Objective metrics for synthesized singing and the evaluation report."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import SpectrogramConfig
from .dsp import extract_f0, mel_spectrogram
from .errors import NoDataError, ValidationError
from .model import collate, prepare_entry, score_tensors
from .score import AudioClip, CorpusEntry, score_f0_contour
from .training import TrainState, synthesize

log = logging.getLogger(__name__)


def _contour(x, cfg: SpectrogramConfig | None) -> np.ndarray:
    if isinstance(x, AudioClip):
        if cfg is None:
            raise ValidationError("a SpectrogramConfig is needed to extract F0 from audio")
        return extract_f0(x, cfg).f0_hz
    return np.asarray(x, dtype=np.float64)


def f0_mae(gen, ref, cfg: SpectrogramConfig | None = None) -> float:
    """Mean |gen - ref| in Hz over frames voiced (> 0) in both contours.

    Either argument may be an :class:`AudioClip` (F0 is extracted with
    ``cfg``) or a per-frame contour in Hz. Contours are truncated to the
    shorter one.
    """
    pred_hz, ref_hz = _contour(gen, cfg), _contour(ref, cfg)
    n = min(len(pred_hz), len(ref_hz))
    pred_hz, ref_hz = pred_hz[:n], ref_hz[:n]
    both = (pred_hz > 0) & (ref_hz > 0)
    if not both.any():
        raise NoDataError("no frame is voiced in both contours")
    return float(np.mean(np.abs(pred_hz[both] - ref_hz[both])))


def f0_pearson(pred_hz: np.ndarray, ref_hz: np.ndarray) -> float:
    """Pearson correlation over frames voiced in both contours."""
    pred_hz = np.asarray(pred_hz, dtype=np.float64)
    ref_hz = np.asarray(ref_hz, dtype=np.float64)
    both = (pred_hz > 0) & (ref_hz > 0)
    if both.sum() < 2:
        raise NoDataError("fewer than two jointly voiced frames")
    return float(np.corrcoef(pred_hz[both], ref_hz[both])[0, 1])


def dur_mae(pred: Sequence[int], ref: Sequence[int]) -> float:
    """Mean absolute per-phoneme duration error in frames."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValidationError(f"duration lengths differ: {pred.shape} vs {ref.shape}")
    if pred.size == 0:
        raise NoDataError("no phonemes")
    return float(np.mean(np.abs(pred - ref)))


def mel_l1(gen: AudioClip, ref: AudioClip, cfg: SpectrogramConfig) -> float:
    """Mean absolute log-mel difference over the frames both clips cover."""
    a, b = mel_spectrogram(gen, cfg), mel_spectrogram(ref, cfg)
    n = min(len(a), len(b))
    return float(np.mean(np.abs(a[:n] - b[:n])))


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
    return row[-1]


def ctc_greedy_decode(logits: torch.Tensor) -> list[int]:
    """Best-path decoding of (T, C) logits; the blank is the last class."""
    blank = logits.shape[-1] - 1
    best = logits.argmax(-1).tolist()
    out, prev = [], None
    for s in best:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


@dataclass
class ClipMetrics:
    name: str
    f0_mae_hz: float
    mel_l1: float
    f0_pearson: float
    dur_mae_frames: float
    dur_ratio_error: float
    f0_predictor_mae_hz: float
    phoneme_cer: float
    voiced_frames: int


METRIC_FIELDS = tuple(f.name for f in fields(ClipMetrics) if f.name != "name")


@dataclass
class EvalReport:
    rows: list[ClipMetrics] = field(default_factory=list)
    duration_errors: list[int] = field(default_factory=list)

    @property
    def summary(self) -> dict[str, float]:
        """Unweighted mean over clips; NaN entries (metric undefined for a clip) are skipped."""
        out = {}
        for name in METRIC_FIELDS:
            vals = np.array([getattr(r, name) for r in self.rows], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            out[name] = float(vals.mean()) if vals.size else float("nan")
        out["clips"] = len(self.rows)
        return out

    @property
    def f0_mae(self) -> float:
        return self.summary["f0_mae_hz"]

    @property
    def dur_mae(self) -> float:
        return self.summary["dur_mae_frames"]

    @property
    def mel_l1(self) -> float:
        return self.summary["mel_l1"]

    def summary_text(self) -> str:
        lines = [f"clips evaluated: {len(self.rows)}"]
        for name in METRIC_FIELDS:
            lines.append(f"{name:>22}: {self.summary[name]:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | os.PathLike) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "metrics.csv", out / "summary.json"
        (out / "summary.txt").write_text(self.summary_text())
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["name", *METRIC_FIELDS])
            writer.writeheader()
            for r in self.rows:
                writer.writerow(asdict(r))
        json_path.write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _nan_on_empty(fn, *args) -> float:
    try:
        return fn(*args)
    except NoDataError:
        return float("nan")


@torch.no_grad()
def duration_ratios(state: TrainState, entry: CorpusEntry) -> np.ndarray:
    """Raw duration-head output per phoneme (a ratio when note normalisation is on)."""
    model = state.model
    model.eval()
    ph, pitch, ndur = score_tensors(entry.score)
    mask = torch.ones_like(ph, dtype=torch.bool)
    return model.duration_predictor(model.text_encoder(ph, pitch, ndur, mask), mask)[0].double().numpy()


@torch.no_grad()
def _phoneme_cer(state: TrainState, entry: CorpusEntry) -> float:
    model = state.model
    if model.phoneme_predictor is None:
        return float("nan")
    batch = collate([prepare_entry(entry, state.config.spectrogram)])
    post = model.posterior_encoder(batch.spec, batch.frame_mask, noise=torch.zeros(
        *batch.spec.shape[:2], state.config.model.latent_dim))
    logits = model.phoneme_predictor(post.z, batch.frame_mask)[0]
    ref = list(entry.score.phonemes)
    return edit_distance(ctc_greedy_decode(logits), ref) / len(ref)


def evaluate_clip(state: TrainState, entry: CorpusEntry, noise_scale: float = 0.0,
                  seed: int = 0) -> tuple[ClipMetrics, np.ndarray | None, AudioClip]:
    """Synthesize ``entry.score`` and score it against the labels.

    The F0 reference is the score contour laid out with the predicted
    durations, so timing errors do not count as pitch errors. Metrics that
    need phoneme durations are NaN (with a warning) when the entry has none.
    """
    spec_cfg = state.config.spectrogram
    score = entry.score
    audio, d_hat, lf0_pred = synthesize(score.without_durations(), state, noise_scale, seed)
    t = int(d_hat.sum())
    synth_f0 = extract_f0(audio, spec_cfg).f0_hz[:t]
    ref_f0 = score_f0_contour(score, d_hat)
    pred_f0 = float("nan")
    if lf0_pred is not None:
        pred_f0 = _nan_on_empty(f0_mae, np.exp(lf0_pred) * (ref_f0 > 0), ref_f0)
    if score.phn_dur is None:
        log.warning("%s: no phoneme durations; duration metrics and CER skipped", entry.name)
        derr, dmae, ratio, cer = None, float("nan"), float("nan"), float("nan")
    else:
        gt = np.asarray(score.phn_dur)
        derr = d_hat - gt
        dmae = dur_mae(d_hat, gt)
        target = gt / np.asarray(score.note_dur) if state.config.model.note_norm else gt
        ratio = float(np.mean(np.abs(duration_ratios(state, entry) - target)))
        cer = _phoneme_cer(state, entry)
    metrics = ClipMetrics(
        name=entry.name,
        f0_mae_hz=_nan_on_empty(f0_mae, synth_f0, ref_f0),
        mel_l1=mel_l1(audio, entry.audio, spec_cfg),
        f0_pearson=_nan_on_empty(f0_pearson, synth_f0, ref_f0),
        dur_mae_frames=dmae,
        dur_ratio_error=ratio,
        f0_predictor_mae_hz=pred_f0,
        phoneme_cer=cer,
        voiced_frames=int(((synth_f0 > 0) & (ref_f0 > 0)).sum()),
    )
    return metrics, derr, audio


def evaluate(state: TrainState, entries: Sequence[CorpusEntry], out_dir: str | os.PathLike | None = None,
             baseline: TrainState | None = None, noise_scale: float = 0.0, seed: int = 0,
             plots: bool = True) -> EvalReport:
    """Per-clip metrics, CSV + JSON summary, mel comparisons and a duration-error histogram."""
    if not entries:
        raise NoDataError("no evaluation clips")
    report = EvalReport()
    synths = []
    for entry in entries:
        metrics, derr, audio = evaluate_clip(state, entry, noise_scale, seed)
        report.rows.append(metrics)
        if derr is not None:
            report.duration_errors.extend(int(x) for x in derr)
        synths.append(audio)
    baseline_errors = None
    if baseline is not None:
        baseline_errors = []
        for entry in entries:
            _, derr, _ = evaluate_clip(baseline, entry, noise_scale, seed)
            if derr is not None:
                baseline_errors.extend(int(x) for x in derr)
    if out_dir is not None:
        report.write(out_dir)
        if plots:
            _plot_mels(entries, synths, state, Path(out_dir) / "mels")
            if report.duration_errors:
                _plot_duration_hist(report.duration_errors, baseline_errors, state.config.model.note_norm,
                                    baseline, Path(out_dir) / "duration_error_hist.png")
    return report


def _plot_mels(entries, synths, state, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    cfg = state.config.spectrogram
    for entry, audio in zip(entries, synths):
        fig, axes = plt.subplots(1, 2, figsize=(10, 3), sharey=True)
        for ax, clip, title in ((axes[0], entry.audio, "reference"), (axes[1], audio, "synthesized")):
            ax.imshow(mel_spectrogram(clip, cfg).T, origin="lower", aspect="auto")
            ax.set_title(title)
            ax.set_xlabel("frame")
        axes[0].set_ylabel("mel bin")
        fig.suptitle(entry.name)
        fig.tight_layout()
        fig.savefig(out / f"{entry.name or 'clip'}.png", dpi=80)
        plt.close(fig)


def _plot_duration_hist(errors, baseline_errors, note_norm: bool, baseline, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path.parent.mkdir(parents=True, exist_ok=True)
    all_err = list(errors) + list(baseline_errors or [])
    lo, hi = min(all_err) - 0.5, max(all_err) + 1.5
    bins = np.arange(lo, hi, 1.0)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    label = "note-normalized" if note_norm else "raw"
    ax.hist(errors, bins=bins, alpha=0.6, label=label)
    if baseline_errors is not None:
        other = "note-normalized" if baseline.config.model.note_norm else "raw"
        ax.hist(baseline_errors, bins=bins, alpha=0.6, label=f"baseline ({other})")
        ax.legend()
    ax.set_xlabel("predicted - labeled duration (frames)")
    ax.set_ylabel("phonemes")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
