"""Alternating discriminator / generator optimisation, checkpoints and synthesis."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .config import RunConfig, TrainConfig, run_config_from_dict
from .errors import CheckpointError, FingerprintError, NonFiniteLossError, ValidationError
from .losses import (
    ctc_objective,
    discriminator_adv_loss,
    feature_matching_loss,
    generator_adv_loss,
    kl_loss,
    recon_loss,
)
from .model import Batch, PreparedClip, SynthesizerModel, collate, prepare_entry, score_tensors
from .posterior import Discriminator
from .prior import duration_loss, lf0_loss
from .score import AudioClip, CorpusEntry, MusicScore

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "singvae-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_FIELDS = ("recon", "kl", "ctc", "dur", "lf0", "adv_g", "fm", "adv_d")


@dataclass
class LossReport:
    recon: float
    kl: float
    ctc: float
    dur: float
    lf0: float
    adv_g: float
    fm: float
    adv_d: float
    lambda_dur: float = 1.0
    beta_lf0: float = 1.0
    recon_weight: float = 1.0
    kl_weight: float = 1.0
    ctc_weight: float = 1.0

    @property
    def cvae(self) -> float:
        return self.recon_weight * self.recon + self.kl_weight * self.kl + self.ctc_weight * self.ctc

    @property
    def total_g(self) -> float:
        """Generator objective: adv + fm + cvae + lambda * dur + beta * lf0."""
        return self.adv_g + self.fm + self.cvae + self.lambda_dur * self.dur + self.beta_lf0 * self.lf0

    @property
    def total_d(self) -> float:
        return self.adv_d

    def row(self, step: int) -> dict:
        return {"step": step, **{k: getattr(self, k) for k in LOSS_FIELDS}, "total_g": self.total_g}


@dataclass
class TrainState:
    config: RunConfig
    model: SynthesizerModel
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


def build_state(config: RunConfig) -> TrainState:
    torch.manual_seed(config.train.seed)
    model = SynthesizerModel(config.model, config.spectrogram)
    disc = Discriminator(config.model)
    tc = config.train
    opt_g = torch.optim.AdamW(model.parameters(), tc.learning_rate, betas=tc.betas, eps=tc.eps, weight_decay=0.0)
    opt_d = torch.optim.AdamW(disc.parameters(), tc.learning_rate, betas=tc.betas, eps=tc.eps, weight_decay=0.0)
    return TrainState(config, model, disc, opt_g, opt_d, 0)


def init_state(config: RunConfig, clips: Sequence[PreparedClip]) -> TrainState:
    """Fresh state with the F0 / duration heads centred on ``clips``."""
    state = build_state(config)
    lf0_mean = float(np.mean(np.concatenate([c.lf0 for c in clips])))
    if config.model.note_norm:
        dur_mean = float(np.mean(np.concatenate([c.phn_dur / c.note_dur for c in clips])))
    else:
        dur_mean = float(np.mean(np.concatenate([c.phn_dur for c in clips])))
    state.model.set_data_offsets(lf0_mean, dur_mean)
    return state


def batch_indices(n_clips: int, step: int, batch_size: int, seed: int) -> list[int]:
    """Deterministic epoch-shuffled batch for a 0-based ``step``."""
    per_epoch = max(1, math.ceil(n_clips / batch_size))
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_clips)
    idx = [int(perm[(pos * batch_size + k) % n_clips]) for k in range(batch_size)]
    return idx


def epoch_of(step: int, n_clips: int, batch_size: int) -> int:
    return step // max(1, math.ceil(n_clips / batch_size))


@contextlib.contextmanager
def frozen(module: nn.Module) -> Iterator[None]:
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _check_finite(terms: dict, step: int) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, step, v)


def _clip(params, max_norm):
    if max_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def generator_losses(state: TrainState, batch: Batch, out) -> dict[str, torch.Tensor]:
    """Every term of the generator-side objective except the adversarial ones."""
    model = state.model
    spec_cfg = state.config.spectrogram
    zero = out.y_hat.new_zeros(())
    terms = {"recon": recon_loss(out.y_ref, out.y_hat, spec_cfg)}
    post = out.posterior
    terms["kl"] = kl_loss(post.mu, post.log_sigma, post.z, out.mu_p, out.log_sigma_p, model.flow, out.frame_mask)
    if out.ctc_logits is not None:
        terms["ctc"] = ctc_objective(out.ctc_logits, batch.phonemes, batch.frame_lengths, batch.ph_lengths,
                                     reduction="mean")
    else:
        terms["ctc"] = zero
    note_dur = batch.note_dur if model.cfg.note_norm else torch.ones_like(batch.note_dur)
    terms["dur"] = duration_loss(out.dur_pred, note_dur, batch.phn_dur, out.ph_mask)
    terms["lf0"] = zero if out.lf0_pred is None else lf0_loss(out.lf0_pred, batch.lf0, out.frame_mask)
    return terms


def train_step(batch: Batch, state: TrainState) -> tuple[TrainState, LossReport]:
    """One discriminator update followed by one generator update."""
    tc: TrainConfig = state.config.train
    torch.manual_seed(step_seed(tc.seed, state.step))
    gen = torch.Generator().manual_seed(step_seed(tc.seed + 1, state.step))
    model, disc = state.model, state.discriminator
    model.train()
    disc.train()

    out = model(batch, tc.segment_frames, generator=gen)

    d_real = disc(out.y_ref)
    d_fake = disc(out.y_hat.detach())
    loss_d = discriminator_adv_loss(d_real, d_fake)
    _check_finite({"adv_d": loss_d}, state.step)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    _clip(disc.parameters(), tc.grad_clip)
    state.opt_d.step()

    with frozen(disc):
        with torch.no_grad():
            d_real = disc(out.y_ref)
        d_fake = disc(out.y_hat)
        terms = generator_losses(state, batch, out)
        terms["adv_g"] = generator_adv_loss(d_fake)
        terms["fm"] = feature_matching_loss(d_real, d_fake)
    _check_finite(terms, state.step)
    total = (terms["adv_g"] + terms["fm"]
             + tc.recon_weight * terms["recon"] + tc.kl_weight * terms["kl"] + tc.ctc_weight * terms["ctc"]
             + tc.lambda_dur * terms["dur"] + tc.beta_lf0 * terms["lf0"])
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _clip(model.parameters(), tc.grad_clip)
    state.opt_g.step()
    state.step += 1

    report = LossReport(
        **{k: float(v.detach()) for k, v in terms.items()},
        adv_d=float(loss_d.detach()),
        lambda_dur=tc.lambda_dur,
        beta_lf0=tc.beta_lf0,
        recon_weight=tc.recon_weight,
        kl_weight=tc.kl_weight,
        ctc_weight=tc.ctc_weight,
    )
    return state, report


def set_learning_rate(state: TrainState, n_clips: int) -> float:
    tc = state.config.train
    lr = tc.learning_rate * tc.lr_decay ** epoch_of(state.step, n_clips, tc.batch_size)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr
    return lr


def prepare_corpus(entries: Sequence[CorpusEntry], config: RunConfig) -> list[PreparedClip]:
    """Segment long entries and convert them to training clips."""
    from .score import split_segments

    clips = []
    hop = config.spectrogram.hop_size
    for entry in entries:
        entry.score.check_inventory(config.model.inventory_size)
        for seg in split_segments(entry, config.train.segment_seconds, hop):
            if seg.score.total_frames < config.train.segment_frames:
                log.warning("skipping %s: %d frames is shorter than one training slice",
                            seg.name, seg.score.total_frames)
                continue
            clips.append(prepare_entry(seg, config.spectrogram))
    if not clips:
        raise ValidationError("no usable training clips")
    return clips


# Checkpoints --------------------------------------------------------------------

def _canonical(obj):
    """Fresh tensors and interned strings so equal states pickle to equal bytes."""
    if torch.is_tensor(obj):
        return obj.detach().clone(memory_format=torch.contiguous_format)
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def _state_payload(state: TrainState) -> dict:
    return _canonical({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": state.config.fingerprint(),
        "config": state.config.to_dict(),
        "step": state.step,
        "model": state.model.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
    })


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # serialise in memory so the archive's internal record name does not depend on the path
    buf = io.BytesIO()
    torch.save(_state_payload(state), buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, expected: RunConfig | None = None) -> TrainState:
    """Restore a :class:`TrainState`.

    Refuses files whose stored fingerprint does not match their own config,
    or (when ``expected`` is given) the expected architecture.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for damaged archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if "version" not in payload:
        raise CheckpointError(f"{path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload['version']}")
    config = run_config_from_dict(payload["config"])
    if config.fingerprint() != payload["fingerprint"]:
        raise FingerprintError(f"{path}: stored fingerprint does not match its config")
    if expected is not None and expected.fingerprint() != payload["fingerprint"]:
        raise FingerprintError(
            f"{path}: architecture fingerprint {payload['fingerprint'][:12]} differs from "
            f"expected {expected.fingerprint()[:12]}"
        )
    if expected is not None:
        # keep caller's paths and training settings; architecture is identical
        config = dataclasses.replace(expected)
    state = build_state(config)
    try:
        state.model.load_state_dict(payload["model"])
        state.discriminator.load_state_dict(payload["discriminator"])
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not fit the stored config: {exc}") from exc
    state.step = int(payload["step"])
    return state


def checkpoint_path(out_dir: str | os.PathLike, step: int) -> Path:
    return Path(out_dir) / f"checkpoint_{step:07d}.pt"


def latest_checkpoint(out_dir: str | os.PathLike) -> Path | None:
    found = sorted(Path(out_dir).glob("checkpoint_*.pt"))
    return found[-1] if found else None


# Loop --------------------------------------------------------------------------

def _truncate_csv(path: Path, step: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    keep = [r for r in rows if int(r["step"]) <= step]
    _write_rows(path, keep, mode="w")


def _write_rows(path: Path, rows, mode="a") -> None:
    fields = ["step", *LOSS_FIELDS, "total_g"]
    new = mode == "w" or not path.exists()
    with open(path, mode if not new else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if new:
            writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(config: RunConfig, clips: Sequence[PreparedClip], steps: int | None = None,
          out_dir: str | os.PathLike | None = None, resume: bool = True,
          state: TrainState | None = None, callback=None) -> tuple[TrainState, list[LossReport]]:
    """Run the training loop up to ``steps`` total steps.

    With ``out_dir`` the loop resumes from the newest checkpoint there, writes
    ``losses.csv`` (one row per step) and checkpoints every
    ``checkpoint_every`` steps and at the end.
    """
    tc = config.train
    steps = tc.steps if steps is None else steps
    out = Path(out_dir) if out_dir is not None else None
    csv_path = None
    if state is None and out is not None and resume:
        latest = latest_checkpoint(out)
        if latest is not None:
            state = load_checkpoint(latest, expected=config)
            log.info("resuming from %s at step %d", latest, state.step)
    if state is None:
        state = init_state(config, clips)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "losses.csv"
        if state.step == 0 and csv_path.exists():
            csv_path.unlink()
        _truncate_csv(csv_path, state.step)

    reports = []
    while state.step < steps:
        set_learning_rate(state, len(clips))
        idx = batch_indices(len(clips), state.step, tc.batch_size, tc.seed)
        batch = collate([clips[i] for i in idx])
        try:
            state, report = train_step(batch, state)
        except NonFiniteLossError:
            if out is not None:
                save_checkpoint(state, out / "failed_state.pt")
            raise
        reports.append(report)
        if csv_path is not None:
            _write_rows(csv_path, [report.row(state.step)])
        if callback is not None:
            callback(state, report)
        if out is not None and (state.step % tc.checkpoint_every == 0 or state.step == steps):
            save_checkpoint(state, checkpoint_path(out, state.step))
    return state, reports


def read_loss_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


# Synthesis ---------------------------------------------------------------------

def synthesize(score: MusicScore, state: TrainState, noise_scale: float = 0.667, seed: int = 0,
               allow_untrained: bool = False) -> tuple[AudioClip, np.ndarray, np.ndarray | None]:
    """Render a score with predicted durations and F0.

    Returns ``(audio, d_hat, predicted_lf0)``; the audio has exactly
    ``sum(d_hat) * hop`` samples.
    """
    if state.step == 0 and not allow_untrained:
        raise CheckpointError("refusing to synthesise from an untrained state")
    score.check_inventory(state.config.model.inventory_size)
    state.model.eval()
    gen = torch.Generator().manual_seed(seed)
    ph, pitch, ndur = score_tensors(score)
    syn = state.model.infer(ph, pitch, ndur, noise_scale=noise_scale, generator=gen)
    audio = syn.audio[0].detach().to(torch.float64).numpy()
    audio = np.clip(audio, -1.0, 1.0)
    lf0 = None if syn.lf0 is None else syn.lf0[0].detach().to(torch.float64).numpy()
    return AudioClip(audio, state.config.spectrogram.sample_rate), syn.durations[0].numpy(), lf0
