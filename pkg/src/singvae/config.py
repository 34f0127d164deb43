"""Configuration dataclasses, presets, YAML loading and fingerprinting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class SpectrogramConfig:
    """STFT / mel / F0 front-end parameters.

    ``hop_size`` defines the frame grid shared by durations, spectrograms,
    F0 contours and latents. ``f0_min``/``f0_max`` bound the pitch search and
    are independent of the mel band edges ``fmin``/``fmax``.
    """

    sample_rate: int = 24000
    fft_size: int = 1024
    hop_size: int = 256
    win_size: int = 1024
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    f0_min: float = 80.0
    f0_max: float = 1000.0

    def __post_init__(self):
        if self.fmax is None:
            self.fmax = self.sample_rate / 2
        self.validate()

    def validate(self) -> None:
        if not (0 < self.hop_size <= self.win_size <= self.fft_size):
            raise ConfigError(
                f"need 0 < hop_size <= win_size <= fft_size, got "
                f"{self.hop_size}, {self.win_size}, {self.fft_size}"
            )
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigError(f"need fmin < fmax <= sr/2, got {self.fmin}, {self.fmax}")
        if not (0 < self.f0_min < self.f0_max <= self.sample_rate / 2):
            raise ConfigError(f"bad F0 search range [{self.f0_min}, {self.f0_max}]")
        if self.mel_bins < 1:
            raise ConfigError("mel_bins must be positive")

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class CorpusConfig:
    """Synthetic singing corpus generator settings."""

    songs: int = 10
    phoneme_count: int = 16
    pitch_set: list[int] = field(default_factory=lambda: [57, 60, 62, 64, 67, 69, 72, 74, 76, 79, 81])
    note_dur_range: tuple[int, int] = (12, 40)
    notes_per_song: tuple[int, int] = (4, 8)
    phonemes_per_note: tuple[int, int] = (1, 3)
    rest_prob: float = 0.1
    sample_rate: int = 16000
    hop_size: int = 128
    seed: int = 0

    def __post_init__(self):
        self.pitch_set = [int(p) for p in self.pitch_set]
        self.note_dur_range = tuple(int(v) for v in self.note_dur_range)
        self.notes_per_song = tuple(int(v) for v in self.notes_per_song)
        self.phonemes_per_note = tuple(int(v) for v in self.phonemes_per_note)
        self.validate()

    def validate(self) -> None:
        if self.phoneme_count < 1:
            raise ConfigError("phoneme inventory is empty")
        if not self.pitch_set:
            raise ConfigError("pitch range is empty")
        if any(not 1 <= p <= 127 for p in self.pitch_set):
            raise ConfigError("pitch_set entries must be MIDI numbers in [1, 127]")
        lo, hi = self.note_dur_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad note_dur_range {self.note_dur_range}")
        plo, phi = self.phonemes_per_note
        if plo < 1 or phi < plo:
            raise ConfigError(f"bad phonemes_per_note {self.phonemes_per_note}")
        if lo < phi:
            raise ConfigError("shortest note must fit the largest phoneme count")
        nlo, nhi = self.notes_per_song
        if nlo < 1 or nhi < nlo:
            raise ConfigError(f"bad notes_per_song {self.notes_per_song}")
        if not 0.0 <= self.rest_prob < 1.0:
            raise ConfigError("rest_prob must be in [0, 1)")
        if self.songs < 0 or self.sample_rate <= 0 or self.hop_size <= 0:
            raise ConfigError("songs, sample_rate and hop_size must be positive")


@dataclass
class ModelConfig:
    """Architecture sizes and ablation switches."""

    phoneme_count: int = 16
    phoneme_emb: int = 256
    pitch_emb: int = 128
    dur_emb: int = 128
    dur_buckets: int = 64
    max_note_frames: int = 1000
    hidden: int = 192
    heads: int = 2
    ffn_filter: int = 768
    ffn_kernel: int = 3
    dropout: float = 0.1
    text_encoder_blocks: int = 6
    f0_predictor_blocks: int = 6
    frame_prior_blocks: int = 4
    frame_prior_type: str = "fft"
    phoneme_predictor_blocks: int = 2
    duration_layers: int = 3
    duration_filter: int = 256
    duration_kernel: int = 3
    note_norm: bool = True
    latent_dim: int = 192
    posterior_hidden: int = 192
    posterior_layers: int = 16
    posterior_kernel: int = 5
    flow_depth: int = 4
    flow_hidden: int = 192
    flow_layers: int = 4
    flow_kernel: int = 5
    upsample_initial_channels: int = 512
    upsample_rates: tuple[int, ...] = (8, 8, 2, 2)
    upsample_kernels: tuple[int, ...] = (16, 16, 4, 4)
    resblock_kernels: tuple[int, ...] = (3, 7, 11)
    resblock_dilations: tuple[tuple[int, ...], ...] = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    mpd_periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    mpd_channels: tuple[int, ...] = (32, 128, 512, 1024)
    msd_scales: int = 3
    msd_channels: tuple[int, ...] = (16, 64, 256, 1024, 1024)
    remove_phoneme_predictor: bool = False
    remove_f0_predictor: bool = False
    remove_frame_prior: bool = False
    harmonic_source: bool = False
    source_harmonics: int = 8

    def __post_init__(self):
        for name in ("upsample_rates", "upsample_kernels", "resblock_kernels",
                     "mpd_periods", "mpd_channels", "msd_channels"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.resblock_dilations = tuple(tuple(int(v) for v in d) for d in self.resblock_dilations)
        self.validate()

    def validate(self) -> None:
        if self.latent_dim % 2:
            raise ConfigError(f"latent_dim must be even for channel-split coupling, got {self.latent_dim}")
        if self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if self.flow_depth < 0:
            raise ConfigError("flow_depth must be non-negative")
        if self.frame_prior_type not in ("fft", "conv"):
            raise ConfigError(f"unknown frame_prior_type {self.frame_prior_type!r}")
        if len(self.upsample_rates) != len(self.upsample_kernels):
            raise ConfigError("upsample_rates and upsample_kernels differ in length")
        if len(self.resblock_kernels) != len(self.resblock_dilations):
            raise ConfigError("resblock_kernels and resblock_dilations differ in length")
        for r, k in zip(self.upsample_rates, self.upsample_kernels):
            if r % 2 or k != 2 * r:
                raise ConfigError("each upsample rate must be even with kernel = 2 x rate")
        if self.source_harmonics < 1:
            raise ConfigError("source_harmonics must be at least 1")
        if self.remove_frame_prior and not self.remove_f0_predictor:
            raise ConfigError(
                "remove_frame_prior requires remove_f0_predictor "
                "(ablations are cumulative: the F0 predictor only guides the frame prior)"
            )

    @property
    def uses_harmonic_source(self) -> bool:
        """The source is driven by predicted LF0, so it leaves with the F0 predictor."""
        return self.harmonic_source and not self.remove_f0_predictor

    @property
    def inventory_size(self) -> int:
        """Phoneme IDs in use: silence (0) plus the sung symbols."""
        return self.phoneme_count + 1

    @property
    def hop(self) -> int:
        return math.prod(self.upsample_rates)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 4
    segment_frames: int = 32
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    eps: float = 1e-9
    lr_decay: float = 0.999
    lambda_dur: float = 1.0
    beta_lf0: float = 1.0
    recon_weight: float = 1.0
    kl_weight: float = 1.0
    ctc_weight: float = 1.0
    grad_clip: float | None = None
    checkpoint_every: int = 500
    segment_seconds: float = 5.0
    seed: int = 1234

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.steps < 0 or self.batch_size < 1 or self.segment_frames < 1:
            raise ConfigError("steps, batch_size and segment_frames must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class RunConfig:
    """Everything one training run needs."""

    data: str | None = None
    out_dir: str = "runs/default"
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.model.hop != self.spectrogram.hop_size:
            raise ConfigError(
                f"upsample rates multiply to {self.model.hop}, "
                f"but hop_size is {self.spectrogram.hop_size}"
            )

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        """Hash of everything that determines parameter shapes and the frame grid."""
        arch = {"spectrogram": self.to_dict()["spectrogram"], "model": self.to_dict()["model"]}
        blob = json.dumps(arch, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict[str, Any] | None):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def run_config_from_dict(data: dict[str, Any]) -> RunConfig:
    data = dict(data)
    sections = {
        "spectrogram": SpectrogramConfig,
        "model": ModelConfig,
        "train": TrainConfig,
    }
    kwargs = {}
    for key, cls in sections.items():
        if key in data:
            kwargs[key] = _build(cls, data.pop(key))
    unknown = set(data) - {"data", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    return RunConfig(**data, **kwargs)


def load_yaml(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def load_run_config(path: str | Path) -> RunConfig:
    cfg = run_config_from_dict(load_yaml(path))
    base = Path(path).parent
    if cfg.data is not None and not Path(cfg.data).is_absolute():
        cfg.data = str(base / cfg.data)
    if not Path(cfg.out_dir).is_absolute():
        cfg.out_dir = str(base / cfg.out_dir)
    return cfg


def load_corpus_config(path: str | Path) -> CorpusConfig:
    return _build(CorpusConfig, load_yaml(path))


def save_yaml(data: dict[str, Any], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(_jsonable(data), fh, sort_keys=False)


# Presets ---------------------------------------------------------------------

def desk_spectrogram() -> SpectrogramConfig:
    return SpectrogramConfig(sample_rate=16000, fft_size=512, hop_size=128, win_size=512, mel_bins=40)


def desk_model(**overrides) -> ModelConfig:
    """Reduced-width model on the 16 kHz / hop 128 grid (block counts kept)."""
    base = dict(
        phoneme_emb=64,
        pitch_emb=32,
        dur_emb=32,
        hidden=64,
        heads=2,
        ffn_filter=128,
        dropout=0.0,
        duration_filter=64,
        latent_dim=64,
        posterior_hidden=64,
        posterior_layers=8,
        flow_hidden=64,
        flow_layers=2,
        upsample_initial_channels=128,
        upsample_rates=(8, 4, 2, 2),
        upsample_kernels=(16, 8, 4, 4),
        resblock_kernels=(3, 7),
        resblock_dilations=((1, 3, 5), (1, 3, 5)),
        mpd_channels=(8, 16, 32, 32),
        msd_channels=(8, 16, 32, 32, 32),
        harmonic_source=True,
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_run_config(**train_overrides) -> RunConfig:
    train = dict(
        batch_size=4,
        learning_rate=5e-4,
        recon_weight=45.0,
        checkpoint_every=500,
    )
    train.update(train_overrides)
    return RunConfig(spectrogram=desk_spectrogram(), model=desk_model(), train=TrainConfig(**train))
