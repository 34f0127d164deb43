"""Singing voice synthesis from musical scores with a conditional VAE,
normalizing-flow prior and adversarially trained waveform decoder."""

from .config import CorpusConfig, ModelConfig, RunConfig, SpectrogramConfig, TrainConfig
from .errors import (
    CheckpointError,
    ConfigError,
    FingerprintError,
    NoDataError,
    NonFiniteLossError,
    ParseError,
    SingVAEError,
    ValidationError,
)
from .score import AudioClip, CorpusEntry, MusicScore

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "CheckpointError",
    "ConfigError",
    "CorpusConfig",
    "CorpusEntry",
    "FingerprintError",
    "ModelConfig",
    "MusicScore",
    "NoDataError",
    "NonFiniteLossError",
    "ParseError",
    "RunConfig",
    "SingVAEError",
    "SpectrogramConfig",
    "TrainConfig",
    "ValidationError",
]
