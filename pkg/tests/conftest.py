import numpy as np
import pytest
import torch

from singvae.config import CorpusConfig, RunConfig, TrainConfig, desk_model, desk_spectrogram
from singvae.score import generate_synthetic_corpus

torch.set_num_threads(1)


def tiny_model(**overrides):
    """Narrow model on the desk grid; fast enough for unit tests."""
    base = dict(
        phoneme_emb=8, pitch_emb=8, dur_emb=8, hidden=16, heads=2, ffn_filter=16,
        text_encoder_blocks=1, f0_predictor_blocks=1, frame_prior_blocks=1, phoneme_predictor_blocks=1,
        duration_filter=16, latent_dim=8, posterior_hidden=16, posterior_layers=2,
        flow_hidden=8, flow_layers=1, upsample_initial_channels=16,
        resblock_kernels=(3,), resblock_dilations=((1, 3),),
        mpd_periods=(2, 3), mpd_channels=(4, 8), msd_scales=2, msd_channels=(4, 8, 8),
    )
    base.update(overrides)
    return desk_model(**base)


def tiny_run_config(model_overrides=None, **train):
    defaults = dict(batch_size=2, segment_frames=8, learning_rate=5e-4, checkpoint_every=5, steps=10)
    defaults.update(train)
    return RunConfig(spectrogram=desk_spectrogram(), model=tiny_model(**(model_overrides or {})),
                     train=TrainConfig(**defaults))


@pytest.fixture(scope="session")
def corpus10():
    return generate_synthetic_corpus(CorpusConfig(songs=10, seed=3))


@pytest.fixture(scope="session")
def short_corpus():
    """Four short songs for training-loop tests."""
    return generate_synthetic_corpus(CorpusConfig(songs=4, notes_per_song=(2, 3), seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    """Log one criterion outcome; the lines are repeated in the terminal summary."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
