import dataclasses
import math

import numpy as np
import pytest
import torch

from conftest import tiny_run_config
from singvae.errors import CheckpointError, FingerprintError, NonFiniteLossError, ValidationError
from singvae.losses import discriminator_adv_loss, feature_matching_loss, generator_adv_loss
from singvae.model import collate
from singvae.training import (
    LOSS_FIELDS,
    LossReport,
    batch_indices,
    checkpoint_path,
    frozen,
    generator_losses,
    init_state,
    latest_checkpoint,
    load_checkpoint,
    prepare_corpus,
    read_loss_csv,
    save_checkpoint,
    synthesize,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def config():
    return tiny_run_config()


@pytest.fixture(scope="module")
def clips(short_corpus, config):
    return prepare_corpus(short_corpus, config)


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


# Batching -------------------------------------------------------------------------

def test_batch_indices_cover_each_epoch():
    for n, b in [(10, 4), (7, 2), (3, 5)]:
        per_epoch = math.ceil(n / b)
        seen = [i for s in range(per_epoch) for i in batch_indices(n, s, b, 0)]
        assert set(seen) == set(range(n))
        assert batch_indices(n, 3, b, 9) == batch_indices(n, 3, b, 9)


def test_prepare_corpus_rejects_all_short(short_corpus):
    cfg = tiny_run_config(segment_frames=10_000)
    with pytest.raises(ValidationError):
        prepare_corpus(short_corpus, cfg)


# One step --------------------------------------------------------------------------

def test_total_g_assembly(config, clips):
    cfg = dataclasses.replace(config, train=dataclasses.replace(config.train, lambda_dur=0.7, beta_lf0=2.5,
                                                                 recon_weight=3.0))
    state = init_state(cfg, clips)
    _, report = train_step(collate(clips[:2]), state)
    expected = (report.adv_g + report.fm + 3.0 * report.recon + report.kl + report.ctc
                + 0.7 * report.dur + 2.5 * report.lf0)
    assert abs(report.total_g - expected) < 1e-6
    assert all(math.isfinite(getattr(report, k)) for k in LOSS_FIELDS)


def test_loss_report_row():
    r = LossReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, lambda_dur=0.5, beta_lf0=2.0)
    assert r.total_g == 6 + 7 + 1 + 2 + 3 + 0.5 * 4 + 2 * 5
    assert list(r.row(3)) == ["step", *LOSS_FIELDS, "total_g"]


def test_discriminator_step_leaves_generator(config, clips):
    state = init_state(config, clips)
    before_g = _params(state.model)
    # emulate the D half of a step: only the D optimizer may move
    out = state.model(collate(clips[:2]), config.train.segment_frames)
    loss = discriminator_adv_loss(state.discriminator(out.y_ref), state.discriminator(out.y_hat.detach()))
    state.opt_d.zero_grad()
    loss.backward()
    state.opt_d.step()
    assert all(p.grad is None for p in state.model.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before_g, _params(state.model)))


def test_generator_step_leaves_discriminator(config, clips):
    state = init_state(config, clips)
    before_d = _params(state.discriminator)
    before_g = _params(state.model)
    out = state.model(collate(clips[:2]), config.train.segment_frames)
    with frozen(state.discriminator):
        with torch.no_grad():
            d_real = state.discriminator(out.y_ref)
        d_fake = state.discriminator(out.y_hat)
        terms = generator_losses(state, collate(clips[:2]), out)
        total = generator_adv_loss(d_fake) + feature_matching_loss(d_real, d_fake) + sum(terms.values())
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()
    assert all(p.grad is None for p in state.discriminator.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before_d, _params(state.discriminator)))
    assert any(not torch.equal(a, b) for a, b in zip(before_g, _params(state.model)))
    assert all(p.requires_grad for p in state.discriminator.parameters())


def test_full_step_updates_both(config, clips):
    state = init_state(config, clips)
    g0, d0 = _params(state.model), _params(state.discriminator)
    state, _ = train_step(collate(clips[:2]), state)
    assert state.step == 1
    assert any(not torch.equal(a, b) for a, b in zip(g0, _params(state.model)))
    assert any(not torch.equal(a, b) for a, b in zip(d0, _params(state.discriminator)))


def test_non_finite_loss_raises(config, clips, tmp_path):
    state = init_state(config, clips)
    with torch.no_grad():
        state.model.generator.conv_pre.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train(config, clips, steps=3, out_dir=tmp_path, state=state)
    assert info.value.step == 0
    assert (tmp_path / "failed_state.pt").exists()


# Loop, CSV, determinism -------------------------------------------------------------

def test_hundred_steps_hundred_rows(config, clips, tmp_path):
    state, reports = train(config, clips, steps=100, out_dir=tmp_path)
    rows = read_loss_csv(tmp_path / "losses.csv")
    assert len(rows) == len(reports) == 100
    assert [r["step"] for r in rows] == list(range(1, 101))
    assert all(math.isfinite(r[k]) for r in rows for k in LOSS_FIELDS)
    assert latest_checkpoint(tmp_path) == checkpoint_path(tmp_path, 100)


def test_identical_runs_identical_csv(config, clips, tmp_path):
    for name in ("a", "b"):
        train(config, clips, steps=8, out_dir=tmp_path / name)
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def test_different_seed_differs(config, clips, tmp_path):
    other = dataclasses.replace(config, train=dataclasses.replace(config.train, seed=99))
    train(config, clips, steps=4, out_dir=tmp_path / "a")
    train(other, clips, steps=4, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "losses.csv").read_bytes() != (tmp_path / "b" / "losses.csv").read_bytes()


def test_resume_matches_uninterrupted(config, clips, tmp_path):
    k = 5
    train(config, clips, steps=2 * k, out_dir=tmp_path / "full")
    train(config, clips, steps=k, out_dir=tmp_path / "split")
    for p in (tmp_path / "split").glob("checkpoint_*.pt"):
        if p != checkpoint_path(tmp_path / "split", k):
            p.unlink()
    train(config, clips, steps=2 * k, out_dir=tmp_path / "split")
    full = read_loss_csv(tmp_path / "full" / "losses.csv")
    split = read_loss_csv(tmp_path / "split" / "losses.csv")
    assert len(full) == len(split) == 2 * k
    for a, b in zip(full, split):
        for key in LOSS_FIELDS:
            assert abs(a[key] - b[key]) <= 1e-6


def test_ablations_train(clips):
    variants = [
        dict(remove_phoneme_predictor=True),
        dict(remove_phoneme_predictor=True, remove_f0_predictor=True),
        dict(remove_phoneme_predictor=True, remove_f0_predictor=True, remove_frame_prior=True),
        dict(flow_depth=8),
    ]
    counts = set()
    for overrides in variants:
        cfg = tiny_run_config(model_overrides=overrides)
        state, reports = train(cfg, clips, steps=6)  # same frame grid for every variant
        assert all(math.isfinite(getattr(r, k)) for r in reports for k in LOSS_FIELDS)
        counts.add(state.model.parameter_count())
    assert len(counts) == len(variants)


def test_ablation_flag_changes_fingerprint(config):
    cfg = tiny_run_config(model_overrides=dict(remove_phoneme_predictor=True))
    assert cfg.fingerprint() != config.fingerprint()
    seeded = tiny_run_config(seed=5)
    assert seeded.fingerprint() == config.fingerprint()


# Checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip_bytes(config, clips, tmp_path):
    state, _ = train(config, clips, steps=2)
    a = save_checkpoint(state, tmp_path / "a.pt")
    loaded = load_checkpoint(a)
    b = save_checkpoint(loaded, tmp_path / "b.pt")
    assert a.read_bytes() == b.read_bytes()
    assert loaded.step == 2
    for p, q in zip(state.model.parameters(), loaded.model.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_fingerprint_mismatch(config, clips, tmp_path):
    state = init_state(config, clips)
    path = save_checkpoint(state, tmp_path / "c.pt")
    other = tiny_run_config(model_overrides=dict(flow_depth=2))
    with pytest.raises(FingerprintError):
        load_checkpoint(path, expected=other)
    payload = torch.load(path, weights_only=True)
    payload["fingerprint"] = "0" * 64
    torch.save(payload, tmp_path / "tampered.pt")
    with pytest.raises(FingerprintError):
        load_checkpoint(tmp_path / "tampered.pt")


def test_checkpoint_corrupt_and_versionless(config, clips, tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    payload = torch.load(save_checkpoint(init_state(config, clips), tmp_path / "c.pt"), weights_only=True)
    del payload["version"]
    torch.save(payload, tmp_path / "nov.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nov.pt")


# Synthesis --------------------------------------------------------------------------

def test_synthesize_length_and_determinism(config, clips, short_corpus):
    state, _ = train(config, clips, steps=2)
    score = short_corpus[0].score
    audio, d_hat, lf0 = synthesize(score, state, noise_scale=0.0)
    again, _, _ = synthesize(score, state, noise_scale=0.0, seed=7)
    assert len(audio) == int(d_hat.sum()) * config.spectrogram.hop_size
    assert np.array_equal(audio.samples, again.samples)
    assert np.all(d_hat >= 1) and len(d_hat) == len(score.phonemes)
    assert lf0 is not None and len(lf0) == int(d_hat.sum())


def test_synthesize_refuses_untrained(config, clips, short_corpus):
    with pytest.raises(CheckpointError):
        synthesize(short_corpus[0].score, init_state(config, clips))
