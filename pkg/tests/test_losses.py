import math

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from conftest import tiny_model
from helpers import brute_force_ctc, closed_form_kl, randomize_
from singvae.config import desk_spectrogram
from singvae.dsp import mel_spectrogram
from singvae.errors import ValidationError
from singvae.losses import (
    adv_losses,
    ctc_min_frames,
    ctc_objective,
    feature_matching_loss,
    kl_loss,
    recon_loss,
)
from singvae.posterior import Discriminator, DiscriminatorOutput
from singvae.prior import Flow

SPEC = desk_spectrogram()


# Reconstruction -----------------------------------------------------------------

def test_recon_identical_and_silence(rng):
    y = torch.from_numpy(rng.uniform(-0.5, 0.5, (1, 2048)))
    assert float(recon_loss(y, y, SPEC)) == 0.0
    z = torch.zeros(1, 2048)
    assert float(recon_loss(z, z, SPEC)) == 0.0


def test_recon_matches_elementwise(rng):
    a = rng.uniform(-0.5, 0.5, 3000)
    b = rng.uniform(-0.5, 0.5, 3000)
    expected = np.mean(np.abs(mel_spectrogram(a, SPEC) - mel_spectrogram(b, SPEC)))
    assert float(recon_loss(torch.from_numpy(a), torch.from_numpy(b), SPEC)) == pytest.approx(expected, abs=1e-6)


def test_recon_length_mismatch():
    with pytest.raises(ValidationError):
        recon_loss(torch.zeros(1, 2048), torch.zeros(1, 2176), SPEC)


# KL ------------------------------------------------------------------------------

def test_kl_matched_zero_noise():
    mu = torch.randn(1, 6, 4)
    ls = torch.randn(1, 6, 4) * 0.2
    assert float(kl_loss(mu, ls, mu, mu, ls)) == pytest.approx(0.0, abs=1e-6)


def test_kl_monte_carlo_matches_closed_form():
    gen = torch.Generator().manual_seed(0)
    d = 4
    mu_q, ls_q = torch.randn(1, 1, d, generator=gen), torch.randn(1, 1, d, generator=gen) * 0.3
    mu_p, ls_p = torch.randn(1, 1, d, generator=gen), torch.randn(1, 1, d, generator=gen) * 0.3
    n = 10_000
    eps = torch.randn(n, 1, d, generator=gen, dtype=torch.float64)
    q = [t.double().expand(n, 1, d) for t in (mu_q, ls_q, mu_p, ls_p)]
    z = q[0] + torch.exp(q[1]) * eps
    # per-draw estimates: kl_loss averages over (frames, dims), so call once per draw
    per = torch.stack([kl_loss(q[0][i:i + 1], q[1][i:i + 1], z[i:i + 1], q[2][i:i + 1], q[3][i:i + 1])
                       for i in range(0, n, 10)])
    closed = closed_form_kl(mu_q.numpy(), np.exp(ls_q.numpy()), mu_p.numpy(), np.exp(ls_p.numpy())).mean()
    se = float(per.std()) / math.sqrt(len(per))
    assert abs(float(per.mean()) - closed) < 3 * se


def test_kl_with_flow_uses_logdet():
    flow = randomize_(Flow(4, 8, 3, 1, 2), 0.2).double()
    z = torch.randn(1, 5, 4, dtype=torch.float64)
    mu_q, ls_q = torch.zeros_like(z), torch.zeros_like(z)
    mu_p, ls_p = torch.zeros_like(z), torch.zeros_like(z)
    fz, logdet = flow(z)
    log_q = -0.5 * math.log(2 * math.pi) - 0.5 * z ** 2
    log_p = -0.5 * math.log(2 * math.pi) - 0.5 * fz ** 2
    expected = ((log_q - log_p).sum() - logdet.sum()) / z.numel()
    torch.testing.assert_close(kl_loss(mu_q, ls_q, z, mu_p, ls_p, flow), expected)


def test_kl_shape_mismatch():
    a = torch.zeros(1, 5, 4)
    with pytest.raises(ValidationError):
        kl_loss(a, a, a, torch.zeros(1, 6, 4), torch.zeros(1, 6, 4))


# Adversarial / feature matching ---------------------------------------------------------

def _fake_output(rng, shapes, n_feats=3):
    scores = [torch.from_numpy(rng.normal(size=s)) for s in shapes]
    feats = [[torch.from_numpy(rng.normal(size=(2, 3))) for _ in range(n_feats)] for _ in shapes]
    return DiscriminatorOutput(scores, feats)


def test_adv_examples(rng):
    shapes = [(2, 5), (2, 7)]
    real = _fake_output(rng, shapes)
    ones = DiscriminatorOutput([torch.ones(s) for s in shapes], real.features)
    zeros = DiscriminatorOutput([torch.zeros(s) for s in shapes], real.features)
    assert float(adv_losses(real, ones)[0]) == 0.0
    assert float(adv_losses(ones, zeros)[1]) == 0.0
    fake = _fake_output(rng, shapes)
    g, d = adv_losses(real, fake)
    eg = sum(np.mean((1 - f.numpy()) ** 2) for f in fake.scores)
    ed = sum(np.mean((1 - r.numpy()) ** 2) + np.mean(f.numpy() ** 2) for r, f in zip(real.scores, fake.scores))
    assert float(g) == pytest.approx(eg, abs=1e-6)
    assert float(d) == pytest.approx(ed, abs=1e-6)


def test_feature_matching_examples(rng):
    real = _fake_output(rng, [(2, 5), (2, 7)])
    assert float(feature_matching_loss(real, real)) == 0.0
    shifted = DiscriminatorOutput(real.scores, [[f + 1 for f in fs] for fs in real.features])
    assert float(feature_matching_loss(real, shifted)) == pytest.approx(6.0)
    fake = _fake_output(rng, [(2, 5), (2, 7)])
    expected = sum(np.mean(np.abs(a.numpy() - b.numpy()))
                   for fa, fb in zip(real.features, fake.features) for a, b in zip(fa, fb))
    assert float(feature_matching_loss(real, fake)) == pytest.approx(expected, abs=1e-6)


def test_structure_mismatch(rng):
    a = _fake_output(rng, [(2, 5), (2, 7)])
    b = _fake_output(rng, [(2, 5)])
    with pytest.raises(ValidationError):
        adv_losses(a, b)
    c = _fake_output(rng, [(2, 5), (2, 7)], n_feats=2)
    with pytest.raises(ValidationError):
        feature_matching_loss(a, c)


def test_feature_matching_no_discriminator_gradient():
    d = Discriminator(tiny_model())
    y_real, y_fake = torch.rand(1, 2048), torch.rand(1, 2048, requires_grad=True)
    feature_matching_loss(d(y_real), d(y_fake)).backward()
    # real features are constants; only the fake path reaches D, and frozen D gets nothing
    assert y_fake.grad is not None and float(y_fake.grad.abs().sum()) > 0
    for p in d.parameters():
        p.grad = None
        p.requires_grad_(False)
    y_fake.grad = None
    feature_matching_loss(d(y_real), d(y_fake)).backward()
    assert all(p.grad is None for p in d.parameters())


# CTC ------------------------------------------------------------------------------------

def test_ctc_single_frame_peaked():
    logits = torch.tensor([[5.0, 0.0]])  # class 0 symbol, class 1 blank
    expected = -F.log_softmax(logits, -1)[0, 0]
    assert float(ctc_objective(logits, [0])) == pytest.approx(float(expected), rel=1e-6)


def test_ctc_empty_target_blank_peaked():
    logits = torch.full((6, 4), -20.0)
    logits[:, -1] = 20.0
    assert float(ctc_objective(logits, [])) < 1e-6


def test_ctc_uniform_matches_brute_force():
    logits = torch.zeros(4, 3)
    lp = F.log_softmax(logits, -1).double().numpy()
    assert float(ctc_objective(logits, [0, 1])) == pytest.approx(brute_force_ctc(lp, [0, 1], 2), abs=1e-5)


def test_ctc_random_small_cases(rng):
    for _ in range(20):
        logits = torch.from_numpy(rng.normal(size=(4, 3)))
        target = [int(x) for x in rng.integers(0, 2, 2)]
        lp = F.log_softmax(logits, -1).numpy()
        assert float(ctc_objective(logits, target)) == pytest.approx(brute_force_ctc(lp, target, 2), abs=1e-5)


def test_ctc_infeasible_target():
    assert ctc_min_frames([1, 1, 2]) == 4
    with pytest.raises(ValidationError):
        ctc_objective(torch.zeros(3, 4), [1, 1, 2])
    with pytest.raises(ValidationError):
        ctc_objective(torch.zeros(5, 4), [3])  # symbol 3 is the blank


def test_ctc_batch_reductions(rng):
    logits = torch.from_numpy(rng.normal(size=(2, 6, 4)))
    targets = torch.tensor([[0, 1, 2], [2, 0, 0]])
    lens_in, lens_tg = torch.tensor([6, 4]), torch.tensor([3, 1])
    per = ctc_objective(logits, targets, lens_in, lens_tg, reduction="none")
    single = [ctc_objective(logits[0], [0, 1, 2]), ctc_objective(logits[1, :4], [2])]
    torch.testing.assert_close(per, torch.stack(single))
    torch.testing.assert_close(ctc_objective(logits, targets, lens_in, lens_tg, reduction="mean"),
                               (per / lens_tg).mean())
