"""Independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch


def randomize_(module: torch.nn.Module, scale: float = 0.3, seed: int = 0) -> torch.nn.Module:
    """Overwrite every parameter (zero-initialised heads included) with N(0, scale^2)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def dense_logdet(fn, x: torch.Tensor) -> float:
    """log|det J| of ``fn`` at ``x`` from the numerically assembled Jacobian."""
    flat = x.reshape(-1)
    jac = torch.autograd.functional.jacobian(lambda v: fn(v.reshape(x.shape)).reshape(-1), flat)
    sign, logabs = torch.linalg.slogdet(jac)
    assert sign != 0
    return float(logabs)


def finite_difference_check(loss_fn, params, n_coords: int = 20, eps: float = 1e-6, seed: int = 0,
                            rtol: float = 1e-3, atol: float = 1e-9):
    """Compare backprop with central differences on random parameter coordinates.

    Returns a list of ``(name, index, backprop, numeric, ok)``.
    """
    named = [(n, p) for n, p in params if p.requires_grad]
    for _, p in named:
        p.grad = None
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() for n, p in named}
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_coords):
        name, p = named[int(rng.integers(len(named)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss_fn().item()
            p[idx] = orig - eps
            down = loss_fn().item()
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[name][idx].item()
        ok = abs(numeric - analytic) <= rtol * max(abs(numeric), abs(analytic)) + atol
        out.append((name, idx, analytic, numeric, ok))
    return out


def brute_force_ctc(log_probs: np.ndarray, target, blank: int) -> float:
    """-log sum over every frame labelling that collapses to ``target``."""
    t, c = log_probs.shape
    total = -math.inf
    target = list(target)
    for path in itertools.product(range(c), repeat=t):
        collapsed, prev = [], None
        for s in path:
            if s != prev and s != blank:
                collapsed.append(s)
            prev = s
        if collapsed == target:
            total = np.logaddexp(total, sum(log_probs[i, s] for i, s in enumerate(path)))
    return -total


def loop_length_regulator(h, dur):
    out = []
    for i in range(len(dur)):
        for _ in range(int(dur[i])):
            out.append(h[i])
    return out


def loop_expand(notes):
    pitch, dur = [], []
    for p, d, count in notes:
        for _ in range(count):
            pitch.append(p)
            dur.append(d)
    return tuple(pitch), tuple(dur)


def loop_predicted_duration(r: float, dn: int) -> int:
    x = max(r, 0.0) * dn
    k = int(math.floor(x))
    if x - k >= 0.5:
        k += 1
    return max(1, k)


def closed_form_kl(mu_q, s_q, mu_p, s_p):
    """KL(N(mu_q, s_q^2) || N(mu_p, s_p^2)) per element."""
    return np.log(s_p / s_q) + (s_q ** 2 + (mu_q - mu_p) ** 2) / (2 * s_p ** 2) - 0.5
