"""Fuzzed property suites run by ``crowdot check``.

Each suite returns ``(worst, threshold, detail)``; a run passes when
``worst <= threshold``.
"""
from __future__ import annotations

import numpy as np

from .nets import encoder_stack, init_encoder_layer
from .ot import CostKind, SolverConfig, build_cost, combined_loss, exact_ot, sinkhorn

SINKHORN_GAP = 1e-3
GRAD_ERR = 1e-4
EQUIV_DEV = 1e-10
FD_STEP = 1e-6


def random_ot_instance(rng, max_n=8):
    n, m = (int(v) for v in rng.integers(1, max_n + 1, 2))
    src, dst = rng.random((n, 2)), rng.random((m, 2))
    mu = rng.random(n) + 0.05
    nu = rng.random(m) + 0.05
    return src, dst, mu / mu.sum(), nu / nu.sum()


def sinkhorn_suite(n=100, seed=0, cfg=SolverConfig()):
    """Relative gap between the entropic plan's cost and the exact LP optimum."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        src, dst, mu, nu = random_ot_instance(rng)
        cm = build_cost(src, dst, CostKind.l2())
        exact = exact_ot(cm, mu, nu).attained_cost
        approx = sinkhorn(cm, mu, nu, cfg).attained_cost
        gap = abs(approx - exact) / exact if exact > 0 else abs(approx)
        worst = max(worst, gap)
    return worst, SINKHORN_GAP, "max relative cost gap"


def central_diff(fun, x, h=FD_STEP):
    g = np.zeros_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[k] += h
        xm.flat[k] -= h
        g.flat[k] = (fun(xp) - fun(xm)) / (2 * h)
    return g


def rel_err(analytic, numeric) -> float:
    """Elementwise relative error, floored at 1e-3 of the largest numeric entry."""
    a, b = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3 * np.abs(b).max())
    return float(np.max(np.abs(a - b) / denom))


def grad_instance(rng, side=4):
    z = rng.random((side, side)) * 3 + 0.1
    zhat = rng.random((side, side)) * 3 + 0.1
    return z, zhat


def grad_suite(n=20, seed=0, costs=(CostKind.l2(), CostKind.correntropy(16.0))):
    """Combined-loss gradient vs central differences on 16-bin instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        z, zhat = grad_instance(rng)
        for cost in costs:
            lb = combined_loss(z, zhat, cost)
            num = central_diff(lambda x: combined_loss(z, x, cost).total, zhat)
            worst = max(worst, rel_err(lb.grad_wrt_prediction, num))
    return worst, GRAD_ERR, "max relative gradient error"


def equivariance_suite(n=10, seed=0, d=32, heads=4, n_layers=4, max_tokens=64):
    """max |stack(P z) - P stack(z)| over random permutations P."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        layers = [init_encoder_layer(rng, d, heads) for _ in range(n_layers)]
        t = int(rng.integers(2, max_tokens + 1))
        z = rng.standard_normal((t, d))
        perm = rng.permutation(t)
        dev = np.abs(encoder_stack(z[perm], layers, heads) - encoder_stack(z, layers, heads)[perm]).max()
        worst = max(worst, float(dev))
    return worst, EQUIV_DEV, "max permutation deviation"


SUITES = {"sinkhorn": sinkhorn_suite, "grad": grad_suite, "equivariance": equivariance_suite}
