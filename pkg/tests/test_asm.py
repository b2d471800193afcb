import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdot.asm import (
    AsmParams,
    BranchParams,
    asm_backward,
    asm_branch,
    asm_forward,
    concat_fuse,
    final_attention,
    fuse,
)
from crowdot.checks import central_diff, rel_err
from crowdot.grid import bilinear_upsample, block_average_pool


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_constant_map_frozen():
    d = np.ones((6, 6))
    d_b, d_at = asm_branch(d, BranchParams())
    assert np.allclose(d_b, 1.0)
    assert np.allclose(final_attention(d_b, d_at), 0.6750375273768237, rtol=1e-15)
    zhat, _ = asm_forward(np.full((6, 6), 2.0), np.full((6, 6), 3.0), AsmParams())
    assert np.allclose(zhat, 1.8696689318484707, rtol=1e-14)


def naive_asm(d_t, d_c, p: AsmParams):
    """Compositional oracle built from the scalar formulas, pixel by pixel."""
    def attention(d, bp):
        h, w = d.shape
        pooled = block_average_pool(d, bp.k).block_values
        d_b = bilinear_upsample(bp.w1 * pooled + bp.b1, w, h)
        out = np.empty_like(d)
        for i in range(h):
            for j in range(w):
                at = sig(bp.w2 * d_b[i, j] + bp.b2)
                out[i, j] = sig(d_b[i, j] * at)
        return out
    a_t, a_c = attention(d_t, p.t), attention(d_c, p.c)
    return a_t * d_t + (1 - a_c) * d_c


def _random_params(r, k=3):
    def bp():
        return BranchParams(*(r.standard_normal(4)), k=k)
    return AsmParams(bp(), bp())


def test_matches_compositional_oracle(rng):
    for _ in range(5):
        d_t, d_c = rng.random((9, 7)) * 4, rng.random((9, 7)) * 4
        p = _random_params(rng)
        np.testing.assert_allclose(asm_forward(d_t, d_c, p)[0], naive_asm(d_t, d_c, p), rtol=1e-13)


def test_saturation_recovers_pure_maps(rng):
    d_t, d_c = rng.random((12, 12)) * 10, rng.random((12, 12)) * 10
    hi = BranchParams(w1=0.0, b1=30.0, w2=0.0, b2=30.0)   # logit ~ +30
    lo = BranchParams(w1=0.0, b1=-30.0, w2=0.0, b2=30.0)  # logit ~ -30
    np.testing.assert_allclose(asm_forward(d_t, d_c, AsmParams(hi, hi))[0], d_t, atol=1e-9, rtol=0)
    np.testing.assert_allclose(asm_forward(d_t, d_c, AsmParams(lo, lo))[0], d_c, atol=1e-9, rtol=0)


@given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(-5, 5))
def test_fused_map_bounds(seed, w, b):
    r = np.random.default_rng(seed)
    d_t, d_c = r.random((8, 8)) * 50, r.random((8, 8)) * 50
    p = AsmParams(BranchParams(w, b, -w, b), BranchParams(-w, b, w, -b))
    zhat = asm_forward(d_t, d_c, p)[0]
    assert (zhat >= 0).all()
    assert (zhat <= d_t + d_c).all()


def test_shape_errors():
    with pytest.raises(ValueError):
        final_attention(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fuse(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        asm_forward(np.zeros((6, 6)), np.zeros((6, 7)), AsmParams())
    with pytest.raises(ValueError):
        asm_backward(np.zeros((2, 2)), None)


def test_params_validation_and_json():
    with pytest.raises(ValueError):
        BranchParams(w1=math.nan)
    p = AsmParams(BranchParams(0.5, -1, 2, 0.25, k=4), BranchParams())
    js = p.to_json()
    assert js[0] == {"branch": "t", "w1": 0.5, "b1": -1.0, "w2": 2.0, "b2": 0.25, "k": 4}
    assert AsmParams.from_json(js) == p


def test_concat_is_mean():
    assert concat_fuse([[2.0]], [[4.0]]).tolist() == [[3.0]]


def test_backward_finite_differences(rng):
    d_t, d_c = rng.random((8, 8)) * 2, rng.random((8, 8)) * 2
    p = _random_params(rng, k=3)
    up = rng.standard_normal((8, 8))
    _, cache = asm_forward(d_t, d_c, p)
    g_t, g_c, gp = asm_backward(up, cache)

    def loss(a, b, params=p):
        return float(np.sum(up * asm_forward(a, b, params)[0]))

    assert rel_err(g_t, central_diff(lambda x: loss(x, d_c), d_t, 1e-5)) <= 1e-6
    assert rel_err(g_c, central_diff(lambda x: loss(d_t, x), d_c, 1e-5)) <= 1e-6
    for br in ("t", "c"):
        for name in ("w1", "b1", "w2", "b2"):
            def f(v):
                bp = getattr(p, br)
                new = BranchParams(**{**bp.__dict__, name: float(v[0])})
                return loss(d_t, d_c, AsmParams(**{**p.__dict__, br: new}))
            num = central_diff(f, np.array([getattr(getattr(p, br), name)]), 1e-6)[0]
            assert gp[br][name] == pytest.approx(num, rel=1e-6, abs=1e-8)
