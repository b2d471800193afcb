"""Density-guided adaptive selection between the transformer and CNN density maps.

Per branch ``i``::

    d_b  = upsample(w1 * avgpool(D_i, k) + b1)
    d_at = sigmoid(w2 * d_b + b2)
    A_i  = sigmoid(d_b * d_at)

and the fused map is ``A_t * D_t + (1 - A_c) * D_c``.  The 1x1 convolutions
act on single-channel density maps, so each is a scalar scale plus bias.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .grid import (
    bilinear_upsample,
    bilinear_upsample_adjoint,
    block_average_pool,
    block_average_pool_adjoint,
)

DEFAULT_K = 6
PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class BranchParams:
    w1: float = 1.0
    b1: float = 0.0
    w2: float = 1.0
    b2: float = 0.0
    k: int = DEFAULT_K

    def __post_init__(self):
        vals = [self.w1, self.b1, self.w2, self.b2]
        if not np.all(np.isfinite(vals)):
            raise ValueError("ASM parameters must be finite")
        if self.k < 1:
            raise ValueError("block count must be >= 1")

    def to_json(self, branch: str) -> dict:
        return {"branch": branch, **{n: float(getattr(self, n)) for n in PARAM_NAMES}, "k": int(self.k)}

    @classmethod
    def from_json(cls, obj: dict) -> "BranchParams":
        return cls(*(float(obj[n]) for n in PARAM_NAMES), k=int(obj["k"]))


@dataclass
class AsmParams:
    t: BranchParams = field(default_factory=BranchParams)
    c: BranchParams = field(default_factory=BranchParams)

    def to_json(self) -> list:
        return [self.t.to_json("t"), self.c.to_json("c")]

    @classmethod
    def from_json(cls, objs) -> "AsmParams":
        by_branch = {o["branch"]: BranchParams.from_json(o) for o in objs}
        return cls(t=by_branch["t"], c=by_branch["c"])


@dataclass
class BranchCache:
    params: BranchParams
    shape: tuple
    blocks: np.ndarray
    d_b: np.ndarray
    d_at: np.ndarray
    attention: np.ndarray


@dataclass
class AsmCache:
    d_t: np.ndarray
    d_c: np.ndarray
    t: BranchCache
    c: BranchCache


def asm_branch(d, p: BranchParams):
    """Upsampled block density ``d_b`` and normalised attention ``d_at`` for one branch."""
    d = np.asarray(getattr(d, "values", d), dtype=np.float64)
    h, w = d.shape
    blocks = block_average_pool(d, p.k).block_values
    d_b = bilinear_upsample(p.w1 * blocks + p.b1, w, h)
    d_at = expit(p.w2 * d_b + p.b2)
    return d_b, d_at


def final_attention(d_b, d_at) -> np.ndarray:
    d_b = np.asarray(d_b, dtype=np.float64)
    d_at = np.asarray(d_at, dtype=np.float64)
    if d_b.shape != d_at.shape:
        raise ValueError(f"shape mismatch {d_b.shape} vs {d_at.shape}")
    return expit(d_b * d_at)


def fuse(d_t, d_c, a_tt, a_tc) -> np.ndarray:
    """A_t * D_t + (1 - A_c) * D_c, elementwise."""
    arrs = [np.asarray(getattr(x, "values", x), dtype=np.float64) for x in (d_t, d_c, a_tt, a_tc)]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError(f"fuse needs equal shapes, got {[a.shape for a in arrs]}")
    d_t, d_c, a_tt, a_tc = arrs
    return a_tt * d_t + (1.0 - a_tc) * d_c


def _branch_forward(d: np.ndarray, p: BranchParams) -> BranchCache:
    blocks = block_average_pool(d, p.k).block_values
    d_b = bilinear_upsample(p.w1 * blocks + p.b1, d.shape[1], d.shape[0])
    d_at = expit(p.w2 * d_b + p.b2)
    return BranchCache(p, d.shape, blocks, d_b, d_at, final_attention(d_b, d_at))


def asm_forward(d_t, d_c, params: AsmParams):
    """Fused density map and the cache needed by :func:`asm_backward`."""
    d_t = np.asarray(getattr(d_t, "values", d_t), dtype=np.float64)
    d_c = np.asarray(getattr(d_c, "values", d_c), dtype=np.float64)
    if d_t.shape != d_c.shape:
        raise ValueError(f"branch maps differ in shape: {d_t.shape} vs {d_c.shape}")
    t = _branch_forward(d_t, params.t)
    c = _branch_forward(d_c, params.c)
    return fuse(d_t, d_c, t.attention, c.attention), AsmCache(d_t, d_c, t, c)


def _branch_backward(grad_a: np.ndarray, bc: BranchCache):
    p = bc.params
    h, w = bc.shape
    a = bc.attention
    du = grad_a * a * (1.0 - a)
    dd_b = du * bc.d_at
    ds = du * bc.d_b * bc.d_at * (1.0 - bc.d_at)
    dd_b = dd_b + ds * p.w2
    de = bilinear_upsample_adjoint(dd_b, p.k, p.k)
    grads = {
        "w1": float(np.sum(de * bc.blocks)),
        "b1": float(np.sum(de)),
        "w2": float(np.sum(ds * bc.d_b)),
        "b2": float(np.sum(ds)),
    }
    return block_average_pool_adjoint(de * p.w1, h, w), grads


def asm_backward(grad_zhat, cache: AsmCache):
    """Reverse-mode gradients through selection and fusion.

    Returns ``(grad_d_t, grad_d_c, {"t": {...}, "c": {...}})``.
    """
    if cache is None:
        raise ValueError("asm_backward needs the cache from asm_forward")
    g = np.asarray(grad_zhat, dtype=np.float64)
    if g.shape != cache.d_t.shape:
        raise ValueError("upstream gradient shape does not match the fused map")
    a_tt, a_tc = cache.t.attention, cache.c.attention
    gd_t_branch, gt = _branch_backward(g * cache.d_t, cache.t)
    gd_c_branch, gc = _branch_backward(-g * cache.d_c, cache.c)
    grad_t = g * a_tt + gd_t_branch
    grad_c = g * (1.0 - a_tc) + gd_c_branch
    return grad_t, grad_c, {"t": gt, "c": gc}


def concat_fuse(d_t, d_c) -> np.ndarray:
    """Feature-free stand-in for the "concat" ablation: the mean of both maps."""
    return 0.5 * (np.asarray(d_t, dtype=np.float64) + np.asarray(d_c, dtype=np.float64))


def params_dict(p: AsmParams) -> dict:
    return {"t": asdict(p.t), "c": asdict(p.c)}
