"""Gaussian kernel, empirical correntropy and the correntropy transport cost."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_NORM = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 16.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"kernel bandwidth must be positive and finite, got {self.sigma}")


def _sqdist(x, y) -> np.ndarray:
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return np.sum(d * d, axis=-1)


def gaussian_kernel(x, y, cfg: KernelConfig):
    """Normalised Gaussian kernel 1/(sqrt(2 pi) sigma) * exp(-|x-y|^2 / 2 sigma^2)."""
    s = cfg.sigma
    return _NORM / s * np.exp(-_sqdist(x, y) / (2.0 * s * s))


def empirical_correntropy(xs, ys, cfg: KernelConfig) -> float:
    """Sample-mean estimate of E[k(X, Y)] over paired samples."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or len(xs) == 0:
        raise ValueError("correntropy needs two nonempty sample lists of equal length")
    if xs.ndim == 1:
        xs, ys = xs[:, None], ys[:, None]
    return float(np.mean(gaussian_kernel(xs, ys, cfg)))


def correntropy_cost_sq(d2, sigma: float):
    """Correntropy cost as a function of the squared distance.

    ``sigma = inf`` returns ``d2`` unchanged (the L2 limit).
    """
    d2 = np.asarray(d2, dtype=np.float64)
    if math.isinf(sigma):
        return d2
    with np.errstate(over="raise"):
        return d2 * np.exp(d2 / (2.0 * sigma * sigma))


def correntropy_cost(a, b, cfg: KernelConfig):
    """|a-b|^2 * exp(|a-b|^2 / 2 sigma^2): squared distance over the unnormalised kernel."""
    return correntropy_cost_sq(_sqdist(a, b), cfg.sigma)
