"""Density grids, point annotations and the resampling primitives.

Grids are stored as ``(height, width)`` float64 arrays in row-major order.
Point coordinates are ``(x, y)`` with ``x`` along the width axis; the centre
of pixel ``(row, col)`` sits at ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SIGMA_G = 4.0
TRUNCATE = 4.0


def _as_field(g) -> np.ndarray:
    arr = np.asarray(getattr(g, "values", g), dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a nonempty 2-D field, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class DensityGrid:
    values: np.ndarray

    def __post_init__(self):
        arr = _as_field(self.values)
        if not np.all(np.isfinite(arr)):
            raise ValueError("density grid contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def mass(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class PointAnnotations:
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("annotation frame must be at least 1x1")
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinate")
        outside = (pts[:, 0] < 0) | (pts[:, 0] >= self.width) | (pts[:, 1] < 0) | (pts[:, 1] >= self.height)
        if outside.any():
            bad = pts[np.argmax(outside)]
            raise ValueError(f"point ({bad[0]}, {bad[1]}) outside {self.width}x{self.height} frame")
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class BlockGrid:
    k: int
    block_values: np.ndarray


def pixel_centers(height: int, width: int, cell: float = 1.0) -> np.ndarray:
    """(height*width, 2) array of (x, y) pixel centres in row-major order."""
    ys, xs = np.meshgrid((np.arange(height) + 0.5) * cell, (np.arange(width) + 0.5) * cell, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def gaussian_rasterize(ann: PointAnnotations, sigma_g: float = DEFAULT_SIGMA_G) -> DensityGrid:
    """Render each point as a truncated Gaussian bump of exactly unit mass.

    Bumps are evaluated at pixel centres within ``4 * sigma_g`` of the point
    and renormalised over the in-frame pixels, so the grid total equals the
    point count.
    """
    if not sigma_g > 0:
        raise ValueError("sigma_g must be positive")
    out = np.zeros((ann.height, ann.width))
    radius = TRUNCATE * sigma_g
    for x, y in ann.points:
        c0 = max(int(np.floor(x - radius)), 0)
        c1 = min(int(np.ceil(x + radius)) + 1, ann.width)
        r0 = max(int(np.floor(y - radius)), 0)
        r1 = min(int(np.ceil(y + radius)) + 1, ann.height)
        cx = np.arange(c0, c1) + 0.5
        cy = np.arange(r0, r1) + 0.5
        d2 = (cy[:, None] - y) ** 2 + (cx[None, :] - x) ** 2
        bump = np.where(d2 <= radius * radius, np.exp(-d2 / (2 * sigma_g**2)), 0.0)
        total = bump.sum()
        if total <= 0:
            # sigma_g far below a pixel: all mass lands on the containing pixel
            out[int(y), int(x)] += 1.0
            continue
        out[r0:r1, c0:c1] += bump / total
    return DensityGrid(out)


def dot_map(ann: PointAnnotations, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Bin points into a (height, width) count grid covering the annotation frame."""
    height = ann.height if height is None else height
    width = ann.width if width is None else width
    out = np.zeros((height, width))
    if ann.count:
        rows = np.minimum((ann.points[:, 1] * height / ann.height).astype(int), height - 1)
        cols = np.minimum((ann.points[:, 0] * width / ann.width).astype(int), width - 1)
        np.add.at(out, (rows, cols), 1.0)
    return out


def _partition(n: int, k: int) -> np.ndarray:
    # boundaries of k near-equal integer blocks over n items
    return (np.arange(k + 1) * n) // k


def _pool_matrix(n: int, k: int) -> np.ndarray:
    bounds = _partition(n, k)
    mat = np.zeros((k, n))
    for b in range(k):
        lo, hi = bounds[b], bounds[b + 1]
        mat[b, lo:hi] = 1.0 / (hi - lo)
    return mat


def block_average_pool(g, k: int) -> BlockGrid:
    """Average a grid into k x k blocks.

    When k does not divide a dimension the block edges follow an even integer
    partition, so block sizes differ by at most one pixel.
    """
    arr = _as_field(g)
    h, w = arr.shape
    if k < 1 or k > min(h, w):
        raise ValueError(f"block count {k} invalid for {h}x{w} grid")
    return BlockGrid(k, _pool_matrix(h, k) @ arr @ _pool_matrix(w, k).T)


def block_average_pool_adjoint(blocks: np.ndarray, height: int, width: int) -> np.ndarray:
    """Adjoint of :func:`block_average_pool`: spreads each block value uniformly (scaled by 1/size)."""
    blocks = np.asarray(blocks, dtype=np.float64)
    k = blocks.shape[0]
    return _pool_matrix(height, k).T @ blocks @ _pool_matrix(width, k)


def block_expand(blocks: np.ndarray, height: int, width: int) -> np.ndarray:
    """Piecewise-constant expansion of k x k block values back to the full grid."""
    blocks = np.asarray(blocks, dtype=np.float64)
    k = blocks.shape[0]
    rows = np.repeat(np.arange(k), np.diff(_partition(height, k)))
    cols = np.repeat(np.arange(k), np.diff(_partition(width, k)))
    return blocks[np.ix_(rows, cols)]


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation weights, align_corners=False (half-pixel centres)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    mat = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(mat, 1.0)
        return mat
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_upsample(src, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a 2-D field (or a stack of fields along axis 0)."""
    arr = np.asarray(getattr(src, "values", src), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty source field")
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    ry = interp_matrix(arr.shape[-2], out_h)
    rx = interp_matrix(arr.shape[-1], out_w)
    return np.einsum("oh,...hw,pw->...op", ry, arr, rx)


def bilinear_upsample_adjoint(grad_out: np.ndarray, in_w: int, in_h: int) -> np.ndarray:
    """Adjoint (transpose) of :func:`bilinear_upsample`."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    ry = interp_matrix(in_h, grad_out.shape[-2])
    rx = interp_matrix(in_w, grad_out.shape[-1])
    return np.einsum("oh,...op,pw->...hw", ry, grad_out, rx)
