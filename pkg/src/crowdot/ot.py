"""Discrete optimal transport and the counting / OT / TV composite loss.

Sinkhorn works in the log domain on the KL-to-product-measure formulation::

    W_eps(mu, nu) = min_T <C, T> + eps * KL(T || mu x nu)

whose dual potentials ``(f, g)`` are the exact gradients of ``W_eps`` with
respect to ``mu`` and ``nu``.  The OT loss term uses the debiased form
``W(a, b) - W(a, a)/2 - W(b, b)/2`` so identical inputs score exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .correntropy import correntropy_cost_sq
from .grid import pixel_centers

OT_WEIGHT = 0.1
TV_WEIGHT = 0.01
ANNEAL_SCHEDULE = (1.0, 0.3, 0.1, 0.03, 0.01, 3e-3, 1e-3)
EXACT_MAX_CELLS = 4096


@dataclass(frozen=True)
class CostKind:
    """Point-to-point transport cost: ``l2`` or correntropy with bandwidth ``sigma``.

    A correntropy cost with ``sigma = inf`` dispatches to ``l2``.
    """
    kind: str = "l2"
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind == "correntropy":
            if self.sigma is None or not self.sigma > 0:
                raise ValueError("correntropy cost needs a positive sigma")
            if math.isinf(self.sigma):
                object.__setattr__(self, "kind", "l2")
                object.__setattr__(self, "sigma", None)
        elif self.kind == "l2":
            object.__setattr__(self, "sigma", None)
        else:
            raise ValueError(f"unknown cost kind {self.kind!r}")

    @classmethod
    def l2(cls) -> "CostKind":
        return cls("l2")

    @classmethod
    def correntropy(cls, sigma: float) -> "CostKind":
        return cls("correntropy", float(sigma))

    @classmethod
    def parse(cls, obj) -> "CostKind":
        """Accept ``"l2"`` or ``{"correntropy": sigma}`` (the instance JSON form)."""
        if obj == "l2":
            return cls.l2()
        if isinstance(obj, dict) and set(obj) == {"correntropy"}:
            return cls.correntropy(float(obj["correntropy"]))
        raise ValueError(f"unrecognised cost specification {obj!r}")

    def to_json(self):
        return "l2" if self.kind == "l2" else {"correntropy": self.sigma}

    def from_sqdist(self, d2):
        if self.kind == "l2":
            return np.asarray(d2, dtype=np.float64)
        return correntropy_cost_sq(d2, self.sigma)


@dataclass(frozen=True)
class SolverConfig:
    eps_schedule: tuple = ANNEAL_SCHEDULE
    max_iter: int = 20000
    tol: float = 1e-9
    stage_tol: float = 1e-4
    newton: bool = True
    newton_switch: float = 1e-2
    newton_sweeps: int = 20
    check_every: int = 10

    def __post_init__(self):
        if not self.eps_schedule or any(not e > 0 for e in self.eps_schedule):
            raise ValueError("eps schedule must be nonempty and positive")

    @property
    def eps(self) -> float:
        return self.eps_schedule[-1]


@dataclass
class CostMatrix:
    costs: np.ndarray
    source_locations: np.ndarray
    target_locations: np.ndarray

    @property
    def n_sources(self) -> int:
        return self.costs.shape[0]

    @property
    def m_targets(self) -> int:
        return self.costs.shape[1]


@dataclass
class TransportPlan:
    plan: np.ndarray
    attained_cost: float
    dual_source: np.ndarray
    dual_target: np.ndarray
    eps: float = 0.0
    residual: float = 0.0
    converged: bool = True
    iterations: int = 0
    value: float = field(default=float("nan"))


class NotConverged(RuntimeError):
    pass


def build_cost(src, dst, cost: CostKind = CostKind()) -> CostMatrix:
    """Pairwise cost between two point supports, each an (n, 2) array of (x, y)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("cost supports must be nonempty")
    diff = src[:, None, :] - dst[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    try:
        costs = cost.from_sqdist(d2)
    except FloatingPointError:
        raise ValueError("correntropy cost overflows float64 for these distances") from None
    return CostMatrix(costs, src, dst)


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _check_marginals(mu, nu):
    mu = np.asarray(mu, dtype=np.float64).ravel()
    nu = np.asarray(nu, dtype=np.float64).ravel()
    if (mu < 0).any() or (nu < 0).any():
        raise ValueError("marginals must be nonnegative")
    if abs(mu.sum() - 1.0) > 1e-9 or abs(nu.sum() - 1.0) > 1e-9:
        raise ValueError(f"marginals must each sum to 1 (got {mu.sum()}, {nu.sum()})")
    return mu, nu


def _newton_polish(C, mu, nu, g, eps, tol, max_steps=30):
    """Newton ascent on the semi-dual in ``g`` over the positive-mass support.

    Same objective as the Sinkhorn sweeps, quadratic instead of linear local
    convergence.  Returns the updated full-length ``g``.
    """
    rows, cols = mu > 0, nu > 0
    K = -C[np.ix_(rows, cols)] / eps
    a, b = mu[rows], nu[cols]
    la, lb = np.log(a), np.log(b)
    ga = g[cols].copy()
    m = len(b)

    def semi(gv):
        fv = -eps * _lse(K + (lb + gv / eps)[None, :], 1)
        with np.errstate(over="ignore"):
            t = np.exp(K + (la + fv / eps)[:, None] + (lb + gv / eps)[None, :])
        return fv @ a + gv @ b, t

    obj, t = semi(ga)
    for _ in range(max_steps):
        colsum = t.sum(axis=0)
        r = b - colsum
        if np.abs(r).sum() <= tol:
            break
        hess = np.diag(colsum) - t.T @ (t / a[:, None]) + np.full((m, m), 1.0 / m)
        try:
            step = eps * np.linalg.solve(hess, r)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        while scale > 1e-6:
            new_obj, new_t = semi(ga + scale * step)
            if np.isfinite(new_obj) and np.isfinite(new_t).all() and new_obj >= obj - 1e-15 * abs(obj):
                break
            scale *= 0.5
        else:
            break
        ga, obj, t = ga + scale * step, new_obj, new_t
    out = g.copy()
    out[cols] = ga
    return out


def _sweeps(K, lmu, lnu, mu, f, g, eps, target, max_iter, check_every):
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = -eps * _lse(K + (lnu + g / eps)[None, :], 1)
        log_t = K + (lmu + f / eps)[:, None]
        g = -eps * _lse(log_t, 0)
        if it % check_every == 0 or it == 1 or it == max_iter:
            plan = np.exp(log_t + (lnu + g / eps)[None, :])
            residual = float(np.abs(plan.sum(axis=1) - mu).sum())
            if residual <= target:
                break
    return f, g, it, residual


def sinkhorn(c, mu, nu, cfg: SolverConfig = SolverConfig(), init=None, strict: bool = False) -> TransportPlan:
    """Log-domain Sinkhorn with eps annealing.

    Intermediate annealing stages run to a loose residual (``stage_tol``), the
    final stage to ``cfg.tol``.  Each stage starts with a few plain sweeps and
    then takes damped Newton steps on the same dual, which fixes the slow
    linear convergence of the sweeps on near-degenerate instances.  The
    residual is the L1 error of the source marginal (target marginals are
    exact after every sweep).  On failure the plan comes back with
    ``converged=False``, or :class:`NotConverged` is raised when ``strict``.
    """
    C = np.asarray(getattr(c, "costs", c), dtype=np.float64)
    mu, nu = _check_marginals(mu, nu)
    if C.shape != (len(mu), len(nu)):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({len(mu)}, {len(nu)})")
    with np.errstate(divide="ignore"):
        lmu, lnu = np.log(mu), np.log(nu)
    if init is None:
        f, g = np.zeros(len(mu)), np.zeros(len(nu))
    else:
        f, g = (np.array(v, dtype=np.float64) for v in init)

    iters = 0
    residual = np.inf
    last = len(cfg.eps_schedule) - 1
    for stage, eps in enumerate(cfg.eps_schedule):
        target = cfg.tol if stage == last else max(cfg.tol, cfg.stage_tol)
        K = -C / eps
        f, g, n, residual = _sweeps(K, lmu, lnu, mu, f, g, eps, max(target, cfg.newton_switch) if cfg.newton else target,
                                    cfg.newton_sweeps if cfg.newton else cfg.max_iter, cfg.check_every)
        iters += n
        if residual > target and cfg.newton:
            g = _newton_polish(C, mu, nu, g, eps, 0.5 * target)
            f, g, n, residual = _sweeps(K, lmu, lnu, mu, f, g, eps, target, cfg.max_iter, 1)
            iters += n
    plan = np.exp(K + (lmu + f / eps)[:, None] + (lnu + g / eps)[None, :])
    residual = float(np.abs(plan.sum(axis=1) - mu).sum())
    converged = residual <= cfg.tol
    if strict and not converged:
        raise NotConverged(f"Sinkhorn did not converge in {cfg.max_iter} iterations (residual {residual:.3e})")
    finite_f = np.where(mu > 0, f, 0.0)
    finite_g = np.where(nu > 0, g, 0.0)
    value = float(finite_f @ mu + finite_g @ nu - eps * (plan.sum() - 1.0))
    return TransportPlan(plan, float(np.sum(C * plan)), f, g, eps, residual, converged, iters, value)


def exact_ot(c, mu, nu) -> TransportPlan:
    """Exact transport plan via the HiGHS linear-programming solver (test oracle)."""
    C = np.asarray(getattr(c, "costs", c), dtype=np.float64)
    mu, nu = _check_marginals(mu, nu)
    n, m = C.shape
    if (n, m) != (len(mu), len(nu)):
        raise ValueError("cost shape does not match marginals")
    if n * m > EXACT_MAX_CELLS:
        raise ValueError(f"instance too large for exact solver ({n}x{m} > {EXACT_MAX_CELLS} cells)")
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=a_eq, b_eq=np.concatenate([mu, nu]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    duals = res.eqlin.marginals
    return TransportPlan(plan, float(np.sum(C * plan)), duals[:n].copy(), duals[n:].copy(), value=float(res.fun))


def _normalize(mass, name):
    mass = np.asarray(mass, dtype=np.float64).ravel()
    total = mass.sum()
    if not total > 0:
        raise ValueError(f"{name} has zero total mass")
    return mass, total


def self_transport(cost_mat: np.ndarray, p: np.ndarray, cfg: SolverConfig = SolverConfig(), init=None):
    """W_eps(p, p) and its symmetric potential, via averaged symmetric updates.

    The potential is the gradient of ``W_eps(p, p) / 2`` with respect to ``p``.
    """
    C = np.asarray(cost_mat, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lp = np.log(p)
    f = np.zeros(len(p)) if init is None else np.array(init, dtype=np.float64)
    last = len(cfg.eps_schedule) - 1
    for stage, eps in enumerate(cfg.eps_schedule):
        target = cfg.tol if stage == last else max(cfg.tol, cfg.stage_tol)
        K = -C / eps
        for _ in range(cfg.max_iter):
            f_new = -eps * _lse(K + (lp + f / eps)[None, :], 1)
            f = 0.5 * (f + f_new)
            plan = np.exp(K + (lp + f / eps)[:, None] + (lp + f / eps)[None, :])
            if np.abs(plan.sum(axis=1) - p).sum() <= target:
                break
    f = -eps * _lse(K + (lp + f / eps)[None, :], 1)
    plan = np.exp(K + (lp + f / eps)[:, None] + (lp + f / eps)[None, :])
    fp = np.where(p > 0, f, 0.0)
    return float(2.0 * fp @ p - eps * (plan.sum() - 1.0)), f


def ot_loss(source_mass, source_xy, target_mass, target_xy, cost: CostKind = CostKind(),
            cfg: SolverConfig = SolverConfig(), debias: bool = True, warm: dict | None = None):
    """OT loss between two mass distributions and its gradient w.r.t. ``target_mass``.

    Both sides are normalised to probability vectors.  The gradient w.r.t. the
    unnormalised target is ``(g - <g, q>) / S`` with ``q`` the normalised
    target, ``S`` its total mass and ``g`` the (debiased) target potential.

    ``warm`` is an optional dict reused across calls with the same source
    (e.g. one per training scene).  It keeps the last potentials, which then
    seed a single solve at the final eps, and the source self-term.

    Returns ``(value, grad, plan)``.
    """
    a, _ = _normalize(source_mass, "source")
    b_raw, total = _normalize(target_mass, "prediction")
    b = b_raw / total
    keep = a > 0
    a, sxy = a[keep], np.asarray(source_xy, dtype=np.float64).reshape(-1, 2)[keep]
    cm = build_cost(sxy, target_xy, cost)
    run_cfg = cfg
    if warm is not None and "ab" in warm:
        run_cfg = replace(cfg, eps_schedule=cfg.eps_schedule[-1:])
    sol = sinkhorn(cm, a / a.sum(), b, run_cfg, init=None if warm is None else warm.get("ab"))
    value = sol.value
    g = sol.dual_target.copy()
    if warm is not None:
        warm["ab"] = (sol.dual_source, sol.dual_target)
    if debias:
        if warm is not None and "aa" in warm:
            va = warm["aa"]
        else:
            va, _ = self_transport(build_cost(sxy, sxy, cost).costs, a / a.sum(), cfg)
        vb, pb = self_transport(build_cost(target_xy, target_xy, cost).costs, b, run_cfg,
                                init=None if warm is None else warm.get("bb"))
        if warm is not None:
            warm["aa"], warm["bb"] = va, pb
        value = value - 0.5 * va - 0.5 * vb
        g = g - pb
    grad = (g - g @ b) / total
    return value, grad, sol


def tv_loss(z, zhat) -> float:
    """Half the L1 distance between the two normalised maps; in [0, 1]."""
    p, sp = _normalize(z, "ground truth")
    q, sq = _normalize(zhat, "prediction")
    return 0.5 * float(np.abs(p / sp - q / sq).sum())


def tv_grad(z, zhat) -> np.ndarray:
    p, sp = _normalize(z, "ground truth")
    q, sq = _normalize(zhat, "prediction")
    s = np.sign(q / sq - p / sp)
    return 0.5 * (s / sq - (s @ q) / sq**2)


def counting_loss(z, zhat) -> float:
    return abs(float(np.sum(z)) - float(np.sum(zhat)))


def counting_grad(z, zhat) -> np.ndarray:
    zhat = np.asarray(zhat, dtype=np.float64)
    return np.full(zhat.size, np.sign(float(zhat.sum()) - float(np.sum(z))))


@dataclass
class LossBreakdown:
    counting: float
    ot: float
    tv: float
    total: float
    grad_wrt_prediction: np.ndarray
    gt_count: float = 0.0

    def as_dict(self) -> dict:
        return {"counting": self.counting, "ot": self.ot, "tv": self.tv, "total": self.total}


def combined_loss(z, zhat, cost: CostKind = CostKind(), cfg: SolverConfig = SolverConfig(),
                  points=None, cell: float = 1.0, debias: bool = True, warm: dict | None = None) -> LossBreakdown:
    """counting + 0.1 * OT + 0.01 * |z|_1 * TV, with its gradient over ``zhat``.

    ``z`` is the ground-truth map on the prediction grid (the binned dot map
    during training).  If ``points`` is given the OT source is those points
    with equal mass; otherwise it is the support of ``z``.  ``cell`` is the
    pixel pitch of the prediction grid in the points' coordinate frame.
    """
    z = np.asarray(getattr(z, "values", z), dtype=np.float64)
    zhat = np.asarray(getattr(zhat, "values", zhat), dtype=np.float64)
    if z.shape != zhat.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {zhat.shape}")
    target_xy = pixel_centers(*zhat.shape, cell=cell)
    if points is None:
        src_xy, src_mass = target_xy, z.ravel()
    else:
        src_xy = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        src_mass = np.ones(len(src_xy))
    lc = counting_loss(z, zhat)
    lot, g_ot, _ = ot_loss(src_mass, src_xy, zhat.ravel(), target_xy, cost, cfg, debias, warm)
    ltv = tv_loss(z, zhat)
    gt_count = float(z.sum())
    total = lc + OT_WEIGHT * lot + TV_WEIGHT * gt_count * ltv
    grad = counting_grad(z, zhat) + OT_WEIGHT * g_ot + TV_WEIGHT * gt_count * tv_grad(z, zhat)
    return LossBreakdown(lc, float(lot), ltv, float(total), grad.reshape(zhat.shape), gt_count)
