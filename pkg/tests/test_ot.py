import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdot.checks import central_diff, rel_err
from crowdot.ot import (
    CostKind,
    NotConverged,
    SolverConfig,
    build_cost,
    combined_loss,
    counting_grad,
    counting_loss,
    exact_ot,
    ot_loss,
    self_transport,
    sinkhorn,
    tv_grad,
    tv_loss,
)

from conftest import vertex_enumeration_ot


def _sq(src, dst):
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    return ((src[:, None] - dst[None]) ** 2).sum(-1)


# hand-checked / vertex-enumerated optima, frozen
FROZEN = [
    ([[0, 0], [1, 0]], [[0, 1], [1, 1]], [0.5, 0.5], [0.5, 0.5], 1.0),
    ([[0, 0], [3, 0]], [[1, 0], [2, 0]], [0.25, 0.75], [0.5, 0.5], 1.75),
    ([[0, 0], [1, 2], [3, 1]], [[2, 2], [0, 1], [3, 3]], [0.2, 0.3, 0.5], [0.4, 0.4, 0.2], 2.1),
]


@pytest.mark.parametrize("src,dst,mu,nu,expect", FROZEN)
def test_exact_frozen(src, dst, mu, nu, expect):
    cm = build_cost(src, dst)
    assert exact_ot(cm, np.array(mu), np.array(nu)).attained_cost == pytest.approx(expect, abs=1e-12)
    assert vertex_enumeration_ot(cm.costs, mu, nu) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("src,dst,mu,nu,expect", FROZEN)
def test_sinkhorn_frozen(src, dst, mu, nu, expect):
    sol = sinkhorn(build_cost(src, dst), np.array(mu), np.array(nu), strict=True)
    assert sol.converged
    assert abs(sol.attained_cost - expect) / expect <= 1e-3


def test_cost_kind_parse_and_dispatch():
    assert CostKind.parse("l2") == CostKind.l2()
    assert CostKind.parse({"correntropy": 16}).sigma == 16.0
    assert CostKind.correntropy(math.inf) == CostKind.l2()
    assert CostKind.correntropy(8.0).to_json() == {"correntropy": 8.0}
    with pytest.raises(ValueError):
        CostKind.parse({"huber": 1})
    with pytest.raises(ValueError):
        CostKind("correntropy", -1.0)


def test_build_cost_errors():
    with pytest.raises(ValueError):
        build_cost(np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError, match="overflow"):
        build_cost([[0, 0]], [[1e4, 0]], CostKind.correntropy(1.0))


def test_sigma_inf_cost_matrix_identical(rng):
    a, b = rng.random((5, 2)) * 50, rng.random((7, 2)) * 50
    assert np.array_equal(build_cost(a, b, CostKind("correntropy", math.inf)).costs, build_cost(a, b).costs)


def test_marginals_must_sum_to_one():
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 2)), np.array([0.5, 0.6]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 3)), np.array([0.5, 0.5]), np.array([0.5, 0.5]))


def test_strict_raises_when_iterations_exhausted(rng):
    C = _sq(rng.random((6, 2)), rng.random((6, 2)))
    cfg = SolverConfig(eps_schedule=(1e-3,), max_iter=1, newton=False)
    mu = np.full(6, 1 / 6)
    assert not sinkhorn(C, mu, mu, cfg).converged
    with pytest.raises(NotConverged):
        sinkhorn(C, mu, mu, cfg, strict=True)


def test_single_cell():
    sol = sinkhorn(np.array([[3.0]]), np.array([1.0]), np.array([1.0]))
    assert sol.plan.tolist() == [[1.0]]
    assert sol.attained_cost == 3.0


@st.composite
def instances(draw, max_n=3):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**31))
    r = np.random.default_rng(seed)
    mu, nu = r.random(n) + 0.05, r.random(m) + 0.05
    return r.random((n, 2)), r.random((m, 2)), mu / mu.sum(), nu / nu.sum()


@given(instances())
def test_exact_matches_vertex_enumeration(inst):
    src, dst, mu, nu = inst
    C = _sq(src, dst)
    assert exact_ot(C, mu, nu).attained_cost == pytest.approx(vertex_enumeration_ot(C, mu, nu), abs=1e-10)


@given(instances(max_n=6))
def test_sinkhorn_plan_properties(inst):
    src, dst, mu, nu = inst
    C = _sq(src, dst)
    sol = sinkhorn(C, mu, nu)
    assert sol.converged
    assert (sol.plan >= 0).all()
    assert np.abs(sol.plan.sum(1) - mu).sum() <= 1e-9
    np.testing.assert_allclose(sol.plan.sum(0), nu, atol=1e-12)
    exact = exact_ot(C, mu, nu)
    # entropic plan is feasible, so it cannot beat the LP optimum (up to the marginal residual)
    assert sol.attained_cost >= exact.attained_cost - 1e-8
    assert sol.attained_cost - exact.attained_cost <= 1e-3 * max(exact.attained_cost, 1e-12) + 1e-9


@given(instances(max_n=5))
def test_exact_duals_certify_optimum(inst):
    src, dst, mu, nu = inst
    C = _sq(src, dst)
    sol = exact_ot(C, mu, nu)
    f, g = sol.dual_source, sol.dual_target
    assert (f[:, None] + g[None, :] <= C + 1e-9).all()
    assert f @ mu + g @ nu == pytest.approx(sol.attained_cost, abs=1e-9)


def test_exact_rejects_large():
    with pytest.raises(ValueError):
        exact_ot(np.zeros((65, 65)), np.full(65, 1 / 65), np.full(65, 1 / 65))


def test_self_transport_symmetric(rng):
    xy = rng.random((6, 2)) * 4
    p = rng.random(6) + 0.1
    p /= p.sum()
    C = _sq(xy, xy)
    val, f = self_transport(C, p)
    sol = sinkhorn(C, p, p)
    assert val == pytest.approx(sol.value, abs=1e-8)


def test_debiased_loss_zero_on_identical():
    z = np.array([[1.0, 2.0], [0.5, 3.0]])
    for cost in (CostKind.l2(), CostKind.correntropy(16.0)):
        lb = combined_loss(z, z, cost)
        assert abs(lb.total) <= 1e-9
        assert lb.counting == 0 and lb.tv == 0


def test_tv_frozen():
    assert tv_loss([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert tv_loss([1.0, 1.0], [1.0, 3.0]) == pytest.approx(0.25)


def test_counting_frozen():
    assert counting_loss([1.0, 2.0], [0.5, 0.5]) == 2.0
    assert counting_grad([1.0, 2.0], [0.5, 0.5]).tolist() == [-1.0, -1.0]
    assert counting_grad([1.0], [1.0]).tolist() == [0.0]


def test_zero_mass_prediction_rejected():
    with pytest.raises(ValueError, match="zero total mass"):
        combined_loss(np.ones((2, 2)), np.zeros((2, 2)))


@given(st.integers(0, 2**31))
def test_scale_invariant_terms_have_orthogonal_gradients(seed):
    # OT and TV see only the normalised prediction, so d/dt L(t * zhat) = 0
    r = np.random.default_rng(seed)
    z, zh = r.random((3, 3)) + 0.1, r.random((3, 3)) + 0.1
    _, g, _ = ot_loss(z.ravel(), np.argwhere(np.ones((3, 3)))[:, ::-1] + 0.5, zh.ravel(),
                      np.argwhere(np.ones((3, 3)))[:, ::-1] + 0.5, CostKind.l2())
    assert abs(g @ zh.ravel()) <= 1e-9 * np.abs(g).sum()
    assert abs(tv_grad(z.ravel(), zh.ravel()) @ zh.ravel()) <= 1e-12


@pytest.mark.parametrize("cost", [CostKind.l2(), CostKind.correntropy(16.0)])
def test_combined_gradient_finite_differences(cost):
    r = np.random.default_rng(7)
    z, zh = r.random((3, 3)) * 3 + 0.1, r.random((3, 3)) * 3 + 0.1
    lb = combined_loss(z, zh, cost)
    num = central_diff(lambda x: combined_loss(z, x, cost).total, zh)
    assert rel_err(lb.grad_wrt_prediction, num) <= 1e-4


def test_point_source_gradient_finite_differences():
    r = np.random.default_rng(3)
    pts = r.random((5, 2)) * 16
    z = np.zeros((2, 2))
    for x, y in pts:
        z[int(y // 8), int(x // 8)] += 1
    zh = r.random((2, 2)) + 0.5
    cfg = SolverConfig(eps_schedule=(64.0, 16.0))
    cost = CostKind.correntropy(16.0)
    lb = combined_loss(z, zh, cost, cfg, points=pts, cell=8.0)
    num = central_diff(lambda x: combined_loss(z, x, cost, cfg, points=pts, cell=8.0).total, zh)
    assert rel_err(lb.grad_wrt_prediction, num) <= 1e-4


def test_warm_start_matches_cold(rng):
    z, zh = rng.random((3, 3)) + 0.1, rng.random((3, 3)) + 0.1
    warm = {}
    combined_loss(z, zh * 1.1 + 0.05, warm=warm)
    a = combined_loss(z, zh, warm=warm)
    b = combined_loss(z, zh)
    assert a.total == pytest.approx(b.total, abs=1e-7)
    np.testing.assert_allclose(a.grad_wrt_prediction, b.grad_wrt_prediction, atol=1e-6)
