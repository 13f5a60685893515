import itertools
import math

import numpy as np
import pytest

from hfpd_ot.core import as_plan, marginals
from hfpd_ot.eot import (
    eot_gap_bound,
    eot_objective,
    exact_ot_small,
    gibbs_kernel,
    sinkhorn,
    wasserstein2_1d,
)
from hfpd_ot.errors import CapacityError, ConvergenceError, DimensionError, ParameterError


def lp_vertex_minimum(mu, nu, cost):
    """Brute force over basic feasible solutions of the transport polytope."""
    m, n = cost.shape
    a = np.zeros((m + n, m * n))
    for i in range(m):
        a[i, i * n:(i + 1) * n] = 1
    for j in range(n):
        a[m + j, j::n] = 1
    a, b = a[:-1], np.concatenate([mu, nu])[:-1]
    best = math.inf
    for basis in itertools.combinations(range(m * n), m + n - 1):
        sub = a[:, basis]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, b)
        if np.all(x >= -1e-12):
            best = min(best, float(cost.ravel()[list(basis)] @ x))
    return best


def test_gibbs_zero_cost_is_uniform():
    ideal = gibbs_kernel(np.zeros((3, 4)), 0.7)
    np.testing.assert_allclose(ideal.plan, np.full((3, 4), 1 / 12), atol=1e-15)


def test_gibbs_two_by_two_values():
    ideal = gibbs_kernel([[0.0, 1.0], [1.0, 0.0]], 1.0)
    diag = 1 / (2 + 2 * math.exp(-1))
    off = math.exp(-1) / (2 + 2 * math.exp(-1))
    np.testing.assert_allclose(ideal.plan, [[diag, off], [off, diag]], atol=1e-15)
    assert diag == pytest.approx(0.365529, abs=1e-6)
    assert off == pytest.approx(0.134471, abs=1e-6)


def test_gibbs_small_epsilon_concentrates_on_argmin():
    cost = np.array([[0.3, 1.0, 2.0], [0.9, 0.1, 1.5]])
    ideal = gibbs_kernel(cost, 1e-4)
    assert ideal.plan[1, 1] == pytest.approx(1.0, abs=1e-12)


def test_gibbs_rejects_nonpositive_epsilon():
    with pytest.raises(ParameterError):
        gibbs_kernel(np.ones((2, 2)), 0.0)
    with pytest.raises(ParameterError):
        gibbs_kernel(np.ones((2, 2)), -1.0)


def test_gibbs_with_structural_preference():
    phi = np.array([[0.1, 0.2], [0.3, 0.4]])
    ideal = gibbs_kernel(np.zeros((2, 2)), 1.0, phi)
    np.testing.assert_allclose(ideal.plan, phi, atol=1e-15)


def test_sinkhorn_symmetric_uniform_small_eps():
    cost = np.array([[0.0, 1.0, 4.0], [1.0, 0.0, 1.0], [4.0, 1.0, 0.0]])
    u = np.full(3, 1 / 3)
    sol = sinkhorn(u, u, gibbs_kernel(cost, 0.05))
    assert sol.marginal_error <= 1e-9
    assert np.all(np.diag(sol.plan) > 0.3)
    np.testing.assert_allclose(sol.plan, sol.plan.T, atol=1e-9)


def test_sinkhorn_two_by_two_nominals():
    mu0, nu0 = np.array([0.2, 0.8]), np.array([0.9, 0.1])
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    eps = 0.01
    sol = sinkhorn(mu0, nu0, gibbs_kernel(cost, eps))
    mu, nu = marginals(sol.plan)
    np.testing.assert_allclose(mu, mu0, atol=1e-9)
    np.testing.assert_allclose(nu, nu0, atol=1e-9)
    lp = float(np.sum(exact_ot_small(mu0, nu0, cost) * cost))
    assert lp <= sol.transport_cost(cost) <= lp + eot_gap_bound(mu0, nu0, eps) + 1e-12


def test_sinkhorn_matches_lp_on_random_5x5():
    rng = np.random.default_rng(7)
    cost = rng.random((5, 5))
    mu, nu = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    sol = sinkhorn(mu, nu, gibbs_kernel(cost, 1e-3 * cost.max()))
    lp = float(np.sum(exact_ot_small(mu, nu, cost) * cost))
    assert sol.transport_cost(cost) <= 1.01 * lp


def test_sinkhorn_is_kl_projection():
    rng = np.random.default_rng(1)
    cost = rng.random((3, 4))
    mu, nu = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
    ideal = gibbs_kernel(cost, 0.3)
    sol = sinkhorn(mu, nu, ideal)
    best = eot_objective(sol.plan, ideal)
    # any other coupling moves along the marginal-preserving directions
    for _ in range(200):
        d = rng.normal(size=(3, 4))
        d -= d.mean(axis=1, keepdims=True)
        d -= d.mean(axis=0, keepdims=True)
        t = 0.5 * np.min(sol.plan) / np.max(np.abs(d))
        assert eot_objective(sol.plan + t * d, ideal) >= best - 1e-12


def test_sinkhorn_monotone_in_epsilon():
    rng = np.random.default_rng(5)
    cost = rng.random((4, 4))
    mu, nu = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    costs = [sinkhorn(mu, nu, gibbs_kernel(cost, e)).transport_cost(cost) for e in (1.0, 0.1, 0.01)]
    assert costs[0] >= costs[1] - 1e-9 >= costs[2] - 2e-9


@pytest.mark.parametrize("seed", range(10))
def test_sinkhorn_marginals_random(seed):
    rng = np.random.default_rng(100 + seed)
    m, n = rng.integers(2, 8, size=2)
    cost = rng.random((m, n)) * 3
    mu, nu = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
    sol = sinkhorn(mu, nu, gibbs_kernel(cost, 10 ** rng.uniform(-3, 0)))
    row, col = marginals(sol.plan)
    assert max(np.max(np.abs(row - mu)), np.max(np.abs(col - nu))) <= 1e-9


def test_sinkhorn_twenty_by_twenty_tiny_epsilon():
    grid = np.arange(20.0)
    cost = (grid[:, None] - grid[None, :]) ** 2
    rng = np.random.default_rng(0)
    mu, nu = rng.dirichlet(np.full(20, 3.0)), rng.dirichlet(np.full(20, 3.0))
    sol = sinkhorn(mu, nu, gibbs_kernel(cost, 1e-3))
    assert sol.marginal_error <= 1e-9
    lp = float(np.sum(exact_ot_small(mu, nu, cost) * cost))
    assert sol.transport_cost(cost) == pytest.approx(lp, abs=eot_gap_bound(mu, nu, 1e-3) + 1e-9)


def test_sinkhorn_convergence_error_carries_residual():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ConvergenceError) as info:
        sinkhorn([0.1, 0.9], [0.7, 0.3], gibbs_kernel(cost, 1e-3), tol=1e-15, max_iter=3)
    assert info.value.residual is not None


def test_exact_ot_diagonal_for_equal_marginals():
    mu = np.array([0.1, 0.2, 0.3, 0.4])
    cost = np.ones((4, 4)) - np.eye(4)
    np.testing.assert_allclose(exact_ot_small(mu, mu, cost), np.diag(mu), atol=1e-12)


def test_exact_ot_monotone_coupling_1d():
    x = np.array([0.0, 1.0, 2.5, 4.0])
    y = np.array([0.5, 1.5, 2.0, 5.0])
    cost = (x[:, None] - y[None, :]) ** 2
    u = np.full(4, 0.25)
    np.testing.assert_allclose(exact_ot_small(u, u, cost), np.eye(4) / 4, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_exact_ot_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    cost = rng.random((3, 3))
    mu, nu = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    plan = as_plan(exact_ot_small(mu, nu, cost))
    assert float(np.sum(plan * cost)) == pytest.approx(lp_vertex_minimum(mu, nu, cost), abs=1e-9)


def test_exact_ot_beats_random_feasible_plans():
    rng = np.random.default_rng(9)
    cost = rng.random((4, 5))
    mu, nu = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(5))
    best = float(np.sum(exact_ot_small(mu, nu, cost) * cost))
    for _ in range(100):
        ideal = gibbs_kernel(rng.random((4, 5)) * 5, 1.0)
        plan = sinkhorn(mu, nu, ideal).plan
        assert best <= float(np.sum(plan * cost)) + 1e-9


def test_exact_ot_capacity():
    with pytest.raises(CapacityError):
        exact_ot_small(np.full(21, 1 / 21), np.full(20, 0.05), np.ones((21, 20)))


def test_w2_identity_and_diracs():
    x = np.array([0.0, 1.0, 3.0])
    w = np.array([0.2, 0.3, 0.5])
    assert wasserstein2_1d(w, w, x, x) == 0.0
    assert wasserstein2_1d([1.0], [1.0], [2.0], [-1.5]) == pytest.approx(12.25)


@pytest.mark.parametrize("seed", range(5))
def test_w2_matches_lp(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=10), rng.normal(1.0, 2.0, size=10)
    a, b = rng.dirichlet(np.ones(10)), rng.dirichlet(np.ones(10))
    cost = (x[:, None] - y[None, :]) ** 2
    lp = float(np.sum(exact_ot_small(a, b, cost) * cost))
    assert wasserstein2_1d(a, b, x, y) == pytest.approx(lp, abs=1e-9)
    assert wasserstein2_1d(b, a, y, x) == pytest.approx(wasserstein2_1d(a, b, x, y), abs=1e-14)


def test_w2_dimension_mismatch():
    with pytest.raises(DimensionError):
        wasserstein2_1d([0.5, 0.5], [1.0], [0.0], [1.0])
