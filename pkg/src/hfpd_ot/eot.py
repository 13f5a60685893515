"""Base-level deterministic transport.

Gibbs ideal kernels, log-domain Sinkhorn-Knopp for entropic OT, a dense LP
solver used as an exact oracle at small scale, and exact 1-D squared
Wasserstein distances via the quantile coupling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linprog
from scipy.special import logsumexp

from .core import as_cost, as_distribution, as_plan
from .errors import (
    CapacityError,
    ConvergenceError,
    DegeneracyError,
    DimensionError,
    ParameterError,
)

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000
EXACT_OT_MAX_VARIABLES = 400
POLISH_AFTER = 2000


@dataclass(frozen=True)
class IdealDesign:
    """Normalized Gibbs kernel ``exp(-C/eps) * phi``.

    The kernel is kept in log space: with small ``epsilon`` most entries of
    ``exp(-C/eps)`` underflow, so ``log_plan`` is authoritative and ``plan`` is
    its (possibly underflowing) exponential.
    """

    log_plan: NDArray[np.float64]
    epsilon: float
    cost: NDArray[np.float64]
    log_phi: NDArray[np.float64]

    @property
    def plan(self) -> NDArray[np.float64]:
        return np.exp(self.log_plan)

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_plan.shape


@dataclass(frozen=True)
class EotSolution:
    plan: NDArray[np.float64]
    iterations: int
    marginal_error: float
    log_u: NDArray[np.float64]
    log_v: NDArray[np.float64]

    def transport_cost(self, cost: ArrayLike) -> float:
        return float(np.sum(self.plan * np.asarray(cost, dtype=float)))


def gibbs_kernel(cost: ArrayLike, epsilon: float, phi: ArrayLike | None = None) -> IdealDesign:
    """Ideal plan proportional to ``exp(-C/epsilon) * phi`` (phi uniform by default)."""
    c = as_cost(cost)
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon!r}")
    if phi is None:
        log_phi = np.full(c.shape, -np.log(c.size))
    else:
        phi = as_plan(phi)
        if phi.shape != c.shape:
            raise DimensionError(f"phi shape {phi.shape} != cost shape {c.shape}")
        with np.errstate(divide="ignore"):
            log_phi = np.log(phi)
    logits = -c / epsilon + log_phi
    if not np.any(np.isfinite(logits)):
        raise DegeneracyError("structural preference phi vanishes everywhere")
    log_plan = logits - logsumexp(logits)
    return IdealDesign(log_plan=log_plan, epsilon=float(epsilon), cost=c, log_phi=log_phi)


def _marginal_error(log_plan, mu, nu):
    p = np.exp(log_plan)
    return max(np.max(np.abs(p.sum(axis=1) - mu)), np.max(np.abs(p.sum(axis=0) - nu)))


def _lse_rows(a):
    top = a.max(axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    return top + np.log(np.exp(a - top[:, None]).sum(axis=1))


def _sinkhorn_sweeps(log_k, log_mu, log_nu, mu, f, g, tol, max_iter):
    # returns potentials, sweeps used and the last row violation
    log_kt = np.ascontiguousarray(log_k.T)
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = log_mu - _lse_rows(log_k + g[None, :])
        g = log_nu - _lse_rows(log_kt + f[None, :])
        # columns are exact after the g-update; rows carry the residual
        if it % 5 == 0 or it == max_iter:
            rows = np.exp(f[:, None] + log_k + g[None, :]).sum(axis=1)
            err = float(np.max(np.abs(rows - mu)))
            if err <= tol:
                break
    return f, g, it, err


def _dual_increase(p, mu, nu, df, dg):
    # exact change of the dual objective for a step, without cancellation
    shift = df[:, None] + dg[None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        growth = np.sum(p * np.expm1(shift))
    return df @ mu + dg @ nu - growth


def _newton_polish(log_k, mu, nu, f, g, tol, max_iter=200):
    """Levenberg-Marquardt ascent on the smooth Sinkhorn dual.

    ``max <f, mu> + <g, nu> - sum exp(f_i + g_j + log K_ij)``; the gauge
    freedom ``(f + c, g - c)`` is removed by freezing the last entry of g.
    The damping handles the (numerically) singular Hessians that appear when
    the plan splits into blocks coupled only through underflowed entries.
    """
    m, n = log_k.shape
    damping = 0.0
    err = np.inf
    for _ in range(max_iter):
        p = np.exp(f[:, None] + log_k + g[None, :])
        r, c = p.sum(axis=1), p.sum(axis=0)
        err = float(max(np.max(np.abs(mu - r)), np.max(np.abs(nu - c))))
        if err <= tol:
            break
        grad = np.concatenate([mu - r, (nu - c)[:-1]])
        hess = np.zeros((m + n - 1, m + n - 1))
        hess[:m, :m] = np.diag(r)
        hess[m:, m:] = np.diag(c[:-1])
        hess[:m, m:] = p[:, :-1]
        hess[m:, :m] = p[:, :-1].T
        evals, evecs = np.linalg.eigh(hess)
        evals = np.maximum(evals, 0.0)
        proj = evecs.T @ grad
        damping = max(damping, 1e-14 * evals[-1])
        for _ in range(60):
            step = evecs @ (proj / (evals + damping))
            df, dg = step[:m], np.concatenate([step[m:], [0.0]])
            predicted = grad @ step - 0.5 * step @ (hess @ step)
            actual = _dual_increase(p, mu, nu, df, dg)
            if np.isfinite(actual) and actual >= 0.1 * predicted:
                f, g = f + df, g + dg
                damping *= 0.1
                break
            damping = max(10.0 * damping, 1e-300)
        else:
            break
    return f, g, err


def sinkhorn(
    mu0: ArrayLike,
    nu0: ArrayLike,
    ideal: IdealDesign,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> EotSolution:
    """Minimize ``KL(pi || pi_I)`` over plans with marginals ``(mu0, nu0)``.

    Log-domain alternating projections on the dual potentials, warm-started
    by a short epsilon-scaling schedule when ``epsilon`` is small relative to
    the cost spread (the fixed point is unchanged; only the path to it is).
    Convergence is the max-norm violation of both marginals.

    Raises
    ------
    ConvergenceError
        If the marginal error is still above ``tol`` after ``max_iter`` sweeps.
    DegeneracyError
        If a row or column of the kernel is identically zero.
    """
    mu = as_distribution(mu0, interior=True)
    nu = as_distribution(nu0, interior=True)
    log_k = np.asarray(ideal.log_plan, dtype=float)
    if log_k.shape != (mu.size, nu.size):
        raise DimensionError(f"kernel shape {log_k.shape} != ({mu.size}, {nu.size})")
    if np.any(np.all(np.isneginf(log_k), axis=1)) or np.any(np.all(np.isneginf(log_k), axis=0)):
        raise DegeneracyError("kernel has an all-zero row or column")
    if tol <= 0 or max_iter < 1:
        raise ParameterError("tol must be positive and max_iter >= 1")

    log_mu, log_nu = np.log(mu), np.log(nu)
    f = np.zeros(mu.size)
    g = np.zeros(nu.size)
    used = 0
    eps = ideal.epsilon
    spread = float(np.ptp(ideal.cost))
    stage = spread
    if spread > 0 and eps < spread:
        # potentials are carried over as stage * (f, g), the cost-scale duals
        prev = None
        while stage > eps:
            kernel = -ideal.cost / stage + ideal.log_phi
            if prev is not None:
                f, g = f * prev / stage, g * prev / stage
            budget = max(1, min(200, max_iter - used - 1))
            f, g, it, _ = _sinkhorn_sweeps(kernel, log_mu, log_nu, mu, f, g, 1e-4, budget)
            used += it
            prev = stage
            stage /= 4.0
        # final kernel is normalized, so its log-normalizer moves into f
        f = f * prev / eps + logsumexp(-ideal.cost / eps + ideal.log_phi)
        g = g * prev / eps
    sweeps = max(1, min(max_iter - used, POLISH_AFTER))
    f, g, it, err = _sinkhorn_sweeps(log_k, log_mu, log_nu, mu, f, g, tol, sweeps)
    used += it
    if err > tol and used < max_iter:
        # sweeps stall when eps is tiny next to the cost spread
        f, g, _ = _newton_polish(log_k, mu, nu, f, g, tol, max_iter=min(200, max_iter - used))
    log_p = f[:, None] + log_k + g[None, :]
    err = float(_marginal_error(log_p, mu, nu))
    if err > tol:
        raise ConvergenceError(
            f"sinkhorn did not reach tol={tol:g} in {max_iter} iterations (error {err:.3e})",
            iterations=used,
            residual=err,
        )
    return EotSolution(plan=np.exp(log_p), iterations=used, marginal_error=err, log_u=f, log_v=g)


def eot_objective(plan: ArrayLike, ideal: IdealDesign) -> float:
    """``KL(plan || pi_I)`` evaluated in log space."""
    p = np.asarray(plan, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - ideal.log_plan), 0.0)
    return float(np.sum(terms))


def exact_ot_small(mu0: ArrayLike, nu0: ArrayLike, cost: ArrayLike) -> NDArray[np.float64]:
    """Exact minimizer of ``<C, pi>`` over plans with marginals ``(mu0, nu0)``.

    Dense LP solved with HiGHS' dual simplex; only meant as an oracle for
    problems with at most 400 variables.
    """
    mu = as_distribution(mu0)
    nu = as_distribution(nu0)
    c = as_cost(cost)
    m, n = mu.size, nu.size
    if c.shape != (m, n):
        raise DimensionError(f"cost shape {c.shape} != ({m}, {n})")
    if m * n > EXACT_OT_MAX_VARIABLES:
        raise CapacityError(f"exact_ot_small supports m*n <= {EXACT_OT_MAX_VARIABLES}, got {m * n}")
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([mu, nu])
    # one marginal equation is redundant; dropping it keeps the system full rank
    res = linprog(
        c.ravel(),
        A_eq=a_eq[:-1],
        b_eq=b_eq[:-1],
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise ConvergenceError(f"LP solver failed: {res.message}")
    plan = np.maximum(res.x.reshape(m, n), 0.0)
    return plan / plan.sum()


def wasserstein2_1d(
    mu: ArrayLike, nu: ArrayLike, support_x: ArrayLike, support_y: ArrayLike
) -> float:
    """Squared 2-Wasserstein distance between two weighted point clouds on the line.

    Uses the monotone (quantile) coupling, which is optimal for the squared
    Euclidean cost in one dimension. Supports need not be sorted.
    """
    a = np.asarray(mu, dtype=float)
    b = np.asarray(nu, dtype=float)
    x = np.asarray(support_x, dtype=float)
    y = np.asarray(support_y, dtype=float)
    if a.ndim != 1 or b.ndim != 1 or a.shape != x.shape or b.shape != y.shape:
        raise DimensionError("weights and supports must be matching 1-D vectors")
    if np.any(a < 0) or np.any(b < 0):
        raise ParameterError("weights must be nonnegative")
    a = a / a.sum()
    b = b / b.sum()
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, a = x[ox], a[ox]
    y, b = y[oy], b[oy]
    ca, cb = np.cumsum(a), np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    levels = np.unique(np.concatenate([[0.0], ca, cb]))
    mids = 0.5 * (levels[:-1] + levels[1:])
    widths = np.diff(levels)
    ix = np.minimum(np.searchsorted(ca, mids, side="right"), x.size - 1)
    iy = np.minimum(np.searchsorted(cb, mids, side="right"), y.size - 1)
    return float(np.sum(widths * (x[ix] - y[iy]) ** 2))


def eot_gap_bound(mu0: ArrayLike, nu0: ArrayLike, epsilon: float) -> float:
    """Upper bound on ``<C, pi_eps> - <C, pi_LP>`` for uniform ``phi``.

    Comparing the entropic objective ``<C, pi>/eps - H(pi)`` at both plans gives
    ``gap <= eps * (H(pi_eps) - H(pi_LP))``, and any coupling satisfies
    ``max(H(mu), H(nu)) <= H(pi) <= H(mu) + H(nu)``.
    """
    mu = as_distribution(mu0)
    nu = as_distribution(nu0)
    h_mu = -float(np.sum(mu[mu > 0] * np.log(mu[mu > 0])))
    h_nu = -float(np.sum(nu[nu > 0] * np.log(nu[nu > 0])))
    return float(epsilon * min(h_mu, h_nu))


__all__ = [
    "IdealDesign",
    "EotSolution",
    "gibbs_kernel",
    "sinkhorn",
    "eot_objective",
    "exact_ot_small",
    "wasserstein2_1d",
    "eot_gap_bound",
]
