"""Stochastic quasi-Newton solver for the optimal Kantorovitch potentials.

The dual objective is ``rho(l) = <l, theta> + log Z(l) - 1`` with gradient
``theta - E[R(pi)]`` under the hyperprior at ``l``. Gradients are estimated by
HMC; the inverse Hessian is built from BFGS curvature pairs and the step
length from two gradients along the search direction, so ``Z`` is never
evaluated. Iterates are projected onto the nonnegative orthant.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DefinitenessError, ParameterError
from .hyperprior import HyperpriorParams, KnowledgeConstraints, moment_vector
from .sampler import HmcConfig, HmcDiagnostics, hmc_sample, mc_standard_error

CURVATURE_TOL = 1e-12
STEP_MAX = 1.0


@dataclass(frozen=True)
class GradientEstimate:
    gradient: NDArray[np.float64]
    standard_error: NDArray[np.float64]
    mean_moments: NDArray[np.float64]
    moment_covariance: NDArray[np.float64]
    diagnostics: HmcDiagnostics
    last_plan: NDArray[np.float64] = field(repr=False)


def dual_gradient_estimate(
    potentials: ArrayLike,
    constraints: KnowledgeConstraints,
    sampler_config: HmcConfig,
    n_samp: int,
    *,
    initial: ArrayLike | None = None,
) -> GradientEstimate:
    """Monte-Carlo estimate of ``theta - E[R(pi)]`` at the given potentials.

    ``n_samp`` counts draws across all chains; standard errors account for
    autocorrelation through the effective sample size.
    """
    if n_samp < 100:
        raise ParameterError("n_samp must be >= 100")
    params = HyperpriorParams(constraints, tuple(np.asarray(potentials, dtype=float)))
    chains = sampler_config.chains
    per_chain = -(-n_samp // chains)
    samples, diag = hmc_sample(params.target(), sampler_config, per_chain, initial=initial)
    r = moment_vector(samples, constraints).reshape(chains, per_chain, 2)
    flat = r.reshape(-1, 2)
    mean_r = flat.mean(axis=0)
    return GradientEstimate(
        gradient=constraints.theta - mean_r,
        standard_error=mc_standard_error(r),
        mean_moments=mean_r,
        moment_covariance=np.cov(flat, rowvar=False),
        diagnostics=diag,
        last_plan=samples[per_chain - 1],
    )


def bfgs_update(h: ArrayLike, s: ArrayLike, n: ArrayLike) -> tuple[NDArray[np.float64], bool]:
    """Inverse-Hessian BFGS update ``(I - c s n^T) H (I - c n s^T) + c s s^T``, ``c = 1/(n^T s)``.

    Returns ``(H_new, applied)``. Pairs with ``n^T s <= 1e-12 |n| |s|`` are
    rejected and ``H`` is returned unchanged.
    """
    h = np.asarray(h, dtype=float)
    s = np.asarray(s, dtype=float)
    n = np.asarray(n, dtype=float)
    ns = float(n @ s)
    if ns <= CURVATURE_TOL * np.linalg.norm(n) * np.linalg.norm(s) or abs(ns) < CURVATURE_TOL:
        return h.copy(), False
    c = 1.0 / ns
    left = np.eye(h.shape[0]) - c * np.outer(s, n)
    out = left @ h @ left.T + c * np.outer(s, s)
    return 0.5 * (out + out.T), True


def quadratic_step_size(
    d: ArrayLike, grad_here: ArrayLike, grad_at_d: ArrayLike, step_max: float = STEP_MAX
) -> tuple[float, bool]:
    """Line minimizer of the local quadratic model from two gradients.

    Returns ``(step, fallback)``; ``fallback`` is set when the curvature
    estimate along ``d`` is not positive and the step falls back to 1.
    """
    d = np.asarray(d, dtype=float)
    g0 = np.asarray(grad_here, dtype=float)
    g1 = np.asarray(grad_at_d, dtype=float)
    if not np.any(d):
        raise ParameterError("search direction must be nonzero")
    curvature = float(d @ (g1 - g0))
    if curvature <= CURVATURE_TOL:
        return 1.0, True
    step = -float(d @ g0) / curvature
    if step <= 0:
        return min(1.0, step_max), True
    return min(step, step_max), False


def newton_decrement(grad: ArrayLike, h_inverse: ArrayLike) -> float:
    """``g^T H^{-1} g`` using the inverse-Hessian approximation directly."""
    g = np.asarray(grad, dtype=float)
    h = np.asarray(h_inverse, dtype=float)
    if not np.allclose(h, h.T, atol=1e-12, rtol=0):
        raise DefinitenessError("inverse Hessian is not symmetric")
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError("inverse Hessian is not positive definite") from exc
    return max(float(g @ h @ g), 0.0)


@dataclass(frozen=True)
class DualState:
    potentials: tuple[float, float]
    inverse_hessian: tuple[tuple[float, float], tuple[float, float]]
    gradient_estimate: tuple[float, float]
    gradient_se: tuple[float, float]
    step_size: float
    newton_decrement: float
    iteration: int
    step_fallback: bool = False
    curvature_rejected: bool = False
    hessian_reset: bool = False


@dataclass
class SolveReport:
    trajectory: list[DualState] = field(default_factory=list)
    diagnostics: list[HmcDiagnostics] = field(default_factory=list)
    converged: bool = False
    wall_clock: list[float] = field(default_factory=list)
    mean_moments: tuple[float, float] | None = None
    moments_se: tuple[float, float] | None = None

    @property
    def final(self) -> DualState:
        return self.trajectory[-1]

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "converged": self.converged,
            "iterations": len(self.trajectory),
            "trajectory": [asdict(s) for s in self.trajectory],
            "diagnostics": [d.to_dict() for d in self.diagnostics],
            "final_potentials": list(self.final.potentials) if self.trajectory else None,
            "final_newton_decrement": self.final.newton_decrement if self.trajectory else None,
            "mean_moments": self.mean_moments,
            "moments_se": self.moments_se,
        }
        if include_timing:
            out["wall_clock"] = self.wall_clock
        return out

    def to_json(self, include_timing: bool = True, **kwargs) -> str:
        return json.dumps(self.to_dict(include_timing), **kwargs)


def _project(lam):
    return np.maximum(lam, 0.0)


def _projected_gradient(lam, g):
    pg = g.copy()
    pg[(lam <= 0) & (g > 0)] = 0.0
    return pg


def _covariance_inverse(cov, lam, pg):
    cov = 0.5 * (cov + cov.T)
    free = ~((lam <= 0) & (pg == 0))
    out = np.zeros((2, 2))
    sub = cov[np.ix_(free, free)]
    if not free.any():
        return None
    try:
        np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        return None
    out[np.ix_(free, free)] = np.linalg.inv(sub)
    # pinned coordinates keep a unit diagonal so the matrix stays definite
    out[~free, ~free] = 1.0
    return 0.5 * (out + out.T)


def _seed_for(base: int, iteration: int, slot: int) -> int:
    ss = np.random.SeedSequence([base, iteration, slot])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def solve_potentials(
    constraints: KnowledgeConstraints,
    tol: float,
    sampler_config: HmcConfig,
    n_samp: int,
    max_outer: int = 30,
    *,
    initial_potentials: ArrayLike = (1.0, 1.0),
    common_random_numbers: bool = False,
    confirm_with_covariance: bool = True,
) -> tuple[HyperpriorParams, SolveReport]:
    """Stochastic BFGS on the dual, stopping when the Newton decrement is below ``tol``.

    Each outer iteration estimates the gradient at the current point and at
    the tentative point ``proj(l + d)``, ``d = -H g``. That pair sizes the step
    and also supplies the BFGS curvature pair ``s = proj(l + d) - l``,
    ``n = g~ - g``. Non-convergence within ``max_outer`` is reported, not
    raised.

    When the BFGS decrement first drops below ``tol`` it is checked against
    the decrement under the sampled covariance of ``R`` (the exact dual
    Hessian). If that check fails, ``H`` is reset to the inverse covariance
    and the iteration continues. Pass ``confirm_with_covariance=False`` for
    the plain BFGS stopping rule.
    """
    if not tol > 0:
        raise ParameterError("tol must be positive")
    if max_outer < 1:
        raise ParameterError("max_outer must be >= 1")
    lam = _project(np.asarray(initial_potentials, dtype=float))
    h = np.eye(2)
    report = SolveReport()

    def estimate(point, iteration, slot, init):
        cfg = replace(sampler_config, seed=_seed_for(sampler_config.seed, iteration, slot))
        return dual_gradient_estimate(point, constraints, cfg, n_samp, initial=init)

    t0 = time.perf_counter()
    warm = None
    for it in range(1, max_outer + 1):
        est = estimate(lam, it, 0, warm)
        warm = est.last_plan
        g = est.gradient
        pg = _projected_gradient(lam, g)
        dec = newton_decrement(pg, h)
        report.diagnostics.append(est.diagnostics)
        reset = False
        if dec <= tol and confirm_with_covariance:
            # the exact dual Hessian is Cov[R]; BFGS pairs from nearly collinear
            # steps can badly underestimate H off the path direction
            h_cov = _covariance_inverse(est.moment_covariance, lam, pg)
            if h_cov is not None and newton_decrement(pg, h_cov) > tol:
                h, dec, reset = h_cov, newton_decrement(pg, h_cov), True
        if dec <= tol:
            report.trajectory.append(_state(lam, h, est, 0.0, dec, it))
            report.wall_clock.append(time.perf_counter() - t0)
            report.converged = True
            break
        d = -h @ pg
        d[(lam <= 0) & (d < 0)] = 0.0
        if not np.any(d):
            d = -pg
        tentative = _project(lam + d)
        # with common random numbers both line-search gradients share a seed
        est_t = estimate(tentative, it, 0 if common_random_numbers else 1, warm)
        s_t = tentative - lam
        step, fallback = quadratic_step_size(s_t, g, est_t.gradient)
        h_new, applied = bfgs_update(h, s_t, est_t.gradient - g)
        report.trajectory.append(_state(lam, h, est, step, dec, it, fallback, not applied, reset))
        report.wall_clock.append(time.perf_counter() - t0)
        lam, h = _project(lam + step * s_t), h_new
    else:
        est = estimate(lam, max_outer + 1, 0, warm)
        report.diagnostics.append(est.diagnostics)
        pg = _projected_gradient(lam, est.gradient)
        report.trajectory.append(_state(lam, h, est, 0.0, newton_decrement(pg, h), max_outer + 1))
        report.wall_clock.append(time.perf_counter() - t0)
    report.mean_moments = tuple(float(v) for v in est.mean_moments)
    report.moments_se = tuple(float(v) for v in est.standard_error)
    return HyperpriorParams(constraints, tuple(float(v) for v in lam)), report


def _state(lam, h, est, step, dec, it, fallback=False, rejected=False, reset=False):
    return DualState(
        potentials=(float(lam[0]), float(lam[1])),
        inverse_hessian=((float(h[0, 0]), float(h[0, 1])), (float(h[1, 0]), float(h[1, 1]))),
        gradient_estimate=(float(est.gradient[0]), float(est.gradient[1])),
        gradient_se=(float(est.standard_error[0]), float(est.standard_error[1])),
        step_size=float(step),
        newton_decrement=float(dec),
        iteration=it,
        step_fallback=fallback,
        curvature_rejected=rejected,
        hessian_reset=reset,
    )


__all__ = [
    "GradientEstimate",
    "DualState",
    "SolveReport",
    "dual_gradient_estimate",
    "bfgs_update",
    "quadratic_step_size",
    "newton_decrement",
    "solve_potentials",
]
