"""Parametric hyperprior over finite transport plans.

The unnormalized log-density of a plan ``pi`` (an ``m x n`` point of the
open simplex) is

    -(lI1 + l1) KL(mu || mu0) - (lI2 + l2) KL(nu || nu0) - (1 + alpha) KL(pi || pi_I)

where ``mu, nu`` are the row/column sums of ``pi``, ``lI`` are the fixed
ideal-design potentials, ``l`` the Kantorovitch potentials being solved for and
``alpha`` an optional annealing weight (0 unless set). Setting ``l = 0`` gives
the adapted ideal ``log S~``. The additive normalizing constant is never
computed except by quadrature on 2 x 2 problems.

All evaluators accept stacks of plans with shape ``(..., m, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .core import LOG_FLOOR, as_distribution, as_plan, kl_divergence, marginals
from .eot import IdealDesign, gibbs_kernel, sinkhorn
from .errors import (
    CapacityError,
    ConvergenceError,
    DegeneracyError,
    DimensionError,
    DomainError,
    ParameterError,
)


@dataclass(frozen=True)
class KnowledgeConstraints:
    """Nominal marginals, KL radii and ideal designs defining the hyperprior."""

    mu0: NDArray[np.float64]
    nu0: NDArray[np.float64]
    eta: float
    zeta: float
    lambda_ideal: tuple[float, float]
    ideal: IdealDesign
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mu0", as_distribution(self.mu0, interior=True))
        object.__setattr__(self, "nu0", as_distribution(self.nu0, interior=True))
        if self.ideal.shape != (self.mu0.size, self.nu0.size):
            raise DimensionError(
                f"ideal plan shape {self.ideal.shape} != ({self.mu0.size}, {self.nu0.size})"
            )
        if not (self.eta >= 0 and self.zeta >= 0):
            raise ParameterError("KL radii must be nonnegative")
        li = tuple(float(v) for v in self.lambda_ideal)
        if len(li) != 2 or min(li) < 0:
            raise ParameterError("lambda_ideal must be a nonnegative pair")
        object.__setattr__(self, "lambda_ideal", li)
        if self.alpha is not None and not self.alpha > 0:
            raise ParameterError("alpha must be positive when given")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu0.size, self.nu0.size

    @property
    def theta(self) -> NDArray[np.float64]:
        return np.array([self.eta, self.zeta], dtype=float)

    @property
    def kl_weight(self) -> float:
        return 1.0 + (self.alpha or 0.0)

    @cached_property
    def nominal_plan(self) -> NDArray[np.float64] | None:
        """Sinkhorn plan between the nominals, or ``None`` if scaling fails."""
        try:
            return sinkhorn(self.mu0, self.nu0, self.ideal).plan
        except (ConvergenceError, DegeneracyError):
            return None


def make_constraints(
    mu0: ArrayLike,
    nu0: ArrayLike,
    cost: ArrayLike,
    epsilon: float,
    eta: float = np.inf,
    zeta: float = np.inf,
    lambda_ideal: tuple[float, float] = (0.0, 0.0),
    alpha: float | None = None,
    phi: ArrayLike | None = None,
) -> KnowledgeConstraints:
    return KnowledgeConstraints(
        mu0=np.asarray(mu0, dtype=float),
        nu0=np.asarray(nu0, dtype=float),
        eta=float(eta),
        zeta=float(zeta),
        lambda_ideal=lambda_ideal,
        ideal=gibbs_kernel(cost, epsilon, phi),
        alpha=alpha,
    )


@dataclass(frozen=True)
class HyperpriorParams:
    constraints: KnowledgeConstraints
    potentials: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        lam = tuple(float(v) for v in self.potentials)
        if len(lam) != 2 or not min(lam) >= 0:
            raise ParameterError(f"potentials must be a nonnegative pair, got {self.potentials!r}")
        object.__setattr__(self, "potentials", lam)

    @property
    def shape(self) -> tuple[int, int]:
        return self.constraints.shape

    @property
    def total_weights(self) -> tuple[float, float]:
        li = self.constraints.lambda_ideal
        return li[0] + self.potentials[0], li[1] + self.potentials[1]

    def target(self) -> HyperpriorTarget:
        return HyperpriorTarget(self)


def _check_stack(plan, shape):
    p = np.asarray(plan, dtype=float)
    if p.shape[-2:] != tuple(shape):
        raise DimensionError(f"plan shape {p.shape[-2:]} != {tuple(shape)}")
    return p


def _log_ratio_term(p, log_ref):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = p * (np.log(p) - log_ref)
    return np.where(p > 0, t, 0.0)


def _weighted_log_density(p, constraints, weights):
    mu, nu = marginals(p)
    w1, w2 = weights
    kl_mu = kl_divergence(mu, constraints.mu0)
    kl_nu = kl_divergence(nu, constraints.nu0)
    kl_pi = _log_ratio_term(p, constraints.ideal.log_plan)
    kl_pi = kl_pi.reshape(*p.shape[:-2], -1).sum(axis=-1)
    out = -w1 * kl_mu - w2 * kl_nu - constraints.kl_weight * kl_pi
    return float(out) if np.ndim(out) == 0 else out


def log_density_tilde(plan: ArrayLike, constraints: KnowledgeConstraints):
    """Unnormalized log of the adapted ideal (potentials set to zero)."""
    p = _check_stack(plan, constraints.shape)
    return _weighted_log_density(p, constraints, constraints.lambda_ideal)


def log_density(plan: ArrayLike, params: HyperpriorParams):
    """Unnormalized log hyperprior density at ``plan`` (or a stack of plans)."""
    p = _check_stack(plan, params.shape)
    return _weighted_log_density(p, params.constraints, params.total_weights)


def grad_log_density(plan: ArrayLike, params: HyperpriorParams) -> NDArray[np.float64]:
    """Coordinate gradient of :func:`log_density`, all ``m*n`` entries treated as free.

    The sampler composes this with the chart Jacobian; constants along the
    all-ones direction drop out there.
    """
    p = _check_stack(plan, params.shape)
    if np.any(p <= 0):
        raise DomainError("gradient is undefined on the simplex boundary")
    return _grad(p, params.constraints, params.total_weights)


def _grad(p, constraints, weights):
    mu, nu = marginals(p)
    w1, w2 = weights
    g_mu = -w1 * (np.log(mu) - np.log(constraints.mu0) + 1.0)
    g_nu = -w2 * (np.log(nu) - np.log(constraints.nu0) + 1.0)
    g_pi = -constraints.kl_weight * (np.log(p) - constraints.ideal.log_plan + 1.0)
    return g_pi + g_mu[..., :, None] + g_nu[..., None, :]


def moment_vector(plan: ArrayLike, constraints: KnowledgeConstraints) -> NDArray[np.float64]:
    """``R(pi) = (KL(mu || mu0), KL(nu || nu0))``; trailing axis of length 2."""
    p = _check_stack(plan, constraints.shape)
    mu, nu = marginals(p)
    r = np.stack(
        [np.asarray(kl_divergence(mu, constraints.mu0)), np.asarray(kl_divergence(nu, constraints.nu0))],
        axis=-1,
    )
    return r


def expected_plan(samples: ArrayLike) -> NDArray[np.float64]:
    """Entrywise mean of sampled plans."""
    s = np.asarray(samples, dtype=float)
    if s.ndim != 3 or s.shape[0] == 0:
        raise ParameterError("expected_plan needs a nonempty stack of plans with shape (k, m, n)")
    mean = s.mean(axis=0)
    return mean / mean.sum()


class HyperpriorTarget:
    """Log-density-with-gradient adapter used by the HMC sampler."""

    def __init__(self, params: HyperpriorParams):
        self.params = params
        self.shape = params.shape
        self._log_mu0 = np.log(params.constraints.mu0)
        self._log_nu0 = np.log(params.constraints.nu0)

    def logp_grad(self, plans):
        # fused evaluation for strictly positive plans (the chart guarantees it)
        c = self.params.constraints
        w1, w2 = self.params.total_weights
        k = c.kl_weight
        p = plans
        mu = p.sum(axis=-1)
        nu = p.sum(axis=-2)
        lr_mu = np.log(mu) - self._log_mu0
        lr_nu = np.log(nu) - self._log_nu0
        lr_pi = np.log(p) - c.ideal.log_plan
        logp = (
            -w1 * np.einsum("...i,...i->...", mu, lr_mu)
            - w2 * np.einsum("...j,...j->...", nu, lr_nu)
            - k * np.einsum("...ij,...ij->...", p, lr_pi)
        )
        grad = -k * (lr_pi + 1.0)
        grad += (-w1 * (lr_mu + 1.0))[..., :, None]
        grad += (-w2 * (lr_nu + 1.0))[..., None, :]
        return logp, grad

    def initial_plan(self) -> NDArray[np.float64]:
        # entries of the hyperprior scale roughly like 1 / (1 + excess log-cost)
        c = self.params.constraints
        excess = c.kl_weight * (c.ideal.log_plan.max() - c.ideal.log_plan)
        p = 1.0 / (1.0 + excess)
        p = p / p.sum()
        # for large potentials the mass concentrates on the nominal plan, and
        # the chart moves slowly along the narrow ridge around it
        if c.nominal_plan is not None:
            w = 1.0 / (1.0 + min(self.params.total_weights))
            p = w * p + (1.0 - w) * c.nominal_plan / c.nominal_plan.sum()
        return p


@dataclass(frozen=True)
class ConditionalSlice:
    """Unnormalized log full conditional of one contract, other entries fixed.

    The last entry ``(m-1, n-1)`` absorbs the slack, so the contract ranges
    over ``(0, upper)``.
    """

    params: HyperpriorParams
    base: NDArray[np.float64] = field(repr=False)
    index: tuple[int, int]
    upper: float

    def plans(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p = np.broadcast_to(self.base, t.shape + self.base.shape).copy()
        k, l = self.index
        p[..., k, l] = t
        p[..., -1, -1] = self.upper - t
        return p

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        inside = (t_arr > 0) & (t_arr < self.upper)
        safe = np.where(inside, t_arr, 0.5 * self.upper)
        vals = np.asarray(log_density(self.plans(safe), self.params)).reshape(np.shape(safe))
        out = np.where(inside, vals, -np.inf)
        return float(out) if out.ndim == 0 else out


def conditional_slice_log_density(
    plan: ArrayLike, k: int, l: int, params: HyperpriorParams
) -> ConditionalSlice:
    p = as_plan(plan)
    m, n = params.shape
    if p.shape != (m, n):
        raise DimensionError(f"plan shape {p.shape} != {(m, n)}")
    if not (0 <= k < m and 0 <= l < n) or (k, l) == (m - 1, n - 1):
        raise DomainError("(k, l) must index a contract other than the dependent last entry")
    rest = p.copy()
    rest[k, l] = 0.0
    rest[-1, -1] = 0.0
    c_kl = float(rest.sum())
    if not c_kl < 1.0:
        raise DomainError(f"complement mass {c_kl!r} leaves no room for the contract")
    return ConditionalSlice(params=params, base=p, index=(k, l), upper=1.0 - c_kl)


# ---------------------------------------------------------------------------
# quadrature for 2 x 2 plans


@dataclass(frozen=True)
class QuadratureSpec:
    """Gauss-Legendre order per integration axis."""

    order: int = 64

    def __post_init__(self):
        if self.order < 8:
            raise ParameterError("quadrature order must be >= 8")

    def nodes(self):
        x, w = leggauss(self.order)
        return 0.5 * (x + 1.0), 0.5 * w


def _require_2x2(params_or_constraints):
    if tuple(params_or_constraints.shape) != (2, 2):
        raise CapacityError("quadrature routines only support 2 x 2 plans")


def _plans_2x2(p11, p12, p21):
    p11, p12, p21 = np.broadcast_arrays(p11, p12, p21)
    p = np.empty(p11.shape + (2, 2))
    p[..., 0, 0] = p11
    p[..., 0, 1] = p12
    p[..., 1, 0] = p21
    p[..., 1, 1] = 1.0 - p11 - p12 - p21
    return p


def density_2x2(params: HyperpriorParams, p11, p12, p21):
    """Unnormalized hyperprior density in the free coordinates ``(p11, p12, p21)``."""
    _require_2x2(params)
    p = _plans_2x2(p11, p12, p21)
    inside = np.all(p > 0, axis=(-2, -1))
    p = np.where(inside[..., None, None], p, 0.25)
    return np.where(inside, np.exp(log_density(p, params)), 0.0)


def simplex_lattice(resolution: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Interior points ``(i/r, j/r)`` with ``i, j >= 1`` and ``i + j < r``."""
    if resolution < 3:
        raise ParameterError("lattice resolution must be >= 3")
    i, j = np.meshgrid(np.arange(1, resolution), np.arange(1, resolution), indexing="ij")
    keep = i + j < resolution
    return i[keep] / resolution, j[keep] / resolution


def marginal_density_grid_2x2(
    params: HyperpriorParams, pi11: ArrayLike, pi12: ArrayLike, quad: QuadratureSpec = QuadratureSpec()
) -> NDArray[np.float64]:
    """Unnormalized marginal density of ``(pi11, pi12)``, integrating out ``pi21``.

    Points outside the open 2-simplex evaluate to 0.
    """
    _require_2x2(params)
    a, b = np.broadcast_arrays(np.asarray(pi11, dtype=float), np.asarray(pi12, dtype=float))
    length = 1.0 - a - b
    inside = (a > 0) & (b > 0) & (length > 0)
    length = np.where(inside, length, 0.5)
    t, w = quad.nodes()
    p21 = length[..., None] * t
    dens = density_2x2(params, a[..., None], b[..., None], p21)
    out = length * np.sum(w * dens, axis=-1)
    return np.where(inside, out, 0.0)


class SimplexQuadrature2x2:
    """Product Gauss-Legendre rule on the 3-simplex of 2 x 2 plans.

    Collapsed coordinates ``p11 = u``, ``p12 = (1-u) v``,
    ``p21 = (1-u)(1-v) w`` map the unit cube onto the simplex with Jacobian
    ``(1-u)^2 (1-v)``. The adapted-ideal log-density and moment vector are
    tabulated once, so partition functions for many potentials are cheap.
    """

    def __init__(self, constraints: KnowledgeConstraints, quad: QuadratureSpec = QuadratureSpec()):
        _require_2x2(constraints)
        self.constraints = constraints
        self.quad = quad
        t, w = quad.nodes()
        u, v, s = np.meshgrid(t, t, t, indexing="ij")
        wu, wv, ws = np.meshgrid(w, w, w, indexing="ij")
        p11 = u
        p12 = (1 - u) * v
        p21 = (1 - u) * (1 - v) * s
        plans = _plans_2x2(p11, p12, p21).reshape(-1, 2, 2)
        plans = np.maximum(plans, LOG_FLOOR)
        log_w = np.log(wu * wv * ws * (1 - u) ** 2 * (1 - v)).ravel()
        self.plans = plans
        self.coords = np.stack([p11.ravel(), p12.ravel(), p21.ravel()], axis=-1)
        self.base = log_density_tilde(plans, constraints) + log_w
        self.moments = moment_vector(plans, constraints)

    def _log_weights(self, potentials):
        lam = np.asarray(potentials, dtype=float)
        return self.base - self.moments @ lam

    def log_partition(self, potentials) -> float:
        """``log Z(l) = log int S~(pi) exp(-<l, R(pi)>) dpi``."""
        return float(logsumexp(self._log_weights(potentials)))

    def log_partition_many(self, potentials_grid: ArrayLike) -> NDArray[np.float64]:
        lam = np.asarray(potentials_grid, dtype=float).reshape(-1, 2)
        out = np.empty(lam.shape[0])
        for start in range(0, lam.shape[0], 16):
            block = self.base[None, :] - lam[start:start + 16] @ self.moments.T
            out[start:start + 16] = logsumexp(block, axis=1)
        return out

    def dual_objective(self, potentials) -> float:
        """``<l, theta> + log Z(l) - 1``, minimized by the optimal potentials."""
        lam = np.asarray(potentials, dtype=float)
        return float(lam @ self.constraints.theta + self.log_partition(lam) - 1.0)

    def probabilities(self, potentials) -> NDArray[np.float64]:
        lw = self._log_weights(potentials)
        return np.exp(lw - logsumexp(lw))

    def expected_moments(self, potentials) -> NDArray[np.float64]:
        return self.probabilities(potentials) @ self.moments

    def expected_plan(self, potentials) -> NDArray[np.float64]:
        return np.tensordot(self.probabilities(potentials), self.plans, axes=1)

    def box_probability(self, potentials, u_bounds, v_bounds) -> float:
        """Probability of ``u in u_bounds`` and ``v in v_bounds`` in collapsed coordinates.

        ``u = p11`` and ``v = p12 / (1 - p11)``; the box is integrated with its
        own product rule so the bin edges are exact.
        """
        t, w = self.quad.nodes()
        (u0, u1), (v0, v1) = u_bounds, v_bounds
        u = u0 + (u1 - u0) * t
        v = v0 + (v1 - v0) * t
        uu, vv, ss = np.meshgrid(u, v, t, indexing="ij")
        wu, wv, ws = np.meshgrid(w * (u1 - u0), w * (v1 - v0), w, indexing="ij")
        plans = _plans_2x2(uu, (1 - uu) * vv, (1 - uu) * (1 - vv) * ss).reshape(-1, 2, 2)
        plans = np.maximum(plans, LOG_FLOOR)
        lam = np.asarray(potentials, dtype=float)
        log_w = np.log(wu * wv * ws * (1 - uu) ** 2 * (1 - vv)).ravel()
        vals = log_density_tilde(plans, self.constraints) - moment_vector(plans, self.constraints) @ lam
        return float(np.exp(logsumexp(vals + log_w) - self.log_partition(lam)))

    def mass_near_feasible(self, potentials, radius: float = 0.01) -> float:
        """Probability that both marginal KL divergences are within ``radius``."""
        near = np.all(self.moments <= radius, axis=-1)
        return float(self.probabilities(potentials)[near].sum())


__all__ = [
    "KnowledgeConstraints",
    "HyperpriorParams",
    "HyperpriorTarget",
    "QuadratureSpec",
    "ConditionalSlice",
    "SimplexQuadrature2x2",
    "make_constraints",
    "log_density_tilde",
    "log_density",
    "grad_log_density",
    "moment_vector",
    "expected_plan",
    "conditional_slice_log_density",
    "density_2x2",
    "simplex_lattice",
    "marginal_density_grid_2x2",
]
