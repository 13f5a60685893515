"""Simplex-valued types, divergences, entropy and the simplex chart.

Distributions and transport plans are plain ``numpy`` arrays: a distribution
is a 1-D vector of nonnegative weights summing to one, a plan is an ``m x n``
matrix of the same kind. The validators below enforce those invariants at
module boundaries; everything else is array code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionError, DomainError

SUM_TOL = 1e-12
ROUND_TRIP_TOL = 1e-10
LOG_FLOOR = 1e-300

__all__ = [
    "SUM_TOL",
    "ROUND_TRIP_TOL",
    "LOG_FLOOR",
    "as_distribution",
    "as_plan",
    "as_cost",
    "kl_divergence",
    "marginals",
    "plan_entropy",
    "uniform_plan",
    "SimplexChart",
]


def as_distribution(weights: ArrayLike, *, interior: bool = False) -> NDArray[np.float64]:
    """Validate and return a probability vector as a float array."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise DimensionError(f"distribution must be a vector of length >= 2, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DomainError("distribution weights must be finite and nonnegative")
    if abs(w.sum() - 1.0) > SUM_TOL * max(1, w.size):
        raise DomainError(f"distribution weights sum to {w.sum()!r}, not 1")
    if interior and np.any(w < LOG_FLOOR):
        raise DomainError("distribution must be strictly interior")
    return w


def as_plan(entries: ArrayLike, *, interior: bool = False) -> NDArray[np.float64]:
    """Validate and return a transport plan (``m x n`` matrix summing to one)."""
    p = np.asarray(entries, dtype=float)
    if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] < 2:
        raise DimensionError(f"plan must be an m x n matrix with m, n >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError("plan entries must be finite and nonnegative")
    if abs(p.sum() - 1.0) > SUM_TOL * max(1, p.size):
        raise DomainError(f"plan entries sum to {p.sum()!r}, not 1")
    if interior and np.any(p < LOG_FLOOR):
        raise DomainError("plan must be strictly interior")
    return p


def as_cost(costs: ArrayLike) -> NDArray[np.float64]:
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2:
        raise DimensionError(f"cost must be a matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise DomainError("cost entries must be finite and nonnegative")
    return c


def uniform_plan(m: int, n: int) -> NDArray[np.float64]:
    return np.full((m, n), 1.0 / (m * n))


def _xlogy_ratio(p, q):
    # p * log(p / q) with 0 log 0 = 0 and +inf where q = 0 < p
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = p * (np.log(p) - np.log(q))
    out = np.where(p == 0, 0.0, out)
    return np.where((q == 0) & (p > 0), np.inf, out)


def kl_divergence(p: ArrayLike, q: ArrayLike):
    """Kullback-Leibler divergence ``sum p log(p/q)``.

    Operates along the last axis, so stacks of distributions are accepted and
    broadcast. Returns ``+inf`` where ``q`` vanishes on the support of ``p``.
    A scalar ``float`` is returned for 1-D inputs.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[-1:] != q.shape[-1:]:
        raise DimensionError(f"length mismatch: {p.shape[-1:]} vs {q.shape[-1:]}")
    terms = _xlogy_ratio(p, q)
    kl = np.sum(terms, axis=-1)
    # rounding can leave tiny negatives at p == q
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def marginals(plan: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Row sums (source marginal) and column sums (target marginal).

    Stacks of plans with shape ``(..., m, n)`` are accepted.
    """
    p = np.asarray(plan, dtype=float)
    if p.ndim < 2:
        raise DimensionError("plan must have at least two dimensions")
    return p.sum(axis=-1), p.sum(axis=-2)


def plan_entropy(plan: ArrayLike):
    """Shannon entropy ``-sum p log p`` in nats, with ``0 log 0 = 0``.

    Works on stacks ``(..., m, n)``; returns a float for a single plan.
    """
    p = np.asarray(plan, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    h = terms.reshape(*p.shape[:-2], -1).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


@dataclass(frozen=True)
class SimplexChart:
    """Anchored log-ratio chart between the open simplex and ``R^(q-1)``.

    ``p = softmax([z, 0])``: the last coordinate is the anchor (the dependent
    entry). The log-Jacobian is that of ``z -> p[:-1]``, i.e. the density
    correction for Lebesgue measure on the first ``q - 1`` coordinates, and
    equals ``sum_k log p_k``.
    """

    dimension: int
    floor: float = LOG_FLOOR

    def __post_init__(self):
        if self.dimension < 2:
            raise DimensionError("simplex chart needs dimension >= 2")

    def _check_z(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dimension - 1:
            raise DimensionError(f"expected {self.dimension - 1} coordinates, got {z.shape[-1]}")
        return z

    def to_unconstrained(self, p: ArrayLike) -> NDArray[np.float64]:
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.dimension:
            raise DimensionError(f"expected length {self.dimension}, got {p.shape[-1]}")
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise DomainError("forward chart needs a strictly interior point")
        logp = np.log(p)
        return logp[..., :-1] - logp[..., -1:]

    def log_simplex(self, z: ArrayLike) -> NDArray[np.float64]:
        """``log p`` for the full q-vector, computed without forming ``p``."""
        z = self._check_z(z)
        full = np.concatenate([z, np.zeros(z.shape[:-1] + (1,))], axis=-1)
        top = np.max(full, axis=-1, keepdims=True)
        shifted = full - top
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def to_simplex(self, z: ArrayLike) -> NDArray[np.float64]:
        p = np.exp(self.log_simplex(z))
        p = np.maximum(p, self.floor)
        return p / p.sum(axis=-1, keepdims=True)

    def log_jacobian(self, z: ArrayLike):
        lj = np.sum(self.log_simplex(z), axis=-1)
        return float(lj) if np.ndim(lj) == 0 else lj

    def pullback(self, p: ArrayLike, grad_p: ArrayLike) -> NDArray[np.float64]:
        """Gradient in chart coordinates of ``f(p(z)) + log_jacobian(z)``.

        ``grad_p`` is the coordinate gradient of ``f`` with respect to all q
        entries of ``p`` (treated as free variables).
        """
        p = np.asarray(p, dtype=float)
        g = np.asarray(grad_p, dtype=float)
        mean_g = np.sum(p * g, axis=-1, keepdims=True)
        head = p[..., :-1]
        return head * (g[..., :-1] - mean_g) + 1.0 - self.dimension * head
