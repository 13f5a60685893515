"""Fairness, diversity and data-repair experiments on randomized transport plans.

Randomized plans come from HMC draws of the hyperprior. The helpers here
turn stacks of plans (shape ``(k, m, n)``) into frequency maps, eligible
contract sets, Markov bounds on conditional transport cost and diversity
indices, and run barycentric data repair with deterministic, randomized and
nominal plans.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import LOG_FLOOR, as_distribution, as_plan, kl_divergence, plan_entropy
from .eot import sinkhorn, wasserstein2_1d
from .errors import ConditioningError, DimensionError, ParameterError, RadiusTooSmallError
from .hyperprior import HyperpriorParams, KnowledgeConstraints
from .io import write_csv
from .sampler import HmcConfig, hmc_sample

MAX_PROPOSALS = 10**6
MIN_ACCEPTANCE = 1e-4
_BATCH = 1024
PLAN_SUM_TOL = 1e-6


def _stack(samples) -> NDArray[np.float64]:
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or s.shape[0] == 0:
        raise ParameterError("need a nonempty stack of plans with shape (k, m, n)")
    return s


def _solver_plan(plan) -> NDArray[np.float64]:
    # solver output sums to one only up to its marginal tolerance
    p = np.asarray(plan, dtype=float)
    if p.ndim == 2 and abs(p.sum() - 1.0) <= PLAN_SUM_TOL:
        p = p / p.sum()
    return as_plan(p)


def average_mass(shape: tuple[int, int]) -> float:
    """Fairness threshold ``1 / (m n)``, i.e. ``1 / d^2`` for square plans."""
    return 1.0 / (shape[0] * shape[1])


@dataclass(frozen=True)
class FrequencyMap:
    """Per-contract frequency of mass above ``threshold`` across sampled plans."""

    probabilities: NDArray[np.float64]
    sample_count: int
    threshold: float

    @property
    def standard_errors(self) -> NDArray[np.float64]:
        p = self.probabilities
        return np.sqrt(p * (1.0 - p) / self.sample_count)

    def write_csv(self, path, comments=()):
        m, n = self.probabilities.shape
        rows = ([i, j, self.probabilities[i, j]] for i in range(m) for j in range(n))
        meta = [f"samples={self.sample_count}", f"threshold={self.threshold!r}"]
        return write_csv(path, ["i", "j", "frequency"], rows, list(comments) + meta)


def frequency_map(samples: ArrayLike, threshold: float | None = None) -> FrequencyMap:
    """Fraction of samples in which each contract carries more than ``threshold``."""
    s = _stack(samples)
    t = average_mass(s.shape[1:]) if threshold is None else float(threshold)
    return FrequencyMap(np.mean(s > t, axis=0), s.shape[0], t)


def eligible_contracts(sample: ArrayLike, activity_threshold: float) -> set[tuple[int, int]]:
    """Contracts whose mass exceeds ``activity_threshold``."""
    if activity_threshold < 0:
        raise ParameterError("activity threshold must be nonnegative")
    p = np.asarray(sample, dtype=float)
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(p > activity_threshold))}


def eligible_union(samples: ArrayLike, activity_threshold: float) -> set[tuple[int, int]]:
    s = _stack(samples)
    return eligible_contracts(np.max(s, axis=0), activity_threshold)


class MarkovBound(NamedTuple):
    bound: float
    empirical: float
    standard_error: float
    mean_cost: float


def conditional_costs(samples: ArrayLike, y_index: int, cost: ArrayLike) -> NDArray[np.float64]:
    """Per-sample ``sum_x pi(x | y0) C(x, y0)`` for the target column ``y0``."""
    s = _stack(samples)
    c = np.asarray(cost, dtype=float)
    if c.shape != s.shape[1:]:
        raise DimensionError("cost and plan shapes differ")
    col = s[:, :, y_index]
    mass = col.sum(axis=1)
    if np.any(mass <= LOG_FLOOR):
        raise ConditioningError(f"column {y_index} has no mass in some sample")
    return (col @ c[:, y_index]) / mass


def markov_bound(samples: ArrayLike, y_index: int, cost: ArrayLike, w2sq: float) -> MarkovBound:
    """Markov lower bound ``1 - E[c] / w2sq`` on ``P(c <= w2sq)`` and its empirical value."""
    if not w2sq > 0:
        raise ParameterError("w2sq must be positive")
    c = conditional_costs(samples, y_index, cost)
    emp = float(np.mean(c <= w2sq))
    return MarkovBound(
        bound=1.0 - float(c.mean()) / w2sq,
        empirical=emp,
        standard_error=math.sqrt(max(emp * (1 - emp), 0.0) / c.size),
        mean_cost=float(c.mean()),
    )


class DiversityIndex(NamedTuple):
    value: float
    standard_error: float


def diversity_index(samples: ArrayLike) -> DiversityIndex:
    """Mean perplexity ``exp(H(pi))`` over samples, with its naive standard error."""
    s = _stack(samples)
    d = np.exp(plan_entropy(s)) if s.shape[0] > 1 else np.array([math.exp(plan_entropy(s[0]))])
    d = np.clip(d, 1.0, s.shape[1] * s.shape[2])
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return DiversityIndex(float(d.mean()), se)


class RepairScheme(str, enum.Enum):
    DETERMINISTIC_EOT = "deterministic-eot"
    RANDOMIZED_HFPD = "randomized-hfpd"
    NOMINAL_OT = "nominal-ot"


@dataclass(frozen=True)
class RepairResult:
    repaired_x: NDArray[np.float64]
    repaired_y: NDArray[np.float64]
    icd: float
    distortion: float


def repair_pair(
    x_support: ArrayLike, y_support: ArrayLike, plan: ArrayLike, w0: float = 0.5, w1: float = 0.5
) -> RepairResult:
    """Fixed-support barycentric repair of two conditional feature distributions.

    ``x_r = w0 x + d w1 pi y`` and ``y_r = w1 y + d w0 pi^T x``. ICD is the
    squared distance between the repaired supports; distortion is the exact
    1-D ``W2^2`` between ``x`` and ``x_r`` with uniform weights.
    """
    p = _solver_plan(plan)
    m, n = p.shape
    if m != n:
        raise DimensionError("repair needs a square plan")
    x = np.asarray(x_support, dtype=float)
    y = np.asarray(y_support, dtype=float)
    if x.shape != (m,) or y.shape != (n,):
        raise DimensionError("support lengths must match the plan")
    if min(w0, w1) < 0 or abs(w0 + w1 - 1.0) > 1e-12:
        raise ParameterError("weights must be nonnegative and sum to 1")
    d = m
    xr = w0 * x + d * w1 * (p @ y)
    yr = w1 * y + d * w0 * (p.T @ x)
    u = np.full(d, 1.0 / d)
    return RepairResult(
        repaired_x=xr,
        repaired_y=yr,
        icd=float(np.sum((xr - yr) ** 2)),
        distortion=wasserstein2_1d(u, u, x, xr),
    )


# ---------------------------------------------------------------------------
# empirical marginals


def _propose_until(rng, ref, radius, d):
    proposals = 0
    while proposals < MAX_PROPOSALS:
        u = rng.uniform(0.0, d, size=(_BATCH, d))
        w = _dirichlet_rows(rng, u)
        k = kl_divergence(w, ref)
        ok = np.nonzero(k <= radius)[0]
        if ok.size:
            return w[ok[0]], proposals + ok[0] + 1
        proposals += _BATCH
    return None, proposals


def _dirichlet_rows(rng, conc):
    # gamma construction; tiny concentrations can underflow, hence the floor
    g = rng.standard_gamma(np.maximum(conc, np.finfo(float).tiny))
    total = g.sum(axis=1, keepdims=True)
    w = np.where(total > 0, g / np.where(total > 0, total, 1.0), 1.0 / conc.shape[1])
    # flooring after normalization keeps draws interior; the sum moves by < 1e-298
    return np.maximum(w, LOG_FLOOR)


def sample_empirical_marginals(
    mu0: ArrayLike, nu0: ArrayLike, eta: float, zeta: float, seed: int | np.random.Generator
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Draw ``mu ~ Dir(u0)``, ``nu ~ Dir(u1)`` with ``u ~ U[0, d]^d``, accepted inside the KL balls.

    Each marginal is drawn until its own constraint holds, which matches
    joint acceptance of independent proposals.

    Raises
    ------
    RadiusTooSmallError
        If a marginal sees no acceptance within ``10**6`` proposals.
    """
    if eta < 0 or zeta < 0:
        raise ParameterError("radii must be nonnegative")
    mu0 = as_distribution(mu0, interior=True)
    nu0 = as_distribution(nu0, interior=True)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    out = []
    for ref, radius in ((mu0, eta), (nu0, zeta)):
        w, used = _propose_until(rng, ref, radius, ref.size)
        if w is None:
            raise RadiusTooSmallError(
                f"acceptance rate below {MIN_ACCEPTANCE} after {used} proposals (radius {radius!r})"
            )
        out.append(w)
    return out[0], out[1]


def empirical_marginal_sequence(mu0, nu0, eta, zeta, count: int, seed: int):
    """``count`` independent accepted pairs from one seeded stream."""
    rng = np.random.Generator(np.random.Philox(seed))
    return [sample_empirical_marginals(mu0, nu0, eta, zeta, rng) for _ in range(count)]


# ---------------------------------------------------------------------------
# experiments


def sample_plans(params: HyperpriorParams, count: int, sampler_config: HmcConfig) -> NDArray[np.float64]:
    """``count`` plans from the hyperprior, taken round-robin across chains."""
    chains = sampler_config.chains
    per_chain = -(-count // chains)
    samples, _ = hmc_sample(params.target(), sampler_config, per_chain)
    by_chain = samples.reshape((chains, per_chain) + params.shape)
    return by_chain.transpose(1, 0, 2, 3).reshape((-1,) + params.shape)[:count]


def run_distributional_fairness(
    constraints: KnowledgeConstraints,
    params: HyperpriorParams,
    marginal_pair: tuple[ArrayLike, ArrayLike],
    supports: tuple[ArrayLike, ArrayLike],
    scheme_count: int,
    sampler_config: HmcConfig,
    w0: float = 0.5,
    w1: float = 0.5,
) -> list[RepairResult]:
    """Repair one observed pair with ``scheme_count`` independent hyperprior draws."""
    if scheme_count < 1:
        raise ParameterError("scheme_count must be >= 1")
    if params.constraints is not constraints:
        params = HyperpriorParams(constraints, params.potentials)
    as_distribution(marginal_pair[0])
    as_distribution(marginal_pair[1])
    plans = sample_plans(params, scheme_count, sampler_config)
    x, y = supports
    return [repair_pair(x, y, p, w0, w1) for p in plans]


@dataclass(frozen=True)
class SchemeOutcome:
    icd: NDArray[np.float64]
    distortion: NDArray[np.float64]

    def summary(self) -> dict:
        return {
            "icd_mean": float(self.icd.mean()),
            "icd_var": float(self.icd.var(ddof=1)) if self.icd.size > 1 else 0.0,
            "distortion_mean": float(self.distortion.mean()),
            "distortion_var": float(self.distortion.var(ddof=1)) if self.distortion.size > 1 else 0.0,
        }


def compare_repair_schemes(
    marginal_sequence: Sequence[tuple[ArrayLike, ArrayLike]],
    schemes: set[RepairScheme] | Sequence[RepairScheme],
    params: HyperpriorParams,
    sampler_config: HmcConfig,
    supports: tuple[ArrayLike, ArrayLike] | None = None,
    w0: float = 0.5,
    w1: float = 0.5,
) -> dict[RepairScheme, SchemeOutcome]:
    """Repair every observed pair under each scheme.

    Deterministic EOT solves Sinkhorn on the observed pair, randomized HFPD
    uses one fresh hyperprior draw per pair and nominal OT reuses the Sinkhorn
    plan between the nominals.

    Without ``supports`` each observed pair is itself the feature vector under
    repair (``x_t = mu_t``, ``y_t = nu_t``), so distortion compares ``mu_t``
    with its repaired version. Fixed ``supports`` are shared by every pair.
    """
    c = params.constraints
    schemes = [RepairScheme(s) for s in schemes]
    count = len(marginal_sequence)
    if count == 0:
        raise ParameterError("marginal sequence is empty")
    plans: dict[RepairScheme, list] = {}
    if RepairScheme.DETERMINISTIC_EOT in schemes:
        plans[RepairScheme.DETERMINISTIC_EOT] = [
            sinkhorn(mu, nu, c.ideal).plan for mu, nu in marginal_sequence
        ]
    if RepairScheme.RANDOMIZED_HFPD in schemes:
        plans[RepairScheme.RANDOMIZED_HFPD] = list(sample_plans(params, count, sampler_config))
    if RepairScheme.NOMINAL_OT in schemes:
        nominal = sinkhorn(c.mu0, c.nu0, c.ideal).plan
        plans[RepairScheme.NOMINAL_OT] = [nominal] * count
    out = {}
    for scheme in sorted(plans, key=lambda s: s.value):
        res = [
            repair_pair(*(pair if supports is None else supports), p, w0, w1)
            for pair, p in zip(marginal_sequence, plans[scheme])
        ]
        out[scheme] = SchemeOutcome(
            icd=np.array([r.icd for r in res]), distortion=np.array([r.distortion for r in res])
        )
    return out


def diversity_trace(
    constraints: KnowledgeConstraints,
    potentials_grid: Sequence[float],
    runs: int,
    n_samples: int,
    sampler_config: HmcConfig,
) -> list[tuple[float, int, float, float]]:
    """Diversity index per ``(lambda, run)``; each run is one independently seeded chain.

    Potentials are applied to both marginals. Returns rows
    ``(lambda, run, mean, se)``.
    """
    rows = []
    for k, lam in enumerate(potentials_grid):
        rows.extend(diversity_runs(constraints, lam, k, runs, n_samples, sampler_config))
    return rows


def diversity_runs(
    constraints: KnowledgeConstraints,
    potential: float,
    index: int,
    runs: int,
    n_samples: int,
    sampler_config: HmcConfig,
) -> list[tuple[float, int, float, float]]:
    """Rows of :func:`diversity_trace` for the ``index``-th grid value alone."""
    cfg = replace(sampler_config, chains=runs, seed=_child_seed(sampler_config.seed, index))
    params = HyperpriorParams(constraints, (float(potential), float(potential)))
    samples, _ = hmc_sample(params.target(), cfg, n_samples)
    per_run = samples.reshape((runs, n_samples) + constraints.shape)
    out = []
    for r in range(runs):
        di = diversity_index(per_run[r])
        out.append((float(potential), r, di.value, di.standard_error))
    return out


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def write_diversity_csv(path, rows, comments=()):
    return write_csv(path, ["lambda", "run", "diversity", "se"], rows, comments)


def write_repair_csv(path, outcomes: dict[RepairScheme, SchemeOutcome], comments=()):
    rows = []
    for scheme, res in outcomes.items():
        for t, (icd, dist) in enumerate(zip(res.icd, res.distortion)):
            rows.append((scheme.value, t, icd, dist))
    return write_csv(path, ["scheme", "pair", "icd", "distortion"], rows, comments)


__all__ = [
    "FrequencyMap",
    "MarkovBound",
    "DiversityIndex",
    "RepairScheme",
    "RepairResult",
    "SchemeOutcome",
    "average_mass",
    "frequency_map",
    "eligible_contracts",
    "eligible_union",
    "conditional_costs",
    "markov_bound",
    "diversity_index",
    "repair_pair",
    "sample_empirical_marginals",
    "empirical_marginal_sequence",
    "sample_plans",
    "run_distributional_fairness",
    "compare_repair_schemes",
    "diversity_trace",
    "diversity_runs",
    "write_diversity_csv",
    "write_repair_csv",
]
