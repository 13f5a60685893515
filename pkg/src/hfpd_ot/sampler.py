"""Hamiltonian Monte Carlo over transport plans.

Plans are sampled in the anchored log-ratio chart of :class:`SimplexChart`,
where the target is ``log p(pi(z)) + log|J(z)|``. Chains run as one
vectorized batch; each chain owns a Philox stream spawned from the config
seed, so results are reproducible and chains are independent.

A target is any object exposing ``shape`` (``(m, n)``) and
``logp_grad(plans) -> (logp, grad)`` for a stack of plans, where ``grad`` is
the coordinate gradient in plan space. An optional ``initial_plan()`` seeds
the chains.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import SimplexChart, uniform_plan
from .errors import DimensionError, ParameterError, SamplerHealthError
from .io import write_csv

DIVERGENCE_THRESHOLD = 1000.0
MAX_DIVERGENCE_FRACTION = 0.1

# dual averaging constants (Hoffman & Gelman)
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


@dataclass(frozen=True)
class HmcConfig:
    """Sampler settings. ``adaptation_steps`` defaults to ``0.8 * burn_in``."""

    step_size: float = 0.3
    leapfrog_steps: int = 6
    burn_in: int = 8000
    adaptation_steps: int | None = None
    target_accept: float = 0.6
    seed: int = 0
    chains: int = 4
    thin: int = 1

    def __post_init__(self):
        if self.adaptation_steps is None:
            object.__setattr__(self, "adaptation_steps", int(0.8 * self.burn_in))
        if not self.step_size > 0:
            raise ParameterError("step_size must be positive")
        if self.leapfrog_steps < 1 or self.chains < 1 or self.thin < 1:
            raise ParameterError("leapfrog_steps, chains and thin must be >= 1")
        if self.burn_in < 0 or not 0 <= self.adaptation_steps <= self.burn_in:
            raise ParameterError("need 0 <= adaptation_steps <= burn_in")
        if not 0 < self.target_accept < 1:
            raise ParameterError("target_accept must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")


@dataclass
class HmcDiagnostics:
    acceptance_rate: float
    adapted_step_size: float
    ess: NDArray[np.float64]
    divergences: int
    proposals: int
    chain_acceptance: list[float] = field(default_factory=list)
    chain_step_sizes: list[float] = field(default_factory=list)
    adaptation: str = "dual-averaging"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ess"] = [float(v) for v in self.ess]
        d["ess_min"] = float(np.min(self.ess)) if self.ess.size else 0.0
        return d


class LeapfrogState(NamedTuple):
    position: NDArray[np.float64]
    momentum: NDArray[np.float64]
    diverged: NDArray[np.bool_]


def leapfrog(
    position: ArrayLike,
    momentum: ArrayLike,
    step_size,
    steps: int,
    gradient: Callable[[NDArray[np.float64]], NDArray[np.float64]],
) -> LeapfrogState:
    """Symplectic leapfrog for ``H = -log p(q) + |r|^2 / 2``.

    ``gradient`` returns the gradient of ``log p``. Positions may be batched
    along leading axes; ``step_size`` broadcasts against the leading axes.
    ``diverged`` flags trajectories that met a non-finite gradient.
    """
    q = np.array(position, dtype=float)
    r = np.array(momentum, dtype=float)
    if q.shape != r.shape:
        raise DimensionError("position and momentum shapes differ")
    if steps == 0:
        return LeapfrogState(q, r, np.zeros(q.shape[:-1], dtype=bool))

    def value_and_grad(x):
        return None, gradient(x)

    q, r, _, _, bad = _integrate(q, r, step_size, steps, value_and_grad, gradient(q))
    return LeapfrogState(q, r, bad)


def _integrate(q, r, h, steps, value_and_grad, grad0):
    h = np.asarray(h, dtype=float)
    if h.ndim:
        h = h[..., None]
    g = grad0
    logp = None
    with np.errstate(all="ignore"):
        for _ in range(steps):
            r = r + 0.5 * h * g
            q = q + h * r
            logp, g = value_and_grad(q)
            r = r + 0.5 * h * g
        bad = ~np.all(np.isfinite(g), axis=-1) | ~np.all(np.isfinite(q), axis=-1)
    return q, r, logp, g, bad


class _ChartTarget:
    """Target pushed into chart coordinates, including the log-Jacobian."""

    def __init__(self, target):
        self.target = target
        self.shape = tuple(target.shape)
        self.chart = SimplexChart(self.shape[0] * self.shape[1])

    def __call__(self, z):
        log_p = self.chart.log_simplex(z)
        p = np.exp(log_p)
        p = np.maximum(p, self.chart.floor)
        p = p / p.sum(axis=-1, keepdims=True)
        logp, grad = self.target.logp_grad(p.reshape(p.shape[:-1] + self.shape))
        grad = grad.reshape(p.shape)
        val = np.asarray(logp) + np.sum(np.log(p), axis=-1)
        return val, self.chart.pullback(p, grad)

    def plans(self, z):
        return self.chart.to_simplex(z).reshape(z.shape[:-1] + self.shape)


def _chain_generators(seed: int, chains: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(chains)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _autocorrelation(x):
    # x: (..., n); FFT-based, normalized so lag 0 is 1
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    var = acov[..., :1]
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(var > 0, acov / np.where(var > 0, var, 1.0), 0.0)
    return rho


def effective_sample_size(draws: ArrayLike) -> NDArray[np.float64]:
    """ESS per coordinate for draws of shape ``(chains, n, d)`` or ``(n, d)``.

    Autocorrelations are averaged across chains and truncated with Geyer's
    initial positive sequence.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError("draws must have shape (chains, n, d) or (n, d)")
    chains, n, d = x.shape
    if n < 4:
        return np.full(d, float(chains * n))
    rho = _autocorrelation(np.moveaxis(x, 1, -1)).mean(axis=0)  # (d, n)
    out = np.empty(d)
    for k in range(d):
        r = rho[k]
        if not np.isfinite(r).all() or r[0] == 0:
            out[k] = chains * n
            continue
        pairs = r[: n - n % 2].reshape(-1, 2).sum(axis=1)
        tau = -1.0
        running = np.inf
        for p in pairs:
            if p <= 0:
                break
            running = min(running, p)
            tau += 2.0 * running
        out[k] = chains * n / max(tau, 1.0 / np.log10(max(chains * n, 10)))
    return np.minimum(out, chains * n * np.log10(max(chains * n, 10)))


def mc_standard_error(draws: ArrayLike) -> NDArray[np.float64]:
    """Monte-Carlo standard error of the mean, ``sd / sqrt(ESS)``, per coordinate."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[None]
    flat = x.reshape(-1, x.shape[-1])
    sd = flat.std(axis=0, ddof=1)
    return sd / np.sqrt(effective_sample_size(x))


def hmc_sample(target, config: HmcConfig, n_samples: int, *, initial: ArrayLike | None = None):
    """Draw ``n_samples`` plans per chain from ``target``.

    Returns ``(samples, diagnostics)`` where ``samples`` has shape
    ``(chains * n_samples, m, n)`` in chain-major order.

    Raises
    ------
    SamplerHealthError
        If more than 10% of post-burn-in proposals diverge, or the initial
        point has non-finite density.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    ct = _ChartTarget(target)
    chains = config.chains
    dim = ct.chart.dimension - 1
    rngs = _chain_generators(config.seed, chains)

    if initial is None:
        initial = target.initial_plan() if hasattr(target, "initial_plan") else uniform_plan(*ct.shape)
    init = np.asarray(initial, dtype=float)
    z0 = ct.chart.to_unconstrained(init.reshape(-1))
    z = np.stack([z0 + 0.1 * g.standard_normal(dim) for g in rngs]) if chains > 1 else z0[None].copy()
    logp, grad = ct(z)
    if not np.all(np.isfinite(logp)):
        raise SamplerHealthError("target density is not finite at the initial point", {})

    h = np.full(chains, float(config.step_size))
    mu_da = np.log(10.0 * h)
    h_bar_stat = np.zeros(chains)
    log_h_bar = np.zeros(chains)

    total_iters = config.burn_in + n_samples * config.thin
    out = np.empty((chains, n_samples, dim))
    accepted = np.zeros(chains)
    divergences = 0
    post_divergences = 0

    for it in range(total_iters):
        r0 = np.stack([g.standard_normal(dim) for g in rngs])
        u = np.array([g.random() for g in rngs])
        q1, r1, logp1, grad1, bad = _integrate(z, r0, h, config.leapfrog_steps, ct, grad)
        with np.errstate(all="ignore"):
            h0 = -logp + 0.5 * np.sum(r0 * r0, axis=-1)
            h1 = -logp1 + 0.5 * np.sum(r1 * r1, axis=-1)
            delta = h0 - h1
        div = bad | ~np.isfinite(delta) | (np.abs(delta) > DIVERGENCE_THRESHOLD)
        accept_prob = np.where(div, 0.0, np.minimum(1.0, np.exp(np.minimum(delta, 0.0))))
        take = (~div) & (np.log(u) < np.minimum(delta, 0.0))
        z = np.where(take[:, None], q1, z)
        logp = np.where(take, logp1, logp)
        grad = np.where(take[:, None], grad1, grad)
        n_div = int(div.sum())
        divergences += n_div

        if it < config.adaptation_steps:
            t = it + 1
            w = 1.0 / (t + _DA_T0)
            h_bar_stat = (1 - w) * h_bar_stat + w * (config.target_accept - accept_prob)
            log_h = mu_da - np.sqrt(t) / _DA_GAMMA * h_bar_stat
            eta = t ** (-_DA_KAPPA)
            log_h_bar = eta * log_h + (1 - eta) * log_h_bar
            h = np.exp(log_h)
            if t == config.adaptation_steps:
                h = np.exp(log_h_bar)
        elif it >= config.burn_in:
            accepted += take
            post_divergences += n_div
            k = it - config.burn_in
            if (k + 1) % config.thin == 0:
                out[:, k // config.thin] = z

    proposals = n_samples * config.thin * chains
    samples = ct.plans(out)
    flat_for_ess = samples.reshape(chains, n_samples, -1)
    diag = HmcDiagnostics(
        acceptance_rate=float(accepted.sum() / proposals),
        adapted_step_size=float(np.mean(h)),
        ess=effective_sample_size(flat_for_ess),
        divergences=divergences,
        proposals=total_iters * chains,
        chain_acceptance=[float(a / (n_samples * config.thin)) for a in accepted],
        chain_step_sizes=[float(v) for v in h],
    )
    if post_divergences > MAX_DIVERGENCE_FRACTION * proposals:
        raise SamplerHealthError(
            f"{post_divergences} of {proposals} post-burn-in proposals diverged", diag.to_dict()
        )
    return samples.reshape((chains * n_samples,) + ct.shape), diag


class DirichletTarget:
    """Dirichlet density over flattened ``m x n`` plans; a calibration target."""

    def __init__(self, concentration: ArrayLike, shape: tuple[int, int]):
        a = np.asarray(concentration, dtype=float).reshape(shape)
        if np.any(a <= 0):
            raise ParameterError("Dirichlet concentration must be positive")
        self.alpha = a
        self.shape = tuple(shape)

    def logp_grad(self, plans):
        p = np.asarray(plans, dtype=float)
        logp = np.sum((self.alpha - 1.0) * np.log(p), axis=(-2, -1))
        return logp, (self.alpha - 1.0) / p


# ---------------------------------------------------------------------------
# persistence

_BINARY_HEADER = struct.Struct("<QQQQ")


def write_samples_csv(path, samples: ArrayLike, comments=()) -> None:
    """One flattened plan per row (row-major), with a ``p_i_j`` header."""
    s = np.asarray(samples, dtype=float)
    k, m, n = s.shape
    header = [f"p_{i}_{j}" for i in range(m) for j in range(n)]
    write_csv(path, header, s.reshape(k, m * n).tolist(), comments)


def write_samples_binary(path, samples: ArrayLike, seed: int) -> None:
    """Header ``m, n, count, seed`` as little-endian u64, then f64 entries."""
    s = np.asarray(samples, dtype=float)
    k, m, n = s.shape
    with open(path, "wb") as fh:
        fh.write(_BINARY_HEADER.pack(m, n, k, seed))
        fh.write(s.astype("<f8").tobytes())


def read_samples_binary(path) -> tuple[NDArray[np.float64], int]:
    with open(path, "rb") as fh:
        m, n, k, seed = _BINARY_HEADER.unpack(fh.read(_BINARY_HEADER.size))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != m * n * k:
        raise DimensionError(f"binary block holds {data.size} values, header says {m * n * k}")
    return data.reshape(k, m, n).astype(float), seed


__all__ = [
    "HmcConfig",
    "HmcDiagnostics",
    "LeapfrogState",
    "DirichletTarget",
    "leapfrog",
    "hmc_sample",
    "effective_sample_size",
    "mc_standard_error",
    "write_samples_csv",
    "write_samples_binary",
    "read_samples_binary",
]
