"""Command-line experiment runner.

Every subcommand reads one JSON config (unknown keys are rejected), resolves
it against the defaults below, and writes CSV and/or JSON files whose header
carries the SHA-256 of the resolved config and the seed. Wall-clock figures
never reach the files, so reruns are byte-identical.

Exit codes: 0 success, 2 validation, 3 convergence, 4 sampler health.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import product
from pathlib import Path

import numpy as np
from scipy.stats import norm, spearmanr

from . import __version__
from .core import as_distribution, kl_divergence
from .eot import eot_objective, exact_ot_small, sinkhorn
from .errors import (
    ConvergenceError,
    DegeneracyError,
    HfpdError,
    SamplerHealthError,
    ValidationError,
)
from .fairness import (
    RepairScheme,
    average_mass,
    compare_repair_schemes,
    diversity_runs,
    empirical_marginal_sequence,
    frequency_map,
    markov_bound,
    run_distributional_fairness,
    sample_plans,
)
from .hyperprior import (
    HyperpriorParams,
    QuadratureSpec,
    SimplexQuadrature2x2,
    make_constraints,
    marginal_density_grid_2x2,
    simplex_lattice,
)
from .io import write_csv, write_json
from .potentials import solve_potentials
from .sampler import HmcConfig, hmc_sample, write_samples_binary, write_samples_csv

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_SAMPLER = 4

DEFAULTS = {
    "seed": 0,
    "problem": {
        "m": 20,
        "n": 20,
        "cost": "euclidean-squared-grid",
        "epsilon": 1e-3,
        "mu0": {"gaussian": {"mean": 7.0, "sd": 3.0}},
        "nu0": {"gaussian": {"mean": 12.0, "sd": 3.0}},
        "eta": 2.0,
        "zeta": 2.0,
        "lambda_ideal": [0.5, 0.5],
        "alpha": None,
    },
    "sampler": {
        "step_size": 0.3,
        "leapfrog_steps": 6,
        "burn_in": 8000,
        "adaptation_steps": None,
        "target_accept": 0.6,
        "chains": 4,
        "thin": 1,
    },
    "solver": {
        "tol": 1e-3,
        "n_samp": 4000,
        "max_outer": 30,
        "initial_potentials": [1.0, 1.0],
        "common_random_numbers": False,
        "confirm_with_covariance": True,
    },
    "experiment": {
        "potentials": None,
        "n_samples": 1000,
        "sample_format": "csv",
        "frequency_potentials": [0.05, 0.05],
        "sample_counts": [10, 50, 100],
        "threshold": None,
        "diversity_potentials": [0.05, 1.0, 10.0, 100.0],
        "runs": 20,
        "diversity_samples": 200,
        "markov_runs": 100,
        "markov_samples": 100,
        "y_index": 0,
        "pairs": 50,
        "schemes": [s.value for s in RepairScheme],
        "w0": 0.5,
        "w1": 0.5,
        "grid_sweep": "potentials",
        "grid_resolution": 60,
        "quadrature_order": 64,
        "grid_potentials": [list(p) for p in product([0.05, 10.0, 100.0], repeat=2)],
        "grid_fixed_potentials": [1.0, 1.0],
        "grid_nominals": [
            [[0.9, 0.1], [0.1, 0.9]],
            [[0.5, 0.5], [0.5, 0.5]],
            [[0.1, 0.9], [0.9, 0.1]],
        ],
        "grid_epsilons": [0.1, 0.5, 10.0],
    },
    "output": {"directory": "results", "formats": ["csv", "json"]},
}

FORMATS = ("csv", "json")
SWEEPS = ("potentials", "nominals", "epsilon")


# ---------------------------------------------------------------------------
# configuration


def _merge(defaults: dict, given: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ValidationError(f"{path or 'config'} must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ValidationError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(defaults[key], dict) and key in ("problem", "sampler", "solver", "experiment", "output"):
            out[key] = _merge(defaults[key], value, key)
        else:
            out[key] = value
    return out


def load_config(path: str | None, *, seed=None, out=None, fmt=None) -> dict:
    """Resolve a config file (or the defaults) with command-line overrides."""
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
    cfg = _merge(DEFAULTS, given, "")
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output"]["directory"] = out
    if fmt is not None:
        cfg["output"]["formats"] = [fmt]
    base = Path(path).resolve().parent if path else Path.cwd()
    _validate(cfg, base)
    return cfg


def _validate(cfg: dict, base: Path) -> None:
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ValidationError("seed must be an integer in [0, 2**64)")
    fmts = cfg["output"]["formats"]
    if not isinstance(fmts, list) or not fmts or any(f not in FORMATS for f in fmts):
        raise ValidationError(f"output.formats must be a nonempty subset of {FORMATS}")
    if not isinstance(cfg["output"]["directory"], str):
        raise ValidationError("output.directory must be a string")
    p = cfg["problem"]
    for key in ("m", "n"):
        if not isinstance(p[key], int) or p[key] < 2:
            raise ValidationError(f"problem.{key} must be an integer >= 2")
    cost = p["cost"]
    if isinstance(cost, dict) and "matrix_file" in cost:
        f = Path(cost["matrix_file"])
        p["cost"] = {"matrix": np.loadtxt(f if f.is_absolute() else base / f, delimiter=",", ndmin=2).tolist()}
    ex = cfg["experiment"]
    if ex["grid_sweep"] not in SWEEPS:
        raise ValidationError(f"experiment.grid_sweep must be one of {SWEEPS}")
    if ex["sample_format"] not in ("csv", "binary"):
        raise ValidationError("experiment.sample_format must be 'csv' or 'binary'")
    try:
        [RepairScheme(s) for s in ex["schemes"]]
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    # construct everything once so module preconditions fail before any run
    try:
        build_constraints(cfg)
        sampler_config(cfg)
    except HfpdError as exc:
        raise ValidationError(str(exc)) from exc
    except (TypeError, ValueError, KeyError) as exc:
        raise ValidationError(f"malformed config: {exc}") from exc


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical resolved config; the output directory is excluded."""
    hashed = copy.deepcopy(cfg)
    hashed["output"].pop("directory", None)
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _marginal(spec, d: int) -> np.ndarray:
    if spec == "uniform":
        return np.full(d, 1.0 / d)
    if isinstance(spec, dict) and set(spec) == {"gaussian"}:
        g = spec["gaussian"]
        if set(g) != {"mean", "sd"}:
            raise ValidationError("gaussian marginal needs exactly 'mean' and 'sd'")
        w = norm.pdf(np.arange(d, dtype=float), float(g["mean"]), float(g["sd"]))
        return w / w.sum()
    if isinstance(spec, list):
        w = np.asarray(spec, dtype=float)
        if w.shape != (d,):
            raise ValidationError(f"marginal needs {d} weights, got {w.size}")
        return as_distribution(w)
    raise ValidationError(f"unsupported marginal spec {spec!r}")


def _cost(spec, m: int, n: int) -> np.ndarray:
    if spec == "euclidean-squared-grid":
        return (np.arange(m, dtype=float)[:, None] - np.arange(n, dtype=float)[None, :]) ** 2
    if isinstance(spec, dict) and set(spec) == {"matrix"}:
        c = np.asarray(spec["matrix"], dtype=float)
        if c.shape != (m, n):
            raise ValidationError(f"cost matrix must be {m} x {n}, got {c.shape}")
        return c
    raise ValidationError(f"unsupported cost spec {spec!r}")


def build_constraints(cfg: dict, *, nominals=None, epsilon=None):
    p = cfg["problem"]
    m, n = p["m"], p["n"]
    mu0, nu0 = nominals if nominals is not None else (_marginal(p["mu0"], m), _marginal(p["nu0"], n))
    li = p["lambda_ideal"]
    if not isinstance(li, list) or len(li) != 2:
        raise ValidationError("problem.lambda_ideal must be a pair")
    return make_constraints(
        mu0,
        nu0,
        _cost(p["cost"], m, n),
        float(p["epsilon"] if epsilon is None else epsilon),
        eta=float(p["eta"]),
        zeta=float(p["zeta"]),
        lambda_ideal=tuple(float(v) for v in li),
        alpha=p["alpha"],
    )


def sampler_config(cfg: dict, purpose: str = "sampler") -> HmcConfig:
    return HmcConfig(**cfg["sampler"], seed=_purpose_seed(cfg["seed"], purpose))


def _purpose_seed(seed: int, purpose: str) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(purpose.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# output


class _Writer:
    """Writes files under the output directory with the provenance header."""

    def __init__(self, cfg: dict, command: str):
        self.dir = Path(cfg["output"]["directory"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.formats = cfg["output"]["formats"]
        self.meta = {
            "command": command,
            "config_sha256": config_hash(cfg),
            "seed": cfg["seed"],
            "version": __version__,
        }
        self.written: list[str] = []

    @property
    def comments(self):
        return [f"{k}={v}" for k, v in self.meta.items()]

    @property
    def csv(self) -> bool:
        return "csv" in self.formats

    def table(self, name, header, rows):
        if self.csv:
            write_csv(self.dir / name, header, rows, self.comments)
            self.written.append(name)

    def samples(self, name, samples):
        write_samples_csv(self.dir / name, samples, self.comments)
        self.written.append(name)

    def binary(self, name, samples, seed):
        write_samples_binary(self.dir / name, samples, seed)
        self.written.append(name)

    def report(self, name, payload):
        if "json" in self.formats:
            write_json(self.dir / name, {"meta": self.meta, **payload})
            self.written.append(name)


def _plan_rows(plan):
    m, n = plan.shape
    return ([i, j, plan[i, j]] for i in range(m) for j in range(n))


def _pmap(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*items)))


# ---------------------------------------------------------------------------
# potentials shared by several commands


def _solve(cfg, constraints):
    s = cfg["solver"]
    return solve_potentials(
        constraints,
        float(s["tol"]),
        sampler_config(cfg, "solver"),
        int(s["n_samp"]),
        int(s["max_outer"]),
        initial_potentials=s["initial_potentials"],
        common_random_numbers=bool(s["common_random_numbers"]),
        confirm_with_covariance=bool(s["confirm_with_covariance"]),
    )


def _potentials(cfg, constraints, override=None):
    """Fixed potentials from the config or ``override``, else the solved potentials."""
    lam = override if override is not None else cfg["experiment"]["potentials"]
    if lam is not None:
        if len(lam) != 2:
            raise ValidationError("potentials must be a pair")
        return HyperpriorParams(constraints, tuple(float(v) for v in lam)), None
    return _solve(cfg, constraints)


def _solve_summary(report):
    if report is None:
        return {"solved": False}
    return {
        "solved": True,
        "converged": report.converged,
        "iterations": len(report.trajectory),
        "final_newton_decrement": report.final.newton_decrement,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_sinkhorn(cfg, args, w: _Writer) -> int:
    c = build_constraints(cfg)
    sol = sinkhorn(c.mu0, c.nu0, c.ideal)
    w.table("plan.csv", ["i", "j", "plan"], _plan_rows(sol.plan))
    mu, nu = sol.plan.sum(axis=1), sol.plan.sum(axis=0)
    summary = {
        "iterations": sol.iterations,
        "marginal_error": sol.marginal_error,
        "transport_cost": sol.transport_cost(c.ideal.cost),
        "objective": eot_objective(sol.plan, c.ideal),
        "row_marginal": mu,
        "column_marginal": nu,
    }
    w.report("sinkhorn.json", {"summary": summary, "plan": sol.plan})
    print(f"sinkhorn: {sol.iterations} iterations, marginal error {sol.marginal_error:.3e}")
    return EXIT_OK


def cmd_potentials(cfg, args, w: _Writer) -> int:
    c = build_constraints(cfg)
    params, report = _solve(cfg, c)
    rows = [
        (s.iteration, *s.potentials, *s.gradient_estimate, *s.gradient_se,
         s.step_size, s.newton_decrement, int(s.step_fallback), int(s.curvature_rejected), int(s.hessian_reset))
        for s in report.trajectory
    ]
    w.table(
        "trajectory.csv",
        ["iteration", "lambda1", "lambda2", "grad1", "grad2", "se1", "se2",
         "step", "newton_decrement", "step_fallback", "curvature_rejected", "hessian_reset"],
        rows,
    )
    w.report("potentials.json", report.to_dict(include_timing=False))
    lam = params.potentials
    print(f"lambda = ({lam[0]:.6g}, {lam[1]:.6g}), decrement {report.final.newton_decrement:.3e}, "
          f"converged {report.converged}")
    return EXIT_OK if report.converged else EXIT_CONVERGENCE


def cmd_sample(cfg, args, w: _Writer) -> int:
    c = build_constraints(cfg)
    params, report = _potentials(cfg, c, args.potentials)
    ex = cfg["experiment"]
    hc = sampler_config(cfg, "sample")
    per_chain = -(-int(ex["n_samples"]) // hc.chains)
    samples, diag = hmc_sample(params.target(), hc, per_chain)
    if ex["sample_format"] == "binary":
        w.binary("samples.bin", samples, hc.seed)
    else:
        w.samples("samples.csv", samples)
    mean_plan = samples.mean(axis=0)
    w.table("expected_plan.csv", ["i", "j", "plan"], _plan_rows(mean_plan))
    w.report("sample.json", {
        "potentials": params.potentials,
        "solver": _solve_summary(report),
        "diagnostics": diag.to_dict(),
        "expected_plan": mean_plan,
        "samples_per_chain": per_chain,
    })
    print(f"sampled {samples.shape[0]} plans, acceptance {diag.acceptance_rate:.3f}")
    return _solver_exit(report)


def _frequency(cfg, args, w):
    c = build_constraints(cfg)
    ex = cfg["experiment"]
    lam = args.potentials if args.potentials is not None else ex["frequency_potentials"]
    params = HyperpriorParams(c, tuple(float(v) for v in lam))
    counts = sorted(int(k) for k in ex["sample_counts"])
    plans = sample_plans(params, counts[-1], sampler_config(cfg, "frequency"))
    summary = []
    for k in counts:
        f = frequency_map(plans[:k], ex["threshold"])
        w.table(f"frequency_N{k}.csv", ["i", "j", "frequency"],
                ([i, j, f.probabilities[i, j]] for i in range(c.shape[0]) for j in range(c.shape[1])))
        dev = np.abs(f.probabilities - 0.5) / np.sqrt(0.25 / k)
        summary.append({
            "samples": k,
            "threshold": f.threshold,
            "mean_frequency": float(f.probabilities.mean()),
            "fraction_within_4se_of_half": float(np.mean(dev < 4)),
            "probabilities": f.probabilities,
        })
    pi_o = c.nominal_plan
    w.report("frequency.json", {
        "potentials": params.potentials,
        "maps": summary,
        "eot_indicator": None if pi_o is None else (pi_o > average_mass(c.shape)).astype(int),
    })
    for s in summary:
        print(f"N={s['samples']}: mean frequency {s['mean_frequency']:.4f}")
    return EXIT_OK


def _diversity(cfg, args, w):
    c = build_constraints(cfg)
    ex = cfg["experiment"]
    hc = sampler_config(cfg, "diversity")
    grid = [float(v) for v in ex["diversity_potentials"]]
    items = [(c, lam, k, int(ex["runs"]), int(ex["diversity_samples"]), hc) for k, lam in enumerate(grid)]
    rows = [r for block in _pmap(diversity_runs, items, args.workers) for r in block]
    w.table("diversity.csv", ["lambda", "run", "diversity", "se"], rows)
    lam = np.array([r[0] for r in rows])
    val = np.array([r[2] for r in rows])
    rho, pval = spearmanr(lam, val) if np.ptp(lam) > 0 else (float("nan"), float("nan"))
    means = [{"lambda": g, "mean": float(val[lam == g].mean()), "sd": float(val[lam == g].std(ddof=1))
              if (lam == g).sum() > 1 else 0.0} for g in grid]
    w.report("diversity.json", {
        "per_lambda": means,
        "spearman_rho": float(rho),
        "spearman_p": float(pval),
        "richness_index": c.shape[0] * c.shape[1],
        "rows": rows,
    })
    print(f"spearman rho {rho:.3f} (p={pval:.2e})")
    return EXIT_OK


def _markov(cfg, args, w):
    c = build_constraints(cfg)
    ex = cfg["experiment"]
    params, report = _potentials(cfg, c, args.potentials)
    runs, k = int(ex["markov_runs"]), int(ex["markov_samples"])
    y0 = int(ex["y_index"])
    w2sq = float(np.sum(exact_ot_small(c.mu0, c.nu0, c.ideal.cost) * c.ideal.cost))
    hc = replace(sampler_config(cfg, "markov"), chains=runs)
    samples, _ = hmc_sample(params.target(), hc, k)
    per_run = samples.reshape((runs, k) + c.shape)
    rows = []
    for r in range(runs):
        mb = markov_bound(per_run[r], y0, c.ideal.cost, w2sq)
        rows.append((r, mb.bound, mb.empirical, mb.standard_error, mb.mean_cost))
    w.table("markov.csv", ["run", "bound", "empirical", "se", "mean_cost"], rows)
    below = float(np.mean([r[1] < r[2] for r in rows]))
    valid = float(np.mean([r[1] <= r[2] + 3 * r[3] for r in rows]))
    w.report("markov.json", {
        "potentials": params.potentials,
        "solver": _solve_summary(report),
        "w2sq": w2sq,
        "y_index": y0,
        "fraction_bound_below_empirical": below,
        "fraction_valid_within_3se": valid,
        "rows": rows,
    })
    print(f"bound < empirical in {below:.0%} of {runs} runs")
    return _solver_exit(report)


def cmd_fairness(cfg, args, w: _Writer) -> int:
    return {"frequency": _frequency, "diversity": _diversity, "markov": _markov}[args.experiment](cfg, args, w)


def cmd_repair(cfg, args, w: _Writer) -> int:
    c = build_constraints(cfg)
    ex = cfg["experiment"]
    params, report = _potentials(cfg, c, args.potentials)
    seq = empirical_marginal_sequence(
        c.mu0, c.nu0, c.eta, c.zeta, int(ex["pairs"]), _purpose_seed(cfg["seed"], "marginals")
    )
    schemes = [RepairScheme(s) for s in ex["schemes"]]
    out = compare_repair_schemes(
        seq, schemes, params, sampler_config(cfg, "repair"), w0=float(ex["w0"]), w1=float(ex["w1"])
    )
    rows = [(s.value, t, icd, dist) for s, res in out.items() for t, (icd, dist) in enumerate(zip(res.icd, res.distortion))]
    w.table("repair.csv", ["scheme", "pair", "icd", "distortion"], rows)
    # distribution of the fairness proxy for the first observed pair
    mu, nu = seq[0]
    dist = run_distributional_fairness(
        c, params, (mu, nu), (mu, nu), int(ex["pairs"]), sampler_config(cfg, "distributional"),
        float(ex["w0"]), float(ex["w1"]),
    )
    w.table("icd_distribution.csv", ["draw", "icd", "distortion"],
            [(k, r.icd, r.distortion) for k, r in enumerate(dist)])
    summary = {s.value: res.summary() for s, res in out.items()}
    metrics = {}
    eot, nom, rnd = (summary.get(s.value) for s in
                     (RepairScheme.DETERMINISTIC_EOT, RepairScheme.NOMINAL_OT, RepairScheme.RANDOMIZED_HFPD))
    if eot and nom:
        metrics["nominal_icd_var_below_eot"] = nom["icd_var"] < eot["icd_var"]
    if eot and rnd:
        metrics["randomized_to_eot_distortion_ratio"] = rnd["distortion_mean"] / eot["distortion_mean"]
        metrics["randomized_icd_var_below_eot"] = rnd["icd_var"] <= eot["icd_var"]
    w.report("repair.json", {
        "potentials": params.potentials,
        "solver": _solve_summary(report),
        "schemes": summary,
        "metrics": metrics,
        "pair0_kl": [kl_divergence(mu, c.mu0), kl_divergence(nu, c.nu0)],
        "pair0_icd": [r.icd for r in dist],
    })
    for name, s in summary.items():
        print(f"{name}: icd mean {s['icd_mean']:.4g} var {s['icd_var']:.3g}, distortion mean {s['distortion_mean']:.4g}")
    return _solver_exit(report)


def _grid_setting(cfg, kind, value, resolution, order):
    if kind == "potentials":
        c, lam = build_constraints(cfg), value
    elif kind == "nominals":
        c, lam = build_constraints(cfg, nominals=value), cfg["experiment"]["grid_fixed_potentials"]
    else:
        c, lam = build_constraints(cfg, epsilon=value), cfg["experiment"]["grid_fixed_potentials"]
    lam = tuple(float(v) for v in lam)
    params = HyperpriorParams(c, lam)
    quad = QuadratureSpec(order)
    a, b = simplex_lattice(resolution)
    dens = marginal_density_grid_2x2(params, a, b, quad)
    sq = SimplexQuadrature2x2(c, quad)
    log_z = sq.log_partition(lam)
    return {
        "potentials": lam,
        "mu0": c.mu0,
        "nu0": c.nu0,
        "epsilon": c.ideal.epsilon,
        "log_partition": log_z,
        "expected_plan": sq.expected_plan(lam),
        "eot_plan": sinkhorn(c.mu0, c.nu0, c.ideal).plan,
        "grid": (a, b, dens, dens / np.exp(log_z)),
    }


def cmd_grid2x2(cfg, args, w: _Writer) -> int:
    p = cfg["problem"]
    if (p["m"], p["n"]) != (2, 2):
        raise ValidationError("grid2x2 needs a 2 x 2 problem (problem.m = problem.n = 2)")
    ex = cfg["experiment"]
    kind = ex["grid_sweep"]
    values = {"potentials": ex["grid_potentials"], "nominals": ex["grid_nominals"],
              "epsilon": ex["grid_epsilons"]}[kind]
    items = [(cfg, kind, v, int(ex["grid_resolution"]), int(ex["quadrature_order"])) for v in values]
    settings = _pmap(_grid_setting, items, args.workers)
    for k, s in enumerate(settings):
        a, b, dens, normed = s.pop("grid")
        w.table(f"grid_{kind}_{k}.csv", ["pi11", "pi12", "density", "normalized_density"],
                zip(a, b, dens, normed))
    w.report("grid2x2.json", {"sweep": kind, "settings": settings})
    print(f"{len(settings)} {kind} settings written")
    return EXIT_OK


def _solver_exit(report) -> int:
    return EXIT_CONVERGENCE if report is not None and not report.converged else EXIT_OK


COMMANDS = {
    "sinkhorn": cmd_sinkhorn,
    "potentials": cmd_potentials,
    "sample": cmd_sample,
    "fairness": cmd_fairness,
    "repair": cmd_repair,
    "grid2x2": cmd_grid2x2,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; defaults reproduce the 20x20 fairness setting")
    common.add_argument("--seed", type=int, help="64-bit seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides output.directory")
    common.add_argument("--workers", type=int, default=1, help="processes for independent runs")
    common.add_argument("--format", choices=FORMATS, help="write only this format")
    parser = argparse.ArgumentParser(prog="hfpd-ot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("sinkhorn", parents=[common], help="EOT plan between the nominals")
    sub.add_parser("potentials", parents=[common], help="solve for the Kantorovitch potentials")
    for name, text in (("sample", "sample plans from the hyperprior"), ("repair", "compare repair schemes")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--lambda", dest="potentials", type=float, nargs=2, metavar=("L1", "L2"))
    fp = sub.add_parser("fairness", parents=[common], help="fairness proxies from sampled plans")
    fp.add_argument("experiment", choices=["frequency", "diversity", "markov"])
    fp.add_argument("--lambda", dest="potentials", type=float, nargs=2, metavar=("L1", "L2"))
    sub.add_parser("grid2x2", parents=[common], help="marginal density grids for 2 x 2 plans")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.potentials = getattr(args, "potentials", None)
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        cfg = load_config(args.config, seed=args.seed, out=args.out, fmt=args.format)
        writer = _Writer(cfg, args.command if args.command != "fairness" else f"fairness {args.experiment}")
        return COMMANDS[args.command](cfg, args, writer)
    except SamplerHealthError as exc:
        print(f"sampler health: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except (ConvergenceError, DegeneracyError) as exc:
        print(f"convergence: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except HfpdError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
