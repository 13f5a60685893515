import json
from pathlib import Path

import numpy as np
import pytest

from hfpd_ot.cli import DEFAULTS, config_hash, load_config, main
from hfpd_ot.io import read_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "seed": 3,
    "problem": {
        "m": 4,
        "n": 4,
        "mu0": "uniform",
        "nu0": {"gaussian": {"mean": 2, "sd": 1}},
        "epsilon": 0.1,
    },
    "sampler": {"burn_in": 200, "chains": 2},
    "solver": {"n_samp": 400, "max_outer": 3},
    "experiment": {
        "n_samples": 40,
        "sample_counts": [10, 20],
        "diversity_potentials": [0.05, 10],
        "runs": 3,
        "diversity_samples": 30,
        "markov_runs": 4,
        "markov_samples": 20,
        "pairs": 6,
        "grid_resolution": 8,
        "quadrature_order": 16,
    },
}

COMMANDS = [
    ["sinkhorn"],
    ["potentials"],
    ["sample"],
    ["fairness", "frequency"],
    ["fairness", "diversity"],
    ["fairness", "markov"],
    ["repair"],
]


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(tmp_path, cfg, command, out="out", *extra):
    return main([*command, "--config", _write(tmp_path, cfg), "--out", str(tmp_path / out), *extra])


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())}


def _with(cfg, block, **values):
    out = json.loads(json.dumps(cfg))
    out.setdefault(block, {}).update(values)
    return out


def test_defaults_reproduce_fairness_setting():
    cfg = load_config(None)
    p = cfg["problem"]
    assert (p["m"], p["n"], p["epsilon"], p["eta"], p["zeta"]) == (20, 20, 1e-3, 2.0, 2.0)
    assert cfg["sampler"]["burn_in"] == 8000
    assert cfg == load_config(str(CONFIGS / "fairness20x20.json"), seed=0, out="results")


@pytest.mark.parametrize(
    "bad",
    [
        {"extra": 1},
        {"problem": {"epsilon": -1.0}},
        {"problem": {"colour": "red"}},
        {"problem": {"mu0": [0.5, 0.5]}},
        {"problem": {"cost": "taxicab"}},
        {"sampler": {"chains": 0}},
        {"seed": -1},
        {"experiment": {"schemes": ["magic"]}},
        {"experiment": {"grid_sweep": "alpha"}},
        {"output": {"formats": ["xml"]}},
    ],
)
def test_invalid_configs_exit_2(tmp_path, bad):
    cfg = json.loads(json.dumps(SMALL))
    for key, value in bad.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    assert _run(tmp_path, cfg, ["sinkhorn"]) == 2


def test_unreadable_config_exit_2(tmp_path):
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["sinkhorn", "--config", str(tmp_path / "broken.json")]) == 2


def test_grid_needs_two_by_two(tmp_path):
    assert _run(tmp_path, SMALL, ["grid2x2"]) == 2


def test_sinkhorn_plan_meets_marginals(tmp_path):
    assert main(["sinkhorn", "--config", str(CONFIGS / "demo2x2.json"), "--out", str(tmp_path)]) == 0
    comments, header, rows = read_csv(tmp_path / "plan.csv")
    assert header == ["i", "j", "plan"]
    plan = np.zeros((2, 2))
    for i, j, v in rows:
        plan[int(i), int(j)] = float(v)
    np.testing.assert_allclose(plan.sum(axis=1), [0.2, 0.8], atol=1e-9)
    np.testing.assert_allclose(plan.sum(axis=0), [0.9, 0.1], atol=1e-9)
    assert any(c.startswith("config_sha256=") for c in comments)


def test_uniform_symmetric_problem_gives_symmetric_plan(tmp_path):
    cfg = _with(SMALL, "problem", nu0="uniform")
    assert _run(tmp_path, cfg, ["sinkhorn"]) == 0
    plan = np.array(json.loads((tmp_path / "out" / "sinkhorn.json").read_text())["plan"])
    np.testing.assert_allclose(plan, plan.T, atol=1e-12)


def test_cost_matrix_file_is_relative_to_config(tmp_path):
    np.savetxt(tmp_path / "cost.csv", [[0.0, 1.0], [1.0, 0.0]], delimiter=",")
    cfg = {"problem": {"m": 2, "n": 2, "cost": {"matrix_file": "cost.csv"}, "mu0": [0.2, 0.8],
                       "nu0": [0.9, 0.1], "epsilon": 1.0}}
    assert _run(tmp_path, cfg, ["sinkhorn"]) == 0
    ref = tmp_path / "ref"
    assert main(["sinkhorn", "--config", str(CONFIGS / "demo2x2.json"), "--out", str(ref)]) == 0
    a = json.loads((tmp_path / "out" / "sinkhorn.json").read_text())["plan"]
    b = json.loads((ref / "sinkhorn.json").read_text())["plan"]
    np.testing.assert_allclose(a, b, atol=1e-15)


@pytest.mark.parametrize("command", COMMANDS, ids=" ".join)
def test_reruns_are_byte_identical(tmp_path, command):
    assert _run(tmp_path, SMALL, command, "a") in (0, 3)
    assert _run(tmp_path, SMALL, command, "b") in (0, 3)
    a, b = _snapshot(tmp_path / "a"), _snapshot(tmp_path / "b")
    assert a and a == b


def test_grid_rerun_identical_and_normalized(tmp_path):
    args = ["grid2x2", "--config", str(CONFIGS / "demo2x2.json")]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    assert _snapshot(tmp_path / "a") == _snapshot(tmp_path / "b")
    report = json.loads((tmp_path / "a" / "grid2x2.json").read_text())
    assert len(report["settings"]) == 9
    for s in report["settings"]:
        np.testing.assert_allclose(np.sum(s["expected_plan"]), 1.0, atol=1e-10)


@pytest.mark.parametrize("sweep", ["nominals", "epsilon"])
def test_grid_other_sweeps(tmp_path, sweep):
    cfg = json.loads((CONFIGS / "demo2x2.json").read_text())
    cfg["experiment"] = {"grid_sweep": sweep, "grid_resolution": 6, "quadrature_order": 16}
    assert _run(tmp_path, cfg, ["grid2x2"]) == 0
    assert len(list((tmp_path / "out").glob(f"grid_{sweep}_*.csv"))) == 3


def test_workers_do_not_change_results(tmp_path):
    assert _run(tmp_path, SMALL, ["fairness", "diversity"], "a") == 0
    assert _run(tmp_path, SMALL, ["fairness", "diversity"], "b", "--workers", "3") == 0
    assert _snapshot(tmp_path / "a") == _snapshot(tmp_path / "b")


def test_seed_changes_output(tmp_path):
    assert _run(tmp_path, SMALL, ["sample"], "a") == 0
    assert _run(tmp_path, SMALL, ["sample"], "b", "--seed", "4") == 0
    assert _snapshot(tmp_path / "a")["samples.csv"] != _snapshot(tmp_path / "b")["samples.csv"]


def test_outputs_carry_hash_and_seed(tmp_path):
    assert _run(tmp_path, SMALL, ["sample"]) == 0
    cfg = load_config(_write(tmp_path, SMALL), out=str(tmp_path / "out"))
    digest = config_hash(cfg)
    comments, _, _ = read_csv(tmp_path / "out" / "expected_plan.csv")
    assert f"config_sha256={digest}" in comments
    assert "seed=3" in comments
    assert "command=sample" in comments
    meta = json.loads((tmp_path / "out" / "sample.json").read_text())["meta"]
    assert meta["config_sha256"] == digest and meta["seed"] == 3
    text = "".join(p.read_text() for p in (tmp_path / "out").iterdir())
    assert str(tmp_path) not in text


def test_hash_ignores_output_directory():
    a = load_config(None, out="x")
    b = load_config(None, out="y")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_config(None, seed=1))


def test_format_flag_limits_outputs(tmp_path):
    assert _run(tmp_path, SMALL, ["sinkhorn"], "out", "--format", "json") == 0
    assert sorted(_snapshot(tmp_path / "out")) == ["sinkhorn.json"]


def test_binary_samples(tmp_path):
    cfg = _with(SMALL, "experiment", sample_format="binary", potentials=[1.0, 1.0])
    assert _run(tmp_path, cfg, ["sample"]) == 0
    raw = (tmp_path / "out" / "samples.bin").read_bytes()
    assert raw[:8] == (4).to_bytes(8, "little")


def test_lambda_flag_skips_solver(tmp_path):
    assert _run(tmp_path, SMALL, ["sample"], "out", "--lambda", "2", "3") == 0
    report = json.loads((tmp_path / "out" / "sample.json").read_text())
    assert report["potentials"] == [2.0, 3.0]
    assert report["solver"] == {"solved": False}


def test_non_convergence_exit_3_with_outputs(tmp_path):
    cfg = _with(SMALL, "solver", tol=1e-12, max_outer=1)
    assert _run(tmp_path, cfg, ["potentials"]) == 3
    report = json.loads((tmp_path / "out" / "potentials.json").read_text())
    assert report["converged"] is False
    assert "wall_clock" not in report


def test_sampler_health_exit_4(tmp_path):
    cfg = _with(SMALL, "sampler", step_size=50.0, burn_in=0, adaptation_steps=0)
    cfg["experiment"] = {**cfg["experiment"], "potentials": [1.0, 1.0]}
    assert _run(tmp_path, cfg, ["sample"]) == 4


def test_repair_report_metrics(tmp_path):
    cfg = _with(SMALL, "experiment", potentials=[0.0, 0.0])
    assert _run(tmp_path, cfg, ["repair"]) == 0
    report = json.loads((tmp_path / "out" / "repair.json").read_text())
    assert set(report["schemes"]) == {"deterministic-eot", "nominal-ot", "randomized-hfpd"}
    assert "randomized_to_eot_distortion_ratio" in report["metrics"]
    _, header, rows = read_csv(tmp_path / "out" / "repair.csv")
    assert header == ["scheme", "pair", "icd", "distortion"]
    assert len(rows) == 3 * SMALL["experiment"]["pairs"]


def test_markov_rows(tmp_path):
    cfg = _with(SMALL, "experiment", potentials=[0.05, 0.05])
    assert _run(tmp_path, cfg, ["fairness", "markov"]) == 0
    _, header, rows = read_csv(tmp_path / "out" / "markov.csv")
    assert header[:4] == ["run", "bound", "empirical", "se"]
    assert len(rows) == SMALL["experiment"]["markov_runs"]


def test_default_keys_are_all_documented():
    # every block is strict, so the defaults double as the schema
    assert set(DEFAULTS) == {"seed", "problem", "sampler", "solver", "experiment", "output"}
