import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfpd_ot.errors import DimensionError, ParameterError, SamplerHealthError
from hfpd_ot.hyperprior import (
    HyperpriorParams,
    QuadratureSpec,
    SimplexQuadrature2x2,
    make_constraints,
)
from hfpd_ot.sampler import (
    DirichletTarget,
    HmcConfig,
    effective_sample_size,
    hmc_sample,
    leapfrog,
    mc_standard_error,
    read_samples_binary,
    write_samples_binary,
    write_samples_csv,
)
from hfpd_ot.io import read_csv


def _oscillator_energy_error(h, total_time=1.0):
    steps = int(round(total_time / h))
    q0, p0 = np.array([1.0]), np.array([0.0])
    out = leapfrog(q0, p0, h, steps, lambda q: -q)
    e0 = 0.5 * (q0 @ q0 + p0 @ p0)
    e1 = 0.5 * (out.position @ out.position + out.momentum @ out.momentum)
    return abs(e1 - e0)


def test_leapfrog_energy_error_is_second_order():
    ratio = _oscillator_energy_error(0.1) / _oscillator_energy_error(0.05)
    assert 3.5 <= ratio <= 4.5


def test_leapfrog_matches_exact_oscillator_at_small_step():
    out = leapfrog([1.0], [0.0], 1e-3, 1000, lambda q: -q)
    assert out.position[0] == pytest.approx(np.cos(1.0), abs=1e-6)
    assert out.momentum[0] == pytest.approx(-np.sin(1.0), abs=1e-6)


def test_leapfrog_zero_steps_is_identity():
    q, r = np.array([0.3, -1.2]), np.array([2.0, 0.5])
    out = leapfrog(q, r, 0.1, 0, lambda x: -x)
    np.testing.assert_array_equal(out.position, q)
    np.testing.assert_array_equal(out.momentum, r)
    assert not out.diverged


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.3), st.integers(1, 25))
def test_leapfrog_is_reversible(seed, h, steps):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 4))
    prec = a @ a.T + np.eye(4)
    grad = lambda q: -(q @ prec) - np.tanh(q)
    q0, r0 = rng.standard_normal(4), rng.standard_normal(4)
    fwd = leapfrog(q0, r0, h, steps, grad)
    back = leapfrog(fwd.position, -fwd.momentum, h, steps, grad)
    np.testing.assert_allclose(back.position, q0, atol=1e-8)
    np.testing.assert_allclose(-back.momentum, r0, atol=1e-8)


def test_leapfrog_flags_non_finite_gradient():
    grad = lambda q: np.where(q > 0.5, np.nan, -q)
    out = leapfrog([[0.0], [0.4]], [[0.1], [3.0]], 0.2, 5, grad)
    assert out.diverged.tolist() == [False, True]


def test_leapfrog_shape_mismatch():
    with pytest.raises(DimensionError):
        leapfrog([0.0, 1.0], [0.0], 0.1, 3, lambda q: -q)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"step_size": 0.0},
        {"leapfrog_steps": 0},
        {"burn_in": 10, "adaptation_steps": 11},
        {"target_accept": 1.0},
        {"chains": 0},
        {"seed": -1},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        HmcConfig(**kwargs)


def test_config_defaults_follow_experimental_setting():
    cfg = HmcConfig()
    assert (cfg.step_size, cfg.leapfrog_steps, cfg.burn_in) == (0.3, 6, 8000)
    assert cfg.adaptation_steps == 6400
    assert cfg.target_accept == 0.6


def test_dirichlet_uniform_means():
    cfg = HmcConfig(burn_in=1000, chains=4, seed=3)
    samples, diag = hmc_sample(DirichletTarget(np.ones(4), (2, 2)), cfg, 2500)
    flat = samples.reshape(4, 2500, 4)
    se = mc_standard_error(flat)
    z = np.abs(flat.reshape(-1, 4).mean(axis=0) - 0.25) / se
    assert np.all(z < 3), z
    assert 0.45 <= diag.acceptance_rate <= 0.75
    assert diag.divergences == 0


def test_samples_are_plans():
    cfg = HmcConfig(burn_in=200, chains=2, seed=1)
    samples, _ = hmc_sample(DirichletTarget(np.full(6, 0.7), (2, 3)), cfg, 100)
    assert samples.shape == (200, 2, 3)
    assert np.all(samples >= 0)
    np.testing.assert_allclose(samples.sum(axis=(1, 2)), 1.0, atol=1e-12)


def test_chain_determinism():
    target = DirichletTarget(np.full(4, 2.0), (2, 2))
    cfg = HmcConfig(burn_in=100, chains=3, seed=42)
    a, da = hmc_sample(target, cfg, 50)
    b, db = hmc_sample(target, cfg, 50)
    np.testing.assert_array_equal(a, b)
    assert da.to_dict() == db.to_dict()
    c, _ = hmc_sample(target, HmcConfig(burn_in=100, chains=3, seed=43), 50)
    assert not np.array_equal(a, c)


def test_independent_seeds_agree_in_mean():
    target = DirichletTarget(np.array([1.0, 2.0, 3.0, 4.0]), (2, 2))
    runs = []
    for seed in (10, 11):
        s, _ = hmc_sample(target, HmcConfig(burn_in=500, chains=2, seed=seed), 2000)
        flat = s.reshape(2, 2000, 4)
        runs.append((flat.reshape(-1, 4).mean(axis=0), mc_standard_error(flat)))
    (m1, s1), (m2, s2) = runs
    assert np.all(np.abs(m1 - m2) < 4 * np.hypot(s1, s2))


def test_adaptation_tracks_target_acceptance():
    cfg = HmcConfig(step_size=2.0, burn_in=1000, chains=2, seed=5, target_accept=0.6)
    _, diag = hmc_sample(DirichletTarget(np.full(9, 1.5), (3, 3)), cfg, 2000)
    assert 0.45 <= diag.acceptance_rate <= 0.75
    assert diag.adapted_step_size < 2.0
    assert diag.adaptation == "dual-averaging"


class _Stiff:
    shape = (2, 2)

    def logp_grad(self, plans):
        p = np.asarray(plans)
        dev = p - 0.25
        return -1e7 * np.sum(dev**2, axis=(-2, -1)), -2e7 * dev


def test_persistent_divergence_raises_with_diagnostics():
    cfg = HmcConfig(step_size=5.0, burn_in=0, adaptation_steps=0, chains=2, seed=0)
    with pytest.raises(SamplerHealthError) as info:
        hmc_sample(_Stiff(), cfg, 50)
    assert info.value.diagnostics["divergences"] > 10


def test_n_samples_must_be_positive():
    with pytest.raises(ParameterError):
        hmc_sample(DirichletTarget(np.ones(4), (2, 2)), HmcConfig(burn_in=0), 0)


def test_ess_of_independent_draws_is_near_count():
    x = np.random.default_rng(0).standard_normal((4, 5000, 2))
    ess = effective_sample_size(x)
    assert np.all(np.abs(ess / 20000 - 1) < 0.15)


def test_ess_of_ar1_matches_theory():
    rng = np.random.default_rng(1)
    phi, n = 0.8, 40000
    x = np.empty(n)
    x[0] = rng.standard_normal()
    noise = rng.standard_normal(n) * np.sqrt(1 - phi**2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + noise[t]
    ess = effective_sample_size(x[:, None])[0]
    expected = n * (1 - phi) / (1 + phi)
    assert abs(ess / expected - 1) < 0.2


def test_hyperprior_histogram_matches_quadrature():
    c = make_constraints(
        [0.2, 0.8], [0.9, 0.1], [[0.0, 1.0], [1.0, 0.0]], 1.0,
        eta=0.05, zeta=0.05, lambda_ideal=(0.5, 0.5),
    )
    lam = (1.0, 1.0)
    quad = SimplexQuadrature2x2(c, QuadratureSpec(64))
    cfg = HmcConfig(burn_in=1000, chains=4, seed=8)
    samples, _ = hmc_sample(HyperpriorParams(c, lam).target(), cfg, 5000)
    u = samples[:, 0, 0]
    v = samples[:, 0, 1] / (1.0 - u)
    ub = np.minimum((u * 5).astype(int), 4)
    vb = np.minimum((v * 2).astype(int), 1)
    for a in range(5):
        for b in range(2):
            inside = ((ub == a) & (vb == b)).astype(float).reshape(4, -1, 1)
            p_hat = inside.mean()
            se = max(float(mc_standard_error(inside)[0]), 1e-3)
            p = quad.box_probability(lam, (a / 5, (a + 1) / 5), (b / 2, (b + 1) / 2))
            assert abs(p_hat - p) < 3 * se, (a, b, p_hat, p, se)


def test_binary_round_trip(tmp_path):
    s = np.random.default_rng(0).dirichlet(np.ones(6), size=7).reshape(7, 2, 3)
    path = tmp_path / "s.bin"
    write_samples_binary(path, s, seed=2**63 + 5)
    back, seed = read_samples_binary(path)
    np.testing.assert_array_equal(back, s)
    assert seed == 2**63 + 5
    raw = path.read_bytes()
    assert raw[:8] == (2).to_bytes(8, "little")
    assert len(raw) == 32 + 8 * s.size


def test_binary_truncated_block(tmp_path):
    s = np.full((2, 2, 2), 0.25)
    path = tmp_path / "s.bin"
    write_samples_binary(path, s, seed=0)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DimensionError):
        read_samples_binary(path)


def test_csv_is_row_major(tmp_path):
    s = np.arange(12, dtype=float).reshape(2, 2, 3) / 15.0
    path = tmp_path / "s.csv"
    write_samples_csv(path, s, comments=["seed=1"])
    comments, header, rows = read_csv(path)
    assert comments == ["seed=1"]
    assert header == ["p_0_0", "p_0_1", "p_0_2", "p_1_0", "p_1_1", "p_1_2"]
    np.testing.assert_array_equal(np.array(rows, dtype=float), s.reshape(2, 6))
