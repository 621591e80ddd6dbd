import numpy as np
import pytest
from scipy.linalg import solve_banded

from rse_heat.diffusivity import sample_pi
from rse_heat.dynamics import (
    LinearPropagator,
    SimState,
    checkpoint_steps,
    environment_view,
    integrate_batch,
    simulate_trajectory,
    step_exact_free,
    step_semi_implicit,
)
from rse_heat.environment import DivFreeSpec, Mode, cosine_model, eval_V, quasiperiodic_model, zero_model
from rse_heat.errors import BlowUpError, ConfigurationError
from rse_heat.lattice import Grid, cosine_transform, inner_h


def test_constant_is_invariant_without_noise():
    g = Grid(16)
    s = step_semi_implicit(g, zero_model(g), SimState(0.0, np.full(16, 2.5), np.zeros(1)), 1e-3, None)
    np.testing.assert_allclose(s.u, 2.5, rtol=1e-14)
    assert s.t == pytest.approx(1e-3)


@pytest.mark.parametrize("k", [1, 3, 7])
def test_mode_decay_matches_tridiagonal_solve(k):
    g = Grid(16)
    dt = 1e-2
    u = g.mode(k)
    s = step_semi_implicit(g, zero_model(g), SimState(0.0, u, np.zeros(1)), dt, None)
    # oracle: banded solve of (I - dt/2 Lap) x = u
    lap = g.laplacian_matrix
    ab = np.zeros((3, 16))
    ab[0, 1:] = -dt / 2 * np.diag(lap, 1)
    ab[1] = 1 - dt / 2 * np.diag(lap)
    ab[2, :-1] = -dt / 2 * np.diag(lap, -1)
    np.testing.assert_allclose(s.u, solve_banded((1, 1), ab, u), atol=1e-12)
    np.testing.assert_allclose(s.u, u / (1 + dt * g.eigenvalues[k] / 2), atol=1e-12)


def test_one_step_mode_variance():
    g = Grid(16)
    dt = 1e-2
    n = 100_000
    s = step_semi_implicit(g, zero_model(g), SimState(0.0, np.zeros((n, 16)), np.zeros(1)), dt, np.random.default_rng(0))
    var = cosine_transform(g, s.u).var(axis=0)
    expect = dt / (1 + dt * g.eigenvalues / 2) ** 2
    np.testing.assert_allclose(var, expect, rtol=0.03)


def test_step_drift_blowup():
    g = Grid(8)
    with pytest.raises(BlowUpError):
        step_semi_implicit(g, cosine_model(g, 0.5), SimState(0.0, np.zeros(8), np.array([np.nan])), 1e-3, None)


def test_step_rejects_bad_dt():
    g = Grid(8)
    with pytest.raises(ConfigurationError):
        step_semi_implicit(g, zero_model(g), SimState(0.0, np.zeros(8), np.zeros(1)), 0.0, None)
    with pytest.raises(ConfigurationError):
        step_exact_free(g, SimState(0.0, np.zeros(8), np.zeros(1)), -1.0, None)


def test_propagator_dense_and_fast_agree():
    g = Grid(520)
    rng = np.random.default_rng(2)
    u, r = rng.standard_normal((2, 3, 520))
    fast = LinearPropagator(g, 1e-3, 0.5)
    assert not fast.dense
    a = cosine_transform(g, u) * fast.solve_mult * fast.explicit_mult + cosine_transform(g, r) * fast.solve_mult
    np.testing.assert_allclose(fast(u, r), cosine_transform(g, a, "inverse"), atol=1e-10)


def test_exact_free_stationary_variance():
    g = Grid(16)
    n = 100_000
    s = step_exact_free(g, SimState(0.0, np.zeros((n, 16)), np.zeros(1)), 50.0, np.random.default_rng(3))
    var = cosine_transform(g, s.u).var(axis=0)
    assert var[0] == pytest.approx(50.0, rel=0.02)
    np.testing.assert_allclose(var[1:], 1 / g.eigenvalues[1:], rtol=0.02)


def test_exact_free_decay_without_noise():
    g = Grid(8)
    u = g.mode(2) + 3.0
    s = step_exact_free(g, SimState(0.0, u, np.zeros(1)), 0.1, None)
    np.testing.assert_allclose(s.u, 3.0 + np.exp(-g.eigenvalues[2] * 0.05) * g.mode(2), atol=1e-12)


def test_exact_free_mode0_variance_over_steps():
    g = Grid(4)
    res = integrate_batch(
        g, zero_model(g), np.zeros(1), np.zeros((20_000, 4)), 0.1, [0.0, 2.0], None, "exact_free"
    )
    assert np.all(res["mean"] == 0)
    rngs = [np.random.default_rng([5, i]) for i in range(20_000)]
    res = integrate_batch(g, zero_model(g), np.zeros(1), np.zeros((20_000, 4)), 0.1, [0.0, 2.0], rngs, "exact_free")
    assert res["mean"][:, 1].var() == pytest.approx(2.0, rel=0.05)


def test_exact_free_refuses_drift():
    g = Grid(4)
    with pytest.raises(ConfigurationError):
        integrate_batch(g, cosine_model(g, 0.1), np.zeros(1), np.zeros(4), 0.1, [0.0, 0.1], None, "exact_free")


def test_semi_implicit_stationary_variance_is_discrete_formula():
    # backward Euler in the Laplacian: 1 / (mu (1 + mu dt / 4)), not 1 / mu
    g = Grid(16)
    dt = 0.01
    n = 4000
    rngs = [np.random.default_rng([6, i]) for i in range(n)]
    res = integrate_batch(
        g, zero_model(g), np.zeros(1), np.zeros((n, 16)), dt, [3.0], rngs, "semi_implicit", keep_fields=True
    )
    var = cosine_transform(g, res["fields"][:, -1]).var(axis=0)[1:5]
    mu = g.eigenvalues[1:5]
    np.testing.assert_allclose(var, 1 / (mu * (1 + mu * dt / 4)), rtol=0.08)


def test_trajectory_zero_time():
    g = Grid(8)
    v0 = np.linspace(0, 1, 8)
    tr = simulate_trajectory(g, zero_model(g), [0.0], v0, 0.0, 1e-3, [0.0], np.random.default_rng(0))
    assert tr.mean_mode[0] == pytest.approx(v0.mean())
    assert tr.fluct_norm_sq[0] == pytest.approx(inner_h(g, v0 - v0.mean(), v0 - v0.mean()))


def test_trajectory_checkpoint_validation():
    g = Grid(8)
    with pytest.raises(ConfigurationError):
        simulate_trajectory(g, zero_model(g), [0.0], np.zeros(8), 1.0, 1e-3, [0.5, 2.0], None)
    with pytest.raises(ConfigurationError):
        checkpoint_steps([0.0, 0.00015], 1e-3)
    with pytest.raises(ConfigurationError):
        checkpoint_steps([0.2, 0.1], 1e-3)


def test_trajectory_keeps_fields():
    g = Grid(8)
    m = cosine_model(g, 0.5)
    tr = simulate_trajectory(g, m, [0.3], np.zeros(8), 0.1, 1e-3, [0.05, 0.1], np.random.default_rng(1), keep_fields=True)
    assert tr.fields.shape == (2, 8)
    np.testing.assert_allclose(tr.fields.mean(axis=1), tr.mean_mode)


def test_free_field_replica_moments():
    g = Grid(16)
    n = 10_000
    T = 2.0
    rngs = [np.random.default_rng([7, i]) for i in range(n)]
    res = integrate_batch(g, zero_model(g), np.zeros(1), np.zeros((n, 16)), 1e-3, [T], rngs)
    assert res["mean"][:, -1].var() == pytest.approx(T, rel=0.05)
    mu = g.eigenvalues[1:]
    oracle = np.sum(-np.expm1(-mu * T) / mu)
    assert res["fluct_sq"][:, -1].mean() == pytest.approx(oracle, rel=0.05)


def test_scheme_consistency_against_exact():
    # mode variances at T = 5 for k <= n/4, 10^4 replicas
    g = Grid(16)
    n = 10_000
    T = 5.0
    out = {}
    # the exact transition needs no sub-steps
    for scheme, seed, dt in (("crank_nicolson", 8, 1e-3), ("exact_free", 9, T)):
        rngs = [np.random.default_rng([seed, i]) for i in range(n)]
        res = integrate_batch(
            g, zero_model(g), np.zeros(1), np.zeros((n, 16)), dt, [T], rngs, scheme, keep_fields=True
        )
        out[scheme] = cosine_transform(g, res["fields"][:, -1]).var(axis=0)
    k = slice(1, 16 // 4 + 1)
    np.testing.assert_allclose(out["crank_nicolson"][k], out["exact_free"][k], rtol=0.05)


def test_noise_of_a_row_is_independent_of_batch():
    g = Grid(8)
    m = cosine_model(g, 0.5)
    sig = np.array([[0.1], [0.7]])
    both = integrate_batch(
        g, m, sig, np.zeros((2, 8)), 1e-3, [0.3], [np.random.default_rng(1), np.random.default_rng(2)],
        keep_fields=True,
    )
    alone = integrate_batch(g, m, sig[1], np.zeros(8), 1e-3, [0.3], [np.random.default_rng(2)], keep_fields=True)
    # equal up to BLAS blocking differences between batch shapes
    np.testing.assert_allclose(both["fields"][1], alone["fields"][0], rtol=0, atol=1e-12)


def shifted_models():
    g = Grid(12)
    return [
        cosine_model(g, 0.5),
        cosine_model(g, 0.5, DivFreeSpec()),
        quasiperiodic_model(g, [[Mode(1, 0.3)], [Mode(1, 0.2, 0.4, 1)]], divfree=DivFreeSpec((1, 3))),
    ]


@pytest.mark.parametrize("model", shifted_models(), ids=["periodic", "periodic_stream", "quasi_stream"])
def test_shift_equivariance_with_matched_noise(model):
    g = model.grid
    rng = np.random.default_rng(10)
    v0 = rng.standard_normal(12) * 0.3
    sigma = rng.random(model.d)
    for c in (0.37, -1.6, 2.0):
        kw = dict(dt=1e-3, checkpoints=[0.0, 0.25, 0.5], keep_fields=True)
        a = integrate_batch(g, model, sigma, v0 + c, rngs=[np.random.default_rng(11)], **kw)
        b = integrate_batch(g, model, model.shift(sigma, c), v0, rngs=[np.random.default_rng(11)], **kw)
        np.testing.assert_allclose(a["fields"], b["fields"] + c, atol=1e-10, rtol=0)


@pytest.mark.parametrize("divfree", [None, DivFreeSpec()], ids=["gradient", "with_stream"])
def test_invariant_measure_preserved(divfree):
    g = Grid(16)
    model = cosine_model(g, 0.5, divfree)
    pi = sample_pi(model, 4000, np.random.default_rng(12))
    rngs = [np.random.default_rng([13, i]) for i in range(pi.n)]
    res = integrate_batch(g, model, pi.sigma, pi.v, 1e-3, [0.0, 1.0], rngs, keep_fields=True)
    w = pi.normalized
    for stat in (
        lambda u, s: inner_h(g, *(2 * (environment_view(SimState(0.0, u, s))[0],))),
        lambda u, s: eval_V(model, s, u),
    ):
        before = np.asarray(stat(res["fields"][:, 0], pi.sigma))
        after = np.asarray(stat(res["fields"][:, 1], pi.sigma))
        means, ses = [], []
        for y in (before, after):
            mu = np.sum(w * y)
            means.append(mu)
            ses.append(np.sqrt(np.sum(w**2 * (y - mu) ** 2)))
        assert abs(means[1] - means[0]) <= 3 * np.hypot(*ses), (means, ses)


def test_invariant_statistic_detects_wrong_start():
    # the same check from unweighted Wiener starts sees V relax
    g = Grid(16)
    model = cosine_model(g, 0.5)
    pi = sample_pi(model, 4000, np.random.default_rng(12))
    rngs = [np.random.default_rng([13, i]) for i in range(pi.n)]
    res = integrate_batch(g, model, pi.sigma, pi.v, 1e-3, [0.0, 1.0], rngs, keep_fields=True)
    before = eval_V(model, pi.sigma, res["fields"][:, 0])
    after = eval_V(model, pi.sigma, res["fields"][:, 1])
    se = np.hypot(before.std(), after.std()) / np.sqrt(pi.n)
    assert before.mean() - after.mean() > 3 * se


def test_environment_view_examples():
    g = Grid(6)
    v, base = environment_view(SimState(0.0, np.full(6, 1.25), np.array([0.5])))
    np.testing.assert_array_equal(v, np.zeros(6))
    assert base[0] == pytest.approx(0.75)
    u = np.r_[0.0, np.arange(1, 6) * 0.1]
    v, base = environment_view(SimState(0.0, u, np.array([0.3])))
    np.testing.assert_array_equal(v, u)
    assert base[0] == pytest.approx(0.3)


def test_environment_view_composition():
    rng = np.random.default_rng(14)
    lam = np.array([1.0, np.sqrt(2)])
    for _ in range(50):
        u = rng.standard_normal(9)
        s = rng.random(2)
        c = rng.uniform(-5, 5)
        v1, b1 = environment_view(SimState(0.0, u + c, s), lam)
        v0, b0 = environment_view(SimState(0.0, u, np.mod(s + lam * c, 1.0)), lam)
        np.testing.assert_allclose(v1, v0, atol=1e-12)
        d = np.abs(b1 - b0)
        assert np.all(np.minimum(d, 1 - d) < 1e-12)
        assert v1[0] == 0 and np.all((0 <= b1) & (b1 < 1))
