import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fracouple import coupling_engine as ce
from fracouple import fractional_kernels as fk
from fracouple.sde_models import get_model

BASE = dict(H=0.7, theta=0.65, alpha=0.25, K=2.0, c3=8.0, beta=2.5, varsigma=1.25, dt=1 / 16, T_hist=16.0)


def cfg(**kw):
    return ce.CouplingConfig(**{**BASE, **kw})


@pytest.fixture(scope="module")
def ctx():
    c = cfg(C_K=1.0, rho_hat=0.6, delta1=0.0)
    return ce.build_context(get_model("additive_baseline"), c, np.random.default_rng(0))


@pytest.mark.parametrize("kw, msg", [
    (dict(alpha=0.5), "alpha must lie in"),
    (dict(alpha=0.0), "alpha must lie in"),
    (dict(beta=1.9), "beta must exceed 1/\\(1-2\\*alpha\\)"),
    (dict(theta=0.75), "theta must lie in"),
    (dict(varsigma=1.0), "varsigma must exceed 1"),
    (dict(dt=0.3), "1/dt must be an integer"),
    (dict(delta1=1.0), "delta1 must lie in"),
    (dict(C_K=4.0), "c3 must be >= 2\\*c2"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        cfg(**kw)


def test_set_CK_example():
    c = cfg(c3=40.0, C_K=4.0)
    assert c.c2 == 16.0 and c.C_K == pytest.approx(4.0)
    assert c.interval_steps(1) == 16 * 16 * 2
    for ell in range(2, 8):
        assert c.budget(ell) == pytest.approx(2.0 ** (-0.25 * ell), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(C_K=st.floats(1.0, 3.0), alpha=st.floats(0.1, 0.45))
def test_set_CK_grid_and_budget(C_K, alpha):
    beta = 1.0 / (1.0 - 2.0 * alpha) + 0.5
    c = cfg(alpha=alpha, beta=beta, c3=1e6, C_K=C_K)
    steps = c.c2 / c.dt
    assert abs(steps - round(steps)) < 1e-9
    assert c.c2 >= C_K ** (1 / (2 * alpha)) - 1e-9
    assert c.c2 - c.dt < C_K ** (1 / (2 * alpha)) + 1e-9 or c.c2 == 1.0
    for ell in range(2, 6):
        assert c.budget(ell) == pytest.approx(2.0 ** (-alpha * ell), rel=1e-10)


def test_step3_durations():
    c = cfg()
    assert c.step3_nominal(2, 1) == pytest.approx(8.0 * 1.25 * 2.0 ** 5)
    assert c.step3_steps(2, 1) == 320 * 16
    assert c.step3_nominal(0, 3) == pytest.approx(8.0 * 1.25 ** 3)
    assert ce.step3_duration(c, 0, 3) == c.step3_nominal(0, 3)


@settings(max_examples=100, deadline=None)
@given(ell=st.integers(0, 12), k=st.integers(1, 40))
def test_step3_rounding_gap(ell, k):
    c = cfg(varsigma=1.07, beta=2.3)
    gap = c.step3_steps(ell, k) * c.dt - c.step3_nominal(ell, k)
    assert -1e-9 * c.step3_nominal(ell, k) <= gap < c.dt


def test_ell_max_and_residual():
    L = ce.ell_max_for(0.25, 1e-3)
    assert ce.residual_mass(0.25, L) < 1e-3 <= ce.residual_mass(0.25, L - 1)


def test_varpi_identity_and_range():
    x = np.array([[0.3, -0.4], [3.0, 4.0], [30.0, 40.0]])
    y = ce.varpi(x, 2.0)
    np.testing.assert_array_equal(y[0], x[0])
    r = np.linalg.norm(y, axis=1)
    assert r[1] < 3.0 and r[2] <= 3.0 and r[2] > r[1]


@settings(max_examples=60, deadline=None)
@given(x=st.lists(st.floats(-20, 20), min_size=3, max_size=3), a=st.floats(0.5, 5.0))
def test_varpi_jacobian_contractive(x, a):
    J = ce.varpi_jacobian(np.array(x), a)
    assert np.linalg.norm(J, 2) <= 1.0 + 1e-6


def test_rho_euler_step_dead_beat():
    r, f = ce.rho_euler_step(np.zeros(1), np.zeros(1), 1.0, 4.0, 0.1, 1e-14)
    assert r[0] == 0.0 and f[0] == 0.0
    rho = np.array([1e-3])
    dF = np.array([0.2])
    r, f = ce.rho_euler_step(rho, dF, 1.0, 4.0, 0.1, 1e-14)
    assert r[0] == 0.0
    assert rho[0] + (dF[0] + f[0]) * 0.1 == pytest.approx(0.0, abs=1e-15)


def test_rho_ode_extinction_bound():
    loc = ce.localize(get_model("additive_baseline"), math.inf)
    n = 64
    y1 = np.linspace(0.0, 1.0, n + 1)[:, None]
    sol = ce.rho_ode_solve([1.0], y1, loc, 1.2, 4.0, 1 / 16)
    assert sol.extinction_time <= 2.0 * math.sqrt(1.0) / 4.0 + 1e-12
    assert np.all(np.abs(sol.rho[:, 0]) <= ce.rho_bound(1.0, 4.0, sol.t) + 1e-12)
    z = ce.rho_ode_solve([0.0], y1, loc, 1.2, 4.0, 1 / 16)
    assert not np.any(z.rho) and z.extinction_time == 0.0


def test_girsanov_density_examples():
    g = fk.UniformGrid(0.0, 0.01, 100)
    w = fk.WienerPath.white(g, 2, np.random.default_rng(0))
    assert ce.girsanov_density(np.zeros((2, 100)), w) == 1.0
    c = 0.7
    assert ce.girsanov_density(np.full((1, 100), c), np.zeros((1, 100)), 0.01) == pytest.approx(math.exp(-c * c / 2))
    with pytest.raises(OverflowError):
        ce.girsanov_density(np.full((1, 100), 100.0), np.zeros((1, 100)), 0.01)


def test_shift_window():
    assert ce.shift_window(0.5) == pytest.approx(-2 * math.log(1 / 16))
    assert ce.shift_window(0.5) == pytest.approx(5.545, abs=1e-3)
    assert ce.shift_window(10.0) == 40.0


@pytest.mark.parametrize("a, b", [(0.3, 0.5), (0.5, 0.5), (0.0, 0.2), (1.2, 2.0)])
def test_scalar_coupling_properties(a, b):
    rng = np.random.default_rng(3)
    N = 20_000
    U1, U2, s = ce.scalar_shift_coupling(a, b, rng, size=N)
    assert stats.kstest(U1, "norm").pvalue > 1e-3
    assert stats.kstest(U2, "norm").pvalue > 1e-3
    np.testing.assert_allclose(U2[s] - U1[s], a, atol=1e-12)
    assert np.all(np.abs(U2 - U1) <= ce.shift_window(b) + 1e-9)
    p = ce.scalar_coupling_success_prob(a, b)
    if b < 1:
        assert 1 - b <= p <= 1 - b / 2 + 1e-12
    se = math.sqrt(p * (1 - p) / N) + 1e-12
    assert abs(s.mean() - p) <= 4 * se


def test_scalar_coupling_rejects_bad_budget():
    with pytest.raises(ValueError):
        ce.scalar_shift_coupling(0.1, 0.0, np.random.default_rng(0))


def test_lift_shift_direction():
    rng = np.random.default_rng(4)
    g = rng.standard_normal((2, 32))
    dt = 1 / 16
    dW1, dW2 = ce.CouplingEngine.lift(g, dt, 0.3, 1.1, rng)
    a = math.sqrt(np.sum(g * g) * dt)
    np.testing.assert_allclose(dW2 - dW1, 0.8 * g * dt / a, atol=1e-14)
    e1, e2 = ce.CouplingEngine.lift(g, dt, 0.5, 0.5, rng)
    np.testing.assert_array_equal(e1, e2)


def test_lift_marginal_is_brownian():
    rng = np.random.default_rng(5)
    g = np.ones((1, 8))
    dt = 0.25
    X = np.array([ce.CouplingEngine.lift(g, dt, rng.standard_normal(), 0.0, rng)[0][0] for _ in range(4000)])
    cov = np.cov(X.T)
    np.testing.assert_allclose(cov, dt * np.eye(8), atol=0.03)


def test_kappa1_linear_model():
    loc = ce.localize(get_model("additive_baseline"), math.inf)
    assert ce.kappa1_estimate(loc) == pytest.approx(1.2)
    with pytest.raises(ValueError):
        ce.localize(get_model("additive_baseline"), 0.0)


def test_kbar_scalar():
    assert ce.kbar_estimate(get_model("additive_baseline"), 3.0) == pytest.approx(6.0)


def test_context_fills_constants(ctx):
    c = ctx.config
    assert c.Kbar == pytest.approx(4.0)
    assert c.kappa2 == pytest.approx(8.0)
    assert math.isinf(c.local_radius)
    assert ctx.girsanov_cap > 0


def test_tau0(ctx):
    eng = ce.CouplingEngine(ctx)
    # Psi >= 1, so the sum is at least 2 and tau0 >= log 2 / log(1/rho)
    assert eng.tau0([0.0], [0.0]) == math.ceil(math.log(0.5) / math.log(0.6))
    n = eng.tau0([50.0], [-50.0])
    s = 2 * (1 + 2500.0) ** ((2 * 0.65 - 1) / 4)
    assert n == math.ceil(math.log(1 / s) / math.log(0.6))


def test_identical_starts_merge_at_first_attempt(ctx):
    res = ce.run_coupling(ctx, [0.4], [0.4], 50.0, np.random.default_rng(1), past="zero")
    assert res.coupled
    first = next(r for r in res.records if r.attempted)
    assert res.tau_inf == first.tau_prev
    assert first.branch in ("coupled", "swapped") and first.girsanov_l2 == 0.0
    assert all(not r.admissible for r in res.records[:-1])


def test_censored_before_tau0(ctx):
    res = ce.run_coupling(ctx, [50.0], [-50.0], 0.5, np.random.default_rng(1))
    assert res.censored and math.isinf(res.tau_inf) and res.records == []


def test_run_deterministic_and_schedule(ctx):
    a = ce.run_coupling(ctx, [1.0], [-1.0], 300.0, np.random.default_rng(7))
    b = ce.run_coupling(ctx, [1.0], [-1.0], 300.0, np.random.default_rng(7))
    assert a.tau_inf == b.tau_inf and len(a.records) == len(b.records)
    np.testing.assert_array_equal(a.state.X1, b.state.X1)
    assert ce.schedule_violations(a.records, ctx.config) == []
    rows = list(ce.trial_log_rows(a.records))
    assert len(rows) == len(a.records) and set(rows[0]) == set(ce.TRIAL_LOG_HEADER)
    if a.coupled:
        np.testing.assert_array_equal(a.state.X1, a.state.X2)


def test_zero_drift_history_is_admissible(ctx):
    st_ = ce.initial_state(ctx.config, [1.0], [-1.0], "zero")
    assert ce.gS_weighted_integral(np.zeros((1, 64)), 1 / 16, 0.25, 0.7) == 0.0
    rep = ce.check_admissibility(st_, ctx)
    assert rep.passed and rep.sup_T_integral == 0.0


def test_measure_CK_floor(ctx):
    from dataclasses import replace
    c = replace(ctx.config)
    local = ce.CouplingContext(c, ctx.model, ctx.loc, ctx.kernel, ctx.kappa1, ctx.kappa2, ctx.Kbar,
                               ctx.girsanov_cap)
    v = ce.measure_CK(local, 4, np.random.default_rng(2))
    assert v >= 1.0


def test_step3_rounding_at_deep_levels():
    # nominal durations up to ~1e13 steps must still be rounded up, never down
    c = cfg(K=4.0, c3=8.0, beta=2.05, varsigma=1.02)
    for ell in (11, 17, 20, 30):
        for k in range(1, 8):
            gap = c.step3_steps(ell, k) * c.dt - c.step3_nominal(ell, k)
            assert 0.0 <= gap < c.dt
