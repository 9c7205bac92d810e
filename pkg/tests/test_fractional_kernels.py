import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

import oracles
from fracouple import fractional_kernels as fk

H_VALUES = st.floats(min_value=0.55, max_value=0.95)


# ------------------------------------------------------------ constants

@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
@pytest.mark.parametrize("H", [0.55, 0.7, 0.85, 0.95])
def test_alpha_h_closed_form_matches_quadrature(H):
    # the quadrature tail decays like s^(2H-3), which limits the oracle to ~1e-9 near H = 1
    assert fk.alpha_h(H) == pytest.approx(oracles.alpha_h_quadrature(H), rel=1e-8)
    assert fk.calibrate_alpha_h(H) == pytest.approx(fk.alpha_h(H), rel=1e-8)


def test_inversion_constant_value():
    assert fk.inversion_constant(0.7) == pytest.approx(math.cos(0.7 * math.pi) / math.pi, rel=1e-14)


def test_fgn_autocov_matches_fbm_covariance():
    for H in (0.6, 0.75, 0.9):
        k = np.arange(20)
        np.testing.assert_allclose(fk.fgn_autocov(H, k), oracles.fgn_autocov_from_fbm(H, k), rtol=1e-12, atol=1e-15)


# ------------------------------------------------------------ grids

def test_grid_index_and_errors():
    g = fk.UniformGrid(-1.0, 0.25, 8)
    assert g.index(0.0) == 4
    assert g.t_end == 1.0
    with pytest.raises(ValueError):
        g.index(0.1)
    with pytest.raises(fk.CoverageError):
        g.index(2.0)
    with pytest.raises(ValueError):
        fk.UniformGrid(0.0, -1.0, 4)


# ------------------------------------------------------------ fGn

def test_fgn_near_half_is_white():
    rng = np.random.default_rng(1)
    X = fk.fgn_batch(0.5 + 1e-9, 64, 20000, rng, dt=1 / 64)
    assert X.var() * 64 == pytest.approx(1.0, rel=0.02)
    c1 = np.mean(X[:, :-1] * X[:, 1:]) * 64
    assert abs(c1) < 0.01


def test_fbm_covariance_on_subgrid():
    rng = np.random.default_rng(2)
    H = 0.7
    grid = fk.UniformGrid(0.0, 1 / 256, 256)
    n = 40000
    B = np.concatenate([np.zeros((n, 1)), np.cumsum(fk.fgn_batch(H, 256, n, rng, 1 / 256), axis=1)], axis=1)
    idx = np.arange(16, 257, 16)
    t = grid.times()[idx]
    P = B[:, idx]
    emp = P.T @ P / n
    se = np.sqrt((P[:, :, None] ** 2 * P[:, None, :] ** 2).mean(axis=0) - emp ** 2) / math.sqrt(n)
    ref = oracles.fbm_cov(t[:, None], t[None, :], H)
    z = np.abs(emp - ref) / se
    assert z.max() < 4.5  # 256 entries, strongly correlated
    assert np.median(z) < 1.5


def test_sample_fgn_shapes():
    g = fk.UniformGrid(0.0, 0.125, 8)
    p = fk.sample_fgn(fk.KernelParams(0.7), g, 3, np.random.default_rng(0))
    assert p.increments.shape == (3, 8)
    with pytest.raises(ValueError):
        fk.sample_fgn(fk.KernelParams(0.7), g, 0, np.random.default_rng(0))


# ------------------------------------------------------------ mvn map

def test_mvn_weights_first_cell():
    c = fk.mvn_weights(0.7, 16)
    assert c[0] == pytest.approx(1 / 1.2)
    # weights integrate the kernel: sum_{m<=M} c_m = M-th partial of the step response
    assert np.all(c > 0)


def test_mvn_map_zero_and_linear():
    kp = fk.KernelParams(0.7, T_hist=4.0)
    g = fk.UniformGrid(-4.0, 1 / 16, 96)
    z = fk.WienerPath.zeros(g, 1)
    assert not np.any(fk.mvn_map(z, kp).increments)
    rng = np.random.default_rng(3)
    w1, w2 = fk.WienerPath.white(g, 2, rng), fk.WienerPath.white(g, 2, rng)
    s = fk.WienerPath(g, w1.increments + w2.increments)
    np.testing.assert_allclose(fk.mvn_map(s, kp).increments,
                               fk.mvn_map(w1, kp).increments + fk.mvn_map(w2, kp).increments, atol=1e-12)


def test_mvn_map_coverage_error():
    kp = fk.KernelParams(0.7, T_hist=4.0)
    g = fk.UniformGrid(-1.0, 1 / 16, 32)
    with pytest.raises(fk.CoverageError, match="insufficient past coverage"):
        fk.mvn_map(fk.WienerPath.zeros(g, 1), kp, start=0.0)


def test_mvn_map_consistent_with_gw_to_gb():
    """dB2 - dB1 from mvn_map on W and W + int g equals gw_to_gb(g) dt."""
    kp = fk.KernelParams(0.7, T_hist=4.0)
    dt = 1 / 32
    M = kp.n_hist(dt)
    g = fk.UniformGrid(-4.0, dt, M + 32)
    rng = np.random.default_rng(4)
    w1 = fk.WienerPath.white(g, 1, rng)
    gw = np.zeros((1, M + 32))
    gw[0, M:] = np.sin(np.linspace(0, 3, 32))
    w2 = fk.WienerPath(g, w1.increments + gw * dt)
    diff = fk.mvn_map(w2, kp).increments - fk.mvn_map(w1, kp).increments
    gb = fk.gw_to_gb(gw[:, M:], None, kp, dt)
    np.testing.assert_allclose(diff, gb * dt, atol=1e-13)


# ------------------------------------------------------------ R_T operator

def test_r_operator_reference_value():
    H = 0.7
    v_star = quad(lambda u: u ** 0.2 / (1 + u), 0, 1, epsabs=0, epsrel=1e-13, limit=200)[0]
    g = fk.UniformGrid(-1.0, 1 / 64, 64)
    v = fk.r_operator(np.ones((1, 64)), g, 0.0, np.array([1.0]), H)[0, 0]
    assert v == pytest.approx(v_star, rel=1e-6)


def test_r_operator_zero_and_monotone():
    g = fk.UniformGrid(-1.0, 1 / 32, 32)
    assert not np.any(fk.r_operator(np.zeros((2, 32)), g, 0.5, np.array([0.3, 2.0]), 0.7))
    t = np.linspace(1.0, 8.0, 30)
    r = fk.r_operator(np.ones((1, 32)), g, 0.0, t, 0.7)[0]
    assert np.all(np.diff(r) < 0)


def test_r_operator_rejects_bad_grid():
    g = fk.UniformGrid(-1.0, 1 / 32, 16)
    with pytest.raises(ValueError, match="end at 0"):
        fk.r_operator(np.ones((1, 16)), g, 0.0, np.array([1.0]), 0.7)


@settings(max_examples=25, deadline=None)
@given(H=H_VALUES, T=st.floats(0.0, 3.0), t=st.floats(0.01, 50.0), a=st.floats(-3, 3))
def test_r_operator_linear_and_matches_simpson(H, T, t, a):
    g = fk.UniformGrid(-1.0, 1 / 16, 16)
    vals = np.cos(np.arange(16) / 3.0)
    r = fk.r_operator(vals[None], g, T, np.array([t]), H)[0, 0]
    ra = fk.r_operator(a * vals[None], g, T, np.array([t]), H)[0, 0]
    assert ra == pytest.approx(a * r, rel=1e-12, abs=1e-14)
    ref = oracles.r_operator_simpson(vals, -1.0, 1 / 16, T, t, H, nodes_per_cell=2048)
    assert r == pytest.approx(ref, rel=1e-6, abs=1e-12)


# ------------------------------------------------------------ inversion pair

def test_forward_map_matches_fractional_integral_oracle():
    """gw_to_gb of t(1-t) converges to the cell averages of alpha_H d/dt int_0^t (t-s)^g s(1-s) ds."""
    H = 0.7
    errs = []
    for n in (64, 256, 1024):
        kp = fk.KernelParams(H, T_hist=2.0)
        dt = 1 / n
        tt = (np.arange(n) + 0.5) * dt
        gb = fk.gw_to_gb((tt * (1 - tt))[None], None, kp, dt)[0]
        F = kp.alpha_H * oracles.rl_forward_poly(np.arange(n + 1) * dt, H)
        errs.append(np.max(np.abs(gb - np.diff(F) / dt)))
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] < 1e-3


def test_inverse_map_matches_fractional_derivative_oracle():
    H = 0.7
    errs = []
    for n in (128, 1024):
        kp = fk.KernelParams(H, T_hist=2.0)
        dt = 1 / n
        tt = (np.arange(n) + 0.5) * dt
        F = kp.alpha_H * oracles.rl_forward_poly(np.arange(n + 1) * dt, H)
        gw = fk.gb_to_gw((np.diff(F) / dt)[None], None, kp, dt)[0]
        errs.append(np.max(np.abs(gw - tt * (1 - tt))))
    assert errs[1] < errs[0]
    assert errs[1] < 1e-3


def test_inverse_zero_input():
    kp = fk.KernelParams(0.7, T_hist=2.0)
    assert not np.any(fk.gb_to_gw(np.zeros((1, 16)), None, kp, 1 / 16))
    assert not np.any(fk.gw_to_gb(np.zeros((1, 16)), np.zeros((1, 32)), kp, 1 / 16))


@settings(max_examples=30, deadline=None)
@given(H=H_VALUES, seed=st.integers(0, 2 ** 16), scale=st.floats(0.1, 10.0))
def test_round_trip_property(H, seed, scale):
    rng = np.random.default_rng(seed)
    kp = fk.KernelParams(H, T_hist=4.0)
    dt = 1 / 32
    f = scale * np.cumsum(rng.normal(size=(2, 32)), axis=1) / 8
    hist = rng.normal(size=(2, kp.n_hist(dt)))
    back = fk.gw_to_gb(fk.gb_to_gw(f, hist, kp, dt), hist, kp, dt)
    np.testing.assert_allclose(back, f, atol=1e-9 * np.abs(f).max())
    lin = fk.gw_to_gb(scale * f, None, kp, dt)
    np.testing.assert_allclose(lin, scale * fk.gw_to_gb(f, None, kp, dt), rtol=1e-12, atol=1e-14)


def test_continuation_drift_cancels_memory():
    kp = fk.KernelParams(0.7, T_hist=4.0)
    dt = 1 / 16
    hist = np.random.default_rng(5).normal(size=(1, kp.n_hist(dt)))
    gS = fk.continuation_drift(hist, 40, kp, dt)
    np.testing.assert_allclose(fk.gw_to_gb(gS, hist, kp, dt), 0.0, atol=1e-10)
    assert not np.any(fk.continuation_drift(np.zeros((1, 8)), 10, kp, dt))


def test_operator_memory_mode_close_to_discrete():
    kp = fk.KernelParams(0.7, T_hist=8.0)
    dt = 1 / 32
    M = kp.n_hist(dt)
    s = -(np.arange(M)[::-1] + 0.5) * dt
    hist = np.where(s > -2.0, np.sin(np.pi * s), 0.0)[None]
    a = fk.gb_to_gw(np.zeros((1, 32)), hist, kp, dt, memory="discrete")
    b = fk.gb_to_gw(np.zeros((1, 32)), hist, kp, dt, memory="operator")
    assert np.max(np.abs(a[:, 4:] - b[:, 4:])) < 0.1 * np.max(np.abs(a))


# ------------------------------------------------------------ Hölder norm and phi

def test_holder_norm_examples():
    g = fk.UniformGrid(0.0, 1 / 64, 64)
    assert fk.holder_norm(np.full(65, 2.0), g, 0.6, 0.0, 1.0) == 0.0
    assert fk.holder_norm(3 * g.times(), g, 0.6, 0.0, 1.0) == pytest.approx(3.0)


def test_holder_norm_brute_force():
    rng = np.random.default_rng(6)
    g = fk.UniformGrid(0.0, 1 / 512, 512)
    v = np.concatenate([[0.0], np.cumsum(rng.normal(0, math.sqrt(1 / 512), 512))])
    t = g.times()
    i, j = np.triu_indices(513, 1)
    brute = np.max(np.abs(v[j] - v[i]) / ((j - i) / 512) ** 0.45)
    assert fk.holder_norm(v, g, 0.45, 0.0, 1.0) == brute
    del t


def test_phi_functional_examples():
    kp = fk.KernelParams(0.7, T_hist=4.0)
    dt = 1 / 32
    g = fk.UniformGrid(-6.0, dt, int(7 / dt))
    assert fk.phi_functional(fk.WienerPath.zeros(g, 1), 0.0, 0.05, kp) == 0.0
    rng = np.random.default_rng(7)
    inc = np.zeros((1, g.n))
    i0 = g.index(-1.0)
    inc[:, i0:] = rng.normal(0, math.sqrt(dt), (1, g.n - i0))
    w = fk.WienerPath(g, inc)
    val = fk.phi_functional(w, 0.0, 0.05, kp)
    assert val == pytest.approx(fk.holder_norm(w.values(), g, 0.45, -1.0, 0.0), rel=1e-12)


def test_phi_functional_refinement_and_methods():
    kp = fk.KernelParams(0.7, T_hist=4.0)
    rng = np.random.default_rng(8)
    dt = 1 / 64
    g = fk.UniformGrid(-6.0, dt, int(6 / dt))
    w = fk.WienerPath.white(g, 1, rng)
    a = fk.phi_functional(w, 0.0, 0.05, kp, method="ipp")
    b = fk.phi_functional(w, 0.0, 0.05, kp, method="direct")
    assert a == pytest.approx(b, rel=1e-8)
    with pytest.raises(fk.CoverageError):
        fk.phi_functional(w, -2.0, 0.05, kp)


def test_memory_decomposition_reconstructs_mvn_increment():
    kp = fk.KernelParams(0.7, T_hist=4.0)
    dt = 1 / 32
    g = fk.UniformGrid(-8.0, dt, int(10 / dt))
    w = fk.WienerPath.white(g, 1, np.random.default_rng(9))
    # zero noise before -2.5 so both truncation conventions see the same past
    w.increments[:, : g.index(-2.5)] = 0.0
    s, t = 1.0, 1.5
    comp = fk.memory_decomposition(w, s, t, [-3.0, -1.0], kp)
    B = fk.mvn_map(w, kp, start=-8.0 + kp.T_hist)
    i_s, i_t = B.grid.index(s), B.grid.index(t)
    direct = B.increments[:, i_s:i_t].sum(axis=1)
    np.testing.assert_allclose(comp.reconstruct(), direct, rtol=1e-6, atol=1e-9)
    one = fk.memory_decomposition(w, s, t, [], kp)
    np.testing.assert_allclose(sum(one.lambdas), sum(comp.lambdas), atol=1e-12)


def test_noise_csv_round_trip(tmp_path):
    g = fk.UniformGrid(0.0, 0.125, 16)
    inc = np.random.default_rng(10).normal(size=(2, 16))
    p = tmp_path / "noise.csv"
    fk.write_noise_csv(p, g, inc)
    w = fk.read_noise_csv(p)
    np.testing.assert_allclose(w.increments, inc, rtol=0, atol=1e-15)
    assert p.read_text().splitlines()[0] == "t,coord_0,coord_1"
