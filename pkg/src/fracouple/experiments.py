"""Monte Carlo estimation of the coupling-time tail and the validation suite."""
from __future__ import annotations

import csv
import logging
import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import stats

from . import coupling_engine as ce
from . import fractional_kernels as fk
from .sde_models import contraction_estimate, get_model

log = logging.getLogger(__name__)

# spawn keys reserved for calibration streams (replicas use (r,))
CALIBRATION_KEY = 2 ** 40


def replica_rng(master_seed: int, r: int) -> np.random.Generator:
    """Counter-based stream for replica ``r``: Philox keyed by ``SeedSequence(master, spawn_key=(r,))``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(int(r),))))


def calibration_rng(master_seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(master_seed, spawn_key=(CALIBRATION_KEY, int(tag)))))


@dataclass
class ExperimentConfig:
    model: str
    coupling: ce.CouplingConfig
    n_replicas: int
    t_max: float
    seed: int
    workers: int = 1
    x1: tuple = (1.0,)
    x2: tuple = (-1.0,)
    past: str = "random"          # "random" or "zero"
    model_kwargs: dict = field(default_factory=dict)
    n_contraction_paths: int = 64
    n_ck_runs: int = 64
    n_t_nodes: int = 64
    fit_window: tuple = (0.05, 0.8)
    rate_eps: float = 0.025
    confidence: float = 0.95
    outputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n_replicas) < 1:
            raise ValueError("n_replicas must be >= 1")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if int(self.workers) < 1:
            raise ValueError("workers must be >= 1")
        if self.past not in ("random", "zero"):
            raise ValueError("past must be 'random' or 'zero'")
        lo, hi = self.fit_window
        if not 0 < lo < hi < 1:
            raise ValueError("fit_window must satisfy 0 < lo < hi < 1")


@dataclass
class TailEstimate:
    t: np.ndarray
    survival: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_at_risk: np.ndarray
    n_replicas: int
    n_censored: int
    slope: float
    slope_ci: tuple
    reliable: bool
    n_fit_events: int
    t_max: float
    taus: np.ndarray
    eps_horizon: float = float("nan")
    message: str = ""


# -------------------------------------------------------------- survival

def clopper_pearson(k: np.ndarray, n: int, conf: float = 0.95):
    a = 0.5 * (1.0 - conf)
    k = np.asarray(k)
    lo = np.where(k > 0, stats.beta.ppf(a, k, n - k + 1), 0.0)
    hi = np.where(k < n, stats.beta.ppf(1 - a, k + 1, n - k), 1.0)
    return lo, hi


def default_t_nodes(t_max: float, n: int, t_min: float | None = None) -> np.ndarray:
    t_min = t_max * 1e-3 if t_min is None else t_min
    return np.concatenate([[0.0], np.geomspace(t_min, t_max, n)])


def survival_from_taus(taus, t_max: float, t_nodes=None, fit_window=(0.05, 0.8), conf: float = 0.95,
                       n_t_nodes: int = 64, eps_horizon: float = float("nan")) -> TailEstimate:
    """Binomial survival estimate with common censoring at ``t_max``.

    ``taus`` holds merge times, ``inf`` for censored replicas.  Each node gets a
    Clopper-Pearson interval; the slope of ``log S`` against ``log t`` is fitted
    by least squares on nodes with ``S`` inside ``fit_window``.
    """
    taus = np.asarray(taus, dtype=float)
    n = taus.size
    if t_nodes is None:
        t_nodes = default_t_nodes(t_max, n_t_nodes)
    t = np.asarray(t_nodes, dtype=float)
    if np.any(t > t_max * (1 + 1e-12)):
        raise ValueError("survival nodes must not exceed t_max")
    at_risk = np.array([(taus > x).sum() for x in t])
    S = at_risk / n
    lo, hi = clopper_pearson(at_risk, n, conf)
    w_lo, w_hi = fit_window
    sel = (t > 0) & (S >= w_lo) & (S <= w_hi)
    events = taus[np.isfinite(taus) & (taus <= t_max)]
    if sel.sum() >= 3:
        tw = t[sel]
        n_ev = int(((events >= tw.min()) & (events <= tw.max())).sum())
        fit = stats.linregress(np.log(tw), np.log(S[sel]))
        q = stats.t.ppf(0.5 + 0.5 * conf, max(1, sel.sum() - 2))
        slope, ci = float(fit.slope), (float(fit.slope - q * fit.stderr), float(fit.slope + q * fit.stderr))
        reliable = n_ev >= 10
        msg = "" if reliable else f"only {n_ev} uncensored replicas in the fit window"
    else:
        slope, ci, reliable, n_ev = float("nan"), (float("nan"), float("nan")), False, 0
        msg = "fit window holds fewer than 3 nodes; slope undefined"
    return TailEstimate(t, S, lo, hi, at_risk, n, int((~np.isfinite(taus) | (taus > t_max)).sum()),
                        slope, ci, reliable, n_ev, t_max, taus, eps_horizon, msg)


# ------------------------------------------------------------- contexts

def prepare_context(cfg: ExperimentConfig) -> ce.CouplingContext:
    """Contraction estimate, derived constants and ``C_K`` (each only when missing)."""
    model = get_model(cfg.model, **cfg.model_kwargs)
    cc = replace(cfg.coupling)
    if cc.rho_hat is None:
        rep = contraction_estimate(model, cc.kernel(), cfg.n_contraction_paths, calibration_rng(cfg.seed, 1))
        if not rep.passed:
            raise ValueError(f"contraction estimate failed: {rep.message}")
        cc.rho_hat = rep.rho_hat
    ctx = ce.build_context(model, cc, calibration_rng(cfg.seed, 2))
    if ctx.config.C_K is None:
        ce.measure_CK(ctx, cfg.n_ck_runs, calibration_rng(cfg.seed, 3), apply=True)
    floor = ctx.config.c3_floor()
    if ctx.config.c3 < floor - 1e-12:
        raise ValueError(f"c3 = {ctx.config.c3} below its floor max(2*c2, log(delta1/2)/log(rho)) = {floor:.4g}")
    return ctx


# ------------------------------------------------------------ replicas

_WORKER: dict = {}


def _init_worker(ctx, x1, x2, t_max, seed, past):
    _WORKER.update(ctx=ctx, x1=x1, x2=x2, t_max=t_max, seed=seed, past=past)


def _run_replica(r: int):
    w = _WORKER
    rng = replica_rng(w["seed"], r)
    out = ce.run_coupling(w["ctx"], w["x1"], w["x2"], w["t_max"], rng,
                          past="zero" if w["past"] == "zero" else None)
    return r, out.tau_inf if not out.censored else math.inf, len(out.records)


def run_replicas(ctx: ce.CouplingContext, cfg: ExperimentConfig, sampler: Callable | None = None):
    """Merge times ordered by replica index; ``sampler(r, rng) -> tau`` overrides the engine."""
    n = int(cfg.n_replicas)
    taus = np.empty(n)
    if sampler is not None:
        for r in range(n):
            taus[r] = sampler(r, replica_rng(cfg.seed, r))
        return taus
    args = (ctx, np.asarray(cfg.x1, float), np.asarray(cfg.x2, float), cfg.t_max, cfg.seed, cfg.past)
    if cfg.workers == 1:
        _init_worker(*args)
        res = [_run_replica(r) for r in range(n)]
    else:
        with mp.get_context("fork").Pool(cfg.workers, initializer=_init_worker, initargs=args) as pool:
            res = pool.map(_run_replica, range(n), chunksize=max(1, n // (8 * cfg.workers)))
    for r, tau, _ in sorted(res):
        taus[r] = tau
    return taus


def estimate_coupling_tail(cfg: ExperimentConfig, ctx: ce.CouplingContext | None = None,
                           sampler: Callable | None = None, t_nodes=None) -> TailEstimate:
    if sampler is None and ctx is None:
        ctx = prepare_context(cfg)
    taus = run_replicas(ctx, cfg, sampler)
    eps_h = ce.residual_mass(cfg.coupling.alpha, cfg.coupling.ell_max)
    return survival_from_taus(taus, cfg.t_max, t_nodes, cfg.fit_window, cfg.confidence, cfg.n_t_nodes, eps_h)


@dataclass
class TVBound:
    t: np.ndarray
    estimate: np.ndarray
    upper: np.ndarray


def estimate_tv_bound(tail: TailEstimate, t_nodes=None) -> TVBound:
    """Upper confidence curve of ``P(tau_inf > t)`` (the coupling-inequality bound) on ``t_nodes``."""
    if t_nodes is None:
        return TVBound(tail.t.copy(), tail.survival.copy(), tail.ci_hi.copy())
    t_nodes = np.asarray(t_nodes, dtype=float)
    idx = np.searchsorted(tail.t, t_nodes, side="right") - 1
    if np.any(idx < 0) or np.any(t_nodes > tail.t_max):
        raise ValueError("t nodes outside the estimated range")
    # survival is right-continuous and piecewise constant between estimated nodes;
    # at non-estimated nodes recompute from the stored merge times.
    out = survival_from_taus(tail.taus, tail.t_max, t_nodes)
    return TVBound(t_nodes, out.survival, out.ci_hi)


@dataclass
class RateFit:
    abs_slope: float
    slope_ci: tuple
    envelope_exponent: float
    consistent: str          # "true", "false" or "undetermined"
    message: str


def rate_fit(tail: TailEstimate, eps: float = 0.025) -> RateFit:
    """Compare the fitted decay with a ``t^{-(1/8 - eps)}`` envelope.

    ``consistent = "true"`` when the decay is at least as fast as the envelope
    within the slope CI (or the survival reaches 0 inside the horizon);
    ``"false"`` when the whole CI lies above ``-(1/8 - eps)`` for a reliable fit;
    ``"undetermined"`` when no reliable slope exists.
    """
    p = 0.125 - eps
    S = tail.survival
    if np.any(S[tail.t > 0] == 0.0):
        return RateFit(tail.slope if np.isfinite(tail.slope) else math.inf, tail.slope_ci, p, "true",
                       "survival reaches zero before t_max (faster than any power law)")
    if not np.isfinite(tail.slope) or not tail.reliable:
        return RateFit(abs(tail.slope) if np.isfinite(tail.slope) else float("nan"), tail.slope_ci, p,
                       "undetermined", tail.message or "no reliable slope")
    lo, hi = tail.slope_ci
    if lo <= -p:
        return RateFit(abs(tail.slope), tail.slope_ci, p, "true",
                       f"decay at least t^-{p:.4g} is within the slope CI")
    return RateFit(abs(tail.slope), tail.slope_ci, p, "false",
                   f"slope CI [{lo:.4g}, {hi:.4g}] lies above -{p:.4g}")


def write_survival_csv(path, tail: TailEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "survival", "ci_lo", "ci_hi", "n_at_risk"])
        for row in zip(tail.t, tail.survival, tail.ci_lo, tail.ci_hi, tail.n_at_risk):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), repr(float(row[3])),
                        int(row[4])])


# ------------------------------------------------------------ validation

@dataclass
class CheckItem:
    item: str
    status: str
    value: float
    threshold: float


def _item(name, ok, value, threshold) -> CheckItem:
    return CheckItem(name, "pass" if ok else "fail", float(value), float(threshold))


def fou_exact(x0: float, dB: np.ndarray, dt: float, lam: float = 1.0) -> np.ndarray:
    """Exact solution of ``dX = -lam X dt + dB`` for piecewise-linear ``B`` (nodes)."""
    n = dB.shape[-1]
    e = math.exp(-lam * dt)
    # over a cell with constant slope s = dB/dt: X' = -lam X + s
    out = np.empty(dB.shape[:-1] + (n + 1,))
    out[..., 0] = x0
    x = np.full(dB.shape[:-1], float(x0))
    for i in range(n):
        s = dB[..., i] / dt
        x = x * e + s / lam * (1.0 - e)
        out[..., i + 1] = x
    return out


def euler_order(H: float, n_paths: int, rng: np.random.Generator, dts=(2 ** -6, 2 ** -7, 2 ** -8, 2 ** -9, 2 ** -10),
                x0: float = 1.0) -> float:
    """Slope of ``log E|X^dt_1 - X_1|`` against ``log dt`` for the fOU Euler scheme.

    The reference is the exact solution for the fBm sampled on the finest grid
    (piecewise linear between fine nodes); coarse grids aggregate the same path.
    """
    fine = min(dts)
    nf = int(round(1.0 / fine))
    kp = fk.KernelParams(H)
    dBf = fk.fgn_batch(H, nf, n_paths, rng, fine)         # (n_paths, nf)
    ref = fou_exact(x0, dBf, fine)[:, -1]
    errs = []
    for dt in dts:
        m = int(round(dt / fine))
        dB = dBf.reshape(n_paths, -1, m).sum(axis=2)
        x = np.full(n_paths, x0)
        for i in range(dB.shape[1]):
            x = x - x * dt + dB[:, i]
        errs.append(np.mean(np.abs(x - ref)))
    del kp
    return float(stats.linregress(np.log(dts), np.log(errs)).slope)


def validate_suite(model_name: str = "additive_baseline", H: float = 0.7, seed: int = 0,
                   alpha_scale: float = 1.0, dt_ceiling: float = 2 ** -6, dts=None,
                   quick: bool = True) -> list[CheckItem]:
    """Run the oracle checks in order; returns one item per check.

    ``alpha_scale`` multiplies the fBm normalization used by the mvn-map item
    (a calibration sensitivity hook); ``dts`` overrides the Euler-order grid.
    """
    rng = np.random.default_rng(seed)
    items: list[CheckItem] = []
    n_paths = 4000 if quick else 100000

    # fGn covariance (lags 0..8 on a 256-grid)
    n = 256
    X = fk.fgn_batch(H, n, n_paths, rng)
    emp = np.array([np.mean(X[:, :n - k] * X[:, k:]) for k in range(9)])
    prods = [X[:, :n - k] * X[:, k:] for k in range(9)]
    se = np.array([np.std(p.mean(axis=1)) / math.sqrt(n_paths) for p in prods])
    z = np.max(np.abs(emp - fk.fgn_autocov(H, np.arange(9))) / se)
    items.append(_item("fgn_covariance", z <= 3.5, z, 3.5))

    # mvn_map variance calibration
    kp = fk.KernelParams(H, T_hist=64.0)
    kp = replace(kp, alpha_H=kp.alpha_H * alpha_scale)
    dt = 1 / 64
    M = kp.n_hist(dt)
    m = 400 if quick else 4000
    g = fk.UniformGrid(-kp.T_hist, dt, M + 64)
    B1 = np.empty(m)
    for i in range(m):
        w = fk.WienerPath.white(g, 1, rng)
        B1[i] = fk.mvn_map(w, kp).increments.sum()
    target = 1.0 - fk.truncation_deficit(H, kp.T_hist)
    zv = abs(B1.var(ddof=1) - target) / (target * math.sqrt(2.0 / (m - 1)))
    items.append(_item("mvn_map_variance", zv <= 3.5, zv, 3.5))

    # r_operator against adaptive quadrature (g = 1 on [-1, 0], T = 0, t = 1)
    from scipy.integrate import quad
    oracle = quad(lambda u: u ** (H - 0.5) / (1 + u), 0, 1, epsabs=0, epsrel=1e-13)[0]
    hg = fk.UniformGrid(-1.0, 1 / 64, 64)
    v = fk.r_operator(np.ones((1, 64)), hg, 0.0, np.array([1.0]), H)[0, 0]
    rel = abs(v - oracle) / oracle
    items.append(_item("r_operator_oracle", rel <= 1e-6, rel, 1e-6))

    # inversion round trip
    kp0 = fk.KernelParams(H, T_hist=8.0)
    dt = 1 / 128
    tt = (np.arange(128) + 0.5) * dt
    f = (tt * (1 - tt))[None, :]
    hist = np.sin(np.arange(kp0.n_hist(dt)) * dt)[None, :]
    gw = fk.gb_to_gw(f, hist, kp0, dt)
    back = fk.gw_to_gb(gw, hist, kp0, dt)
    rt = float(np.max(np.abs(back - f)) / np.max(np.abs(f)))
    items.append(_item("inversion_round_trip", rt <= 1e-6, rt, 1e-6))

    # Euler vs exact fOU
    if dts is None:
        dts = (2 ** -6, 2 ** -7, 2 ** -8, 2 ** -9, 2 ** -10)
    slope = euler_order(H, 100, rng, dts)
    ok = 0.8 <= slope <= 1.2 and max(dts) <= dt_ceiling
    items.append(_item("euler_order", ok, slope, 0.8))

    # H1/H2 on builtin models
    from .sde_models import check_h1, check_h2, planar_rotation, shear_counterexample
    r1 = check_h1(planar_rotation(), beta0=2.0, kappa0=2.0, n_probe=1024)
    items.append(_item("h1_planar_rotation", r1.passed, r1.max_violation, 0.0))
    r2 = check_h2(shear_counterexample(), n_probe=256)
    items.append(_item("h2_counterexample_rejected", not r2.passed, r2.max_integrability_error, 0.0))
    r3 = check_h2(get_model(model_name), n_probe=256)
    items.append(_item(f"h2_{model_name}", r3.passed, r3.max_integrability_error, 0.0))

    # rho bound
    from .sde_models import scalar_sin
    loc = ce.LocalizedModel(scalar_sin(), 5.0)
    k1 = ce.kappa1_estimate(loc, n_probe=512)
    k2 = 4.0
    worst = 0.0
    for _ in range(50 if quick else 1000):
        y1 = np.cumsum(rng.normal(0, 0.25, (65, 1)), axis=0)
        r0 = rng.uniform(-3, 3, 1)
        sol = ce.rho_ode_solve(r0, y1, loc, k1, k2, 1 / 64)
        worst = max(worst, float(np.max(np.abs(sol.rho[:, 0]) - ce.rho_bound(abs(r0[0]), k2, sol.t))))
    items.append(_item("rho_bound", worst <= 1e-12, worst, 1e-12))

    # Girsanov martingale mean
    nd = 20000 if quick else 100000
    dt = 1 / 64
    gdet = np.sin(2 * np.pi * (np.arange(64) + 0.5) * dt)
    W = rng.standard_normal((nd, 64)) * math.sqrt(dt)
    D = np.exp(W @ gdet - 0.5 * np.sum(gdet ** 2) * dt)
    zg = abs(D.mean() - 1) / (D.std() / math.sqrt(nd))
    items.append(_item("girsanov_mean", zg <= 3.5, zg, 3.5))

    # scalar coupling statistics
    b, a = 0.5, 0.25
    U1, U2, s = ce.scalar_shift_coupling(a, b, rng, 20000 if quick else 100000)
    p = s.mean()
    sep = math.sqrt(p * (1 - p) / s.size)
    ok = (1 - b - 3 * sep <= p <= 1 - b / 2 + 3 * sep and stats.kstest(U1, "norm").pvalue > 0.01
          and stats.kstest(U2, "norm").pvalue > 0.01 and np.max(np.abs(U2 - U1)) <= ce.shift_window(b))
    items.append(_item("scalar_coupling", ok, p, 1 - b))

    # Step-1 marginal KS (small sample) and schedule invariants on a short run
    model = get_model(model_name)
    cc = ce.CouplingConfig(H=H, theta=0.5 * (H + 0.5) + 0.05, alpha=0.25, K=10.0, c3=4.0, beta=2.5,
                           varsigma=1.25, dt=1 / 16, T_hist=16.0, delta1=0.0, C_K=1.0, rho_hat=0.8)
    ctx = ce.build_context(model, cc, rng)
    eng = ce.CouplingEngine(ctx)
    nks = 300 if quick else 10000
    W2 = np.empty((nks, cc.n1))
    for i in range(nks):
        st = ce.initial_state(ctx.config, [1.0] * model.d, [-1.0] * model.d, "zero", capacity_time=4.0)
        rec = ce.TrialRecord(1, st.i)
        i0 = st.i
        eng.step1_attempt(st, rng, rec)
        W2[i] = st.W2_increments(i0, i0 + cc.n1)[0]
    pmin = min(stats.kstest(W2[:, j] / math.sqrt(cc.dt), "norm").pvalue for j in range(cc.n1))
    items.append(_item("step1_marginal_ks", pmin > 0.01 / cc.n1, pmin, 0.01 / cc.n1))
    viol = []
    for r in range(5):
        out = ce.run_coupling(ctx, [2.0] * model.d, [-2.0] * model.d, 200.0, rng)
        viol += ce.schedule_violations(out.records, ctx.config)
    items.append(_item("schedule_invariants", not viol, len(viol), 0))
    return items


def format_report(items) -> str:
    lines = ["item,status,value,threshold"]
    lines += [f"{c.item},{c.status},{c.value!r},{c.threshold!r}" for c in items]
    return "\n".join(lines) + "\n"
