"""Three-step asymptotic coupling of two fBm-driven SDE solutions.

Both systems are integrated by the Euler scheme in Lamperti coordinates
``y = h(x)`` (``dy = F(y) dt + dB`` with ``F = grad_h b`` at ``h^{-1}(y)``), so
the second system sees ``dB2 = dB1 + g_B dt`` and a Step-1 drift ``g_B = f_h``
makes the coordinate gap follow the ``rho`` recursion exactly.

Times are kept as integer step counts on a single global grid whose node 0 is
``-(T_hist + 2)``.  Phase lengths are integers, so the schedule invariants can
be checked exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal
from scipy.special import ndtr, ndtri

from . import fractional_kernels as fk
from .fractional_kernels import KernelParams, UniformGrid, WienerPath
from .fractional_kernels import holder_norm, sample_fgn
from .sde_models import IntegrationError, ModelSpec, integrate, probe_points, psi

log = logging.getLogger(__name__)

PHASES = ("WaitTau0", "Step1", "Step2", "Step3", "Coupled", "Censored")


class RhoSolveError(RuntimeError):
    """A ``rho`` step kept increasing ``|rho|`` after all refinements."""


class GirsanovBudgetError(RuntimeError):
    """``int |g_h|^2`` exceeded the configured budget."""


# ------------------------------------------------------------------ config

def ell_max_for(alpha: float, eps_horizon: float) -> int:
    """Smallest ``L`` with ``sum_{l>L} 2^{-alpha l} < eps_horizon``."""
    q = 2.0 ** (-alpha)
    L = 1
    while q ** (L + 1) / (1.0 - q) >= eps_horizon:
        L += 1
    return L


def residual_mass(alpha: float, L: int) -> float:
    q = 2.0 ** (-alpha)
    return q ** (L + 1) / (1.0 - q)


@dataclass
class CouplingConfig:
    H: float
    theta: float
    alpha: float
    K: float
    c3: float
    beta: float
    varsigma: float
    dt: float = 1.0 / 16
    T_hist: float = 256.0
    c2: float | None = None
    C_K: float | None = None
    delta1: float = 0.9
    tol_stick: float = 1e-8
    tol_inv: float = 1e-6
    tol_zero: float = 1e-14
    eps_horizon: float = 1e-3
    kappa1: float | None = None
    kappa2: float | None = None
    Kbar: float | None = None
    local_radius: float | None = None
    rho_hat: float | None = None
    M_quantile: float = 0.99
    girsanov_cap: float | None = None
    adm_merge_tol: float = 0.05
    quad_nodes: int = 8
    kappa1_safety: float = 1.2
    check_admissibility: bool = True

    def __post_init__(self):
        if not (0.0 < self.alpha < 0.5):
            raise ValueError("alpha must lie in (0, 1/2)")
        if not (0.5 < self.H < 1.0):
            raise ValueError("H must lie in (1/2, 1)")
        if not (0.5 < self.theta < self.H):
            raise ValueError("theta must lie in (1/2, H)")
        if not self.beta > 1.0 / (1.0 - 2.0 * self.alpha):
            raise ValueError("beta must exceed 1/(1-2*alpha) per schedule condition")
        if not self.varsigma > 1.0:
            raise ValueError("varsigma must exceed 1")
        if not self.K > 0:
            raise ValueError("K must be positive")
        if not (0.0 <= self.delta1 < 1.0):
            raise ValueError("delta1 must lie in [0, 1)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n1 = 1.0 / self.dt
        if abs(n1 - round(n1)) > 1e-9:
            raise ValueError("1/dt must be an integer")
        if not self.T_hist > 0:
            raise ValueError("T_hist must be positive")
        if self.C_K is not None and self.c2 is None:
            self.set_CK(self.C_K)
        if self.c2 is not None:
            self._check_c2()

    # derived quantities -------------------------------------------------
    @property
    def n1(self) -> int:
        return int(round(1.0 / self.dt))

    @property
    def eps_theta(self) -> float:
        return 0.5 * (self.H - self.theta)

    @property
    def ell_max(self) -> int:
        return ell_max_for(self.alpha, self.eps_horizon)

    def kernel(self) -> KernelParams:
        return KernelParams(self.H, theta=self.theta, T_hist=self.T_hist, quad_nodes=self.quad_nodes)

    def set_CK(self, C_K: float) -> None:
        """Fix ``c2 = C_K^{1/(2 alpha)}`` rounded up to the grid, then ``C_K = c2^{2 alpha}``."""
        C_K = max(1.0, float(C_K))
        raw = C_K ** (1.0 / (2.0 * self.alpha))
        steps = math.ceil(raw / self.dt - 1e-9)
        self.c2 = steps * self.dt
        self.C_K = self.c2 ** (2.0 * self.alpha)
        self._check_c2()

    def _check_c2(self):
        if self.c2 < 1.0:
            raise ValueError("c2 must be >= 1")
        if abs(self.c2 / self.dt - round(self.c2 / self.dt)) > 1e-9:
            raise ValueError("c2 must be a multiple of dt")
        if self.c3 < 2.0 * self.c2 - 1e-12:
            raise ValueError(f"c3 must be >= 2*c2 (c3={self.c3}, c2={self.c2})")

    def c3_floor(self) -> float:
        """``max(2 c2, log(delta1/2)/log rho_hat)``."""
        f = 2.0 * (self.c2 or 0.5)
        if self.rho_hat is not None and 0 < self.rho_hat < 1 and self.delta1 > 0:
            f = max(f, math.log(self.delta1 / 2.0) / math.log(self.rho_hat))
        return f

    def budget(self, ell: int) -> float:
        """Dyadic budget ``b_l``."""
        if self.C_K is None:
            raise ValueError("C_K not measured")
        if ell <= 1:
            return math.sqrt(self.C_K)
        return self.c2 ** (-self.alpha) * math.sqrt(self.C_K) * 2.0 ** (-self.alpha * ell)

    def interval_steps(self, ell: int) -> int:
        """Length of ``I_l`` in steps: ``c2 2^l / dt``."""
        return int(round(self.c2 / self.dt)) * (2 ** ell)

    def step3_nominal(self, ell: int, k: int) -> float:
        return self.c3 * self.varsigma ** k * 2.0 ** (self.beta * ell)

    def step3_steps(self, ell: int, k: int) -> int:
        """Step-3 duration in whole steps (nominal duration rounded up to the grid)."""
        x = self.step3_nominal(ell, k) / self.dt
        r = round(x)
        # absolute snap: a relative one would swallow whole steps once x is large
        if abs(x - r) <= 1e-9:
            return int(r)
        return int(math.ceil(x))


# -------------------------------------------------------------- localization

def varpi(x: np.ndarray, a: float) -> np.ndarray:
    """Radial retraction onto ``B(0, a+1)``; identity on ``B(0, a)``."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    out = x.copy()
    big = (r > a)[..., 0]
    if np.any(big):
        rb = r[big]
        out[big] = x[big] / rb * (a + 1.0 - np.exp(-(rb - a)))
    return out


def varpi_jacobian(x: np.ndarray, a: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    r = float(np.linalg.norm(x))
    if r <= a:
        return np.eye(d)
    u = x / r
    P = np.outer(u, u)
    return math.exp(-(r - a)) * P + (a + 1.0 - math.exp(-(r - a))) / r * (np.eye(d) - P)


@dataclass
class LocalizedModel:
    """Localized coefficients ``b_a = b o varpi_a`` and ``h_a = h o varpi_a``."""

    model: ModelSpec
    a: float

    def varpi(self, x):
        return x if math.isinf(self.a) else varpi(x, self.a)

    def b_a(self, x):
        return self.model.b(self.varpi(x))

    def h_a(self, x):
        return self.model.h(self.varpi(x))

    def F(self, y: np.ndarray) -> np.ndarray:
        """Lamperti drift of the localized model at ``y`` (batched over rows).

        ``F_a(y) = grad_h(z) grad_varpi(x) b(z)`` with ``z = h^{-1}(y)`` and
        ``x = varpi^{-1}(z)``; zero outside ``h(B(0, a+1))``.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        m = self.model
        z = m.inverse_h(y)
        out = np.einsum("nij,nj->ni", m.grad_h(z), m.b(z))
        if math.isinf(self.a):
            return out
        r = np.linalg.norm(z, axis=1)
        for k in np.flatnonzero(r > self.a):
            rz = r[k]
            if rz >= self.a + 1.0:
                out[k] = 0.0
                continue
            rx = self.a - math.log(self.a + 1.0 - rz)
            x = z[k] / rz * rx
            J = varpi_jacobian(x, self.a)
            out[k] = m.grad_h(z[k][None])[0] @ (J @ m.b(z[k][None])[0])
        return out


def localize(model: ModelSpec, a: float) -> LocalizedModel:
    if not a > 0:
        raise ValueError("localization radius must be positive")
    return LocalizedModel(model, float(a))


def kappa1_estimate(loc: LocalizedModel, n_probe: int = 4096, region: str = "image",
                    safety: float = 1.2, seed: int = 0) -> float:
    """Safety factor times the probed Lipschitz quotient of ``F_a``.

    ``region="ball"`` probes pairs with ``h^{-1}(y)`` in ``B(0, a)``;
    ``region="image"`` probes the whole range ``h(B(0, a+1))`` of the localized
    map, which bounds the global constant needed by the ``rho`` recursion.
    """
    m = loc.model
    if math.isinf(loc.a):
        if m.params.get("linear_rate") is not None:
            return safety * abs(m.params["linear_rate"])
        radius = 50.0
    else:
        radius = loc.a + (1.0 if region == "image" else 0.0)
    z = probe_points(m.d, radius * (1 - 1e-9), n_probe, seed=seed)
    y = m.h(z)
    F = loc.F(y)
    rng = np.random.default_rng(seed + 7)
    best = 0.0
    # local quotients (approximate the derivative) and random far pairs
    for scale in (1e-6, 1e-3, 1e-1):
        z2 = z + scale * radius * rng.standard_normal(z.shape)
        rz = np.linalg.norm(z2, axis=1, keepdims=True)
        z2 = np.where(rz > radius, z2 / rz * radius, z2)
        y2 = m.h(z2)
        dy = np.linalg.norm(y2 - y, axis=1)
        ok = dy > 0
        q = np.linalg.norm(loc.F(y2) - F, axis=1)[ok] / dy[ok]
        best = max(best, float(q.max(initial=0.0)))
    perm = rng.permutation(len(y))
    dy = np.linalg.norm(y[perm] - y, axis=1)
    ok = dy > 0
    best = max(best, float((np.linalg.norm(F[perm] - F, axis=1)[ok] / dy[ok]).max(initial=0.0)))
    return safety * best


def kbar_estimate(model: ModelSpec, K: float, n_probe: int = 2048) -> float:
    """``sup |h(x2) - h(x1)|`` over ``|x1|, |x2| <= K`` by probing (ball plus sphere points)."""
    pts = probe_points(model.d, K, n_probe)
    if model.d == 1:
        extra = np.linspace(-K, K, 4001)[:, None]
    else:
        g = np.random.default_rng(3).standard_normal((n_probe, model.d))
        extra = K * g / np.linalg.norm(g, axis=1, keepdims=True)
    y = model.h(np.concatenate([pts, extra]))
    if model.d == 1:
        return float(y.max() - y.min())
    from scipy.spatial.distance import pdist
    return float(pdist(y).max())


# --------------------------------------------------------- rho recursion

def rho_euler_step(rho: np.ndarray, dF: np.ndarray, k1: float, k2: float, dt: float, tol_zero: float):
    """One explicit Euler step of ``rho' = dF + f(rho)`` with dead-beat absorption.

    Returns ``(rho_next, f)``.  When the candidate step would overshoot zero
    (or ``|rho| < tol_zero``) the drift is chosen so that ``rho_next = 0``.
    """
    r = float(np.linalg.norm(rho))
    if r == 0.0:
        return np.zeros_like(rho), -dF if np.any(dF) else np.zeros_like(rho)
    coef = 1.0 - k1 * dt - k2 * dt / math.sqrt(r)
    if r < tol_zero or coef <= 0.0:
        return np.zeros_like(rho), -rho / dt - dF
    f = -k1 * rho - k2 * rho / math.sqrt(r)
    return rho + (dF + f) * dt, f


def rho_bound(rho0_norm: float, k2: float, t) -> np.ndarray:
    return np.maximum(math.sqrt(rho0_norm) - 0.5 * k2 * np.asarray(t, dtype=float), 0.0) ** 2


@dataclass
class RhoSolution:
    t: np.ndarray
    rho: np.ndarray      # (n+1, d)
    f_nodes: np.ndarray  # (n+1, d) formula -k1 rho - k2 rho/sqrt|rho|
    f_cells: np.ndarray  # (n, d) drift actually applied on each cell
    extinction_time: float


def rho_ode_solve(rho0, y1_path, loc: LocalizedModel, kappa1: float, kappa2: float, dt: float,
                  method: str = "euler", tol_zero: float = 1e-14, tol_mono: float = 1e-12,
                  max_refine: int = 8) -> RhoSolution:
    """Solve ``rho' = F_a(y1 + rho) - F_a(y1) - k1 rho - k2 rho/sqrt|rho|`` on the nodes of ``y1_path``.

    ``method="euler"`` is the scheme used by the coupling (dead-beat absorption,
    satisfies the extinction bound at every node).  ``"split"`` treats the
    square-root term by its exact flow in Strang halves around an RK4 step of the
    Lipschitz part.  ``"rk4"`` is plain RK4 on the full field with the
    absorbing-zero rule; it is kept for comparison and can exceed the bound
    slightly near extinction.
    """
    y1 = np.atleast_2d(np.asarray(y1_path, dtype=float))
    if y1.shape[0] == 1 and y1.shape[1] != np.size(rho0):
        y1 = y1.T
    n = y1.shape[0] - 1
    rho = np.array(rho0, dtype=float).reshape(-1)
    d = rho.size
    out = np.zeros((n + 1, d))
    fc = np.zeros((n, d))
    out[0] = rho
    F = loc.F

    def dF_at(y, r):
        return (F(np.stack([y + r, y]))[0] - F(y[None])[0]) if np.any(r) else np.zeros(d)

    def smooth(y, r):
        return dF_at(y, r) - kappa1 * r

    def full(y, r):
        nr = np.linalg.norm(r)
        return smooth(y, r) - (kappa2 * r / math.sqrt(nr) if nr > 0 else 0.0)

    def sqrt_flow(r, h):
        nr = float(np.linalg.norm(r))
        if nr == 0.0:
            return r
        s = math.sqrt(nr) - 0.5 * kappa2 * h
        return r * (s * s / nr) if s > 0 else np.zeros_like(r)

    for i in range(n):
        if not np.any(rho):
            out[i + 1:] = 0.0
            fc[i:] = 0.0
            break
        ya, yb = y1[i], y1[i + 1]
        if method == "euler":
            dF = dF_at(ya, rho)
            new, f = rho_euler_step(rho, dF, kappa1, kappa2, dt, tol_zero)
            fc[i] = f
        elif method in ("split", "rk4"):
            new = None
            sub = 1
            for _ in range(max_refine + 1):
                r = rho.copy()
                h = dt / sub
                for j in range(sub):
                    t0 = j / sub
                    y_at = (lambda s, t0=t0: ya + (yb - ya) * (t0 + s / dt))
                    if method == "split":
                        r = sqrt_flow(r, 0.5 * h)
                        if np.any(r):
                            k_1 = smooth(y_at(0), r)
                            k_2 = smooth(y_at(0.5 * h), r + 0.5 * h * k_1)
                            k_3 = smooth(y_at(0.5 * h), r + 0.5 * h * k_2)
                            k_4 = smooth(y_at(h), r + h * k_3)
                            r = r + h / 6.0 * (k_1 + 2 * k_2 + 2 * k_3 + k_4)
                        r = sqrt_flow(r, 0.5 * h)
                    else:
                        k_1 = full(y_at(0), r)
                        k_2 = full(y_at(0.5 * h), r + 0.5 * h * k_1)
                        k_3 = full(y_at(0.5 * h), r + 0.5 * h * k_2)
                        k_4 = full(y_at(h), r + h * k_3)
                        r = r + h / 6.0 * (k_1 + 2 * k_2 + 2 * k_3 + k_4)
                    if np.linalg.norm(r) < tol_zero or (d == 1 and r[0] * rho[0] < 0):
                        r = np.zeros(d)
                if np.linalg.norm(r) <= np.linalg.norm(rho) * (1.0 + tol_mono) + tol_mono:
                    new = r
                    break
                sub *= 2
            if new is None:
                raise RhoSolveError(f"rho step {i} rejected after {max_refine} refinements")
            fc[i] = (new - rho) / dt - dF_at(ya, rho)
        else:
            raise ValueError(f"unknown method {method!r}")
        rho = new
        out[i + 1] = rho
    nr = np.linalg.norm(out, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        fn = -kappa1 * out - kappa2 * np.where(nr[:, None] > 0, out / np.sqrt(nr)[:, None], 0.0)
    zero = np.flatnonzero(nr == 0)
    ext = float(zero[0] * dt) if zero.size else math.inf
    return RhoSolution(np.arange(n + 1) * dt, out, fn, fc, ext)


# ----------------------------------------------------------- Girsanov

def log_girsanov_density(g: np.ndarray, dw: np.ndarray, dt: float) -> float:
    """``sum g_i . dw_i - 1/2 sum |g_i|^2 dt`` (left-point Ito sum, rectangle rule)."""
    g = np.atleast_2d(g)
    dw = np.atleast_2d(dw)
    return float(np.sum(g * dw) - 0.5 * np.sum(g * g) * dt)


def girsanov_density(g, w, dt: float | None = None) -> float:
    """``exp(int g dw - 1/2 int |g|^2)`` for cell values ``g`` and increments of ``w``."""
    if isinstance(w, WienerPath):
        dt = w.grid.dt
        dw = w.increments
    else:
        dw = np.atleast_2d(w)
        if dt is None:
            raise ValueError("dt required when w is an array")
    x = log_girsanov_density(np.atleast_2d(g), dw, dt)
    if abs(x) > 700.0:
        raise OverflowError(f"log Girsanov density {x:.1f} exceeds guard 700 (runaway drift)")
    return math.exp(x)


# ------------------------------------------------------ scalar coupling

def shift_window(b: float) -> float:
    """``M_b = max(4b, -2 log(b/8))``."""
    return max(4.0 * b, -2.0 * math.log(b / 8.0))


class _Overlap:
    """``min(phi(y), phi(y-a))`` restricted to ``[-L, L]`` and its CDF."""

    def __init__(self, a: float, L: float):
        self.a, self.L = a, L
        self.mass = float(self.cdf(np.array([L]))[0])

    def cdf(self, y):
        a, L = self.a, self.L
        y = np.clip(np.asarray(y, dtype=float), -L, L)
        m = 0.5 * a
        if a > 0:     # phi(y-a) left of a/2, phi(y) right of it
            left = ndtr(np.minimum(y, m) - a) - ndtr(-L - a)
            right = np.where(y > m, ndtr(y) - ndtr(m), 0.0)
        elif a < 0:   # phi(y) left of a/2, phi(y-a) right of it
            left = ndtr(np.minimum(y, m)) - ndtr(-L)
            right = np.where(y > m, ndtr(y - a) - ndtr(m - a), 0.0)
        else:
            return ndtr(y) - ndtr(-L)
        return left + right

    def ratio(self, y):
        """``min(phi(y), phi(y-a))/phi(y)`` inside the window, 0 outside."""
        y = np.asarray(y, dtype=float)
        r = np.minimum(1.0, np.exp(-0.5 * ((y - self.a) ** 2 - y ** 2)))
        return np.where(np.abs(y) <= self.L, r, 0.0)


def _bisect(fun, target, lo, hi, iters=80):
    lo = np.full(target.shape, lo, dtype=float)
    hi = np.full(target.shape, hi, dtype=float)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = fun(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def scalar_coupling_success_prob(a: float, b: float) -> float:
    """Success probability of :func:`scalar_shift_coupling`."""
    if not b > 0:
        raise ValueError("budget b must be positive")
    ov = _Overlap(a, 0.5 * shift_window(b))
    s0 = ov.mass
    return min(s0, 1.0 - 0.5 * b) if b < 1 else s0


def scalar_shift_coupling(a: float, b: float, rng: np.random.Generator, size: int | None = None):
    """Couple ``U1, U2 ~ N(0,1)`` so that ``U2 = U1 + a`` with probability in ``[1-b, 1-b/2]``.

    Success part: ``U2`` drawn from ``min(phi(y), phi(y-a))`` on ``[-M_b/2, M_b/2]``
    (thinned to total mass ``1-b/2`` when ``b < 1``), ``U1 = U2 - a``.  Residual:
    quantile coupling of the two leftover laws, which keeps the far tails on the
    diagonal so that ``|U2 - U1| <= M_b`` always.  Returns ``(U1, U2, success)``.
    """
    if not b > 0:
        raise ValueError("budget b must be positive")
    scalar = size is None
    N = 1 if scalar else int(size)
    L = 0.5 * shift_window(b)
    ov = _Overlap(a, L)
    s0 = ov.mass
    s = min(s0, 1.0 - 0.5 * b) if b < 1 else s0
    lam = s / s0 if s0 > 0 else 0.0
    u = rng.random(N)
    succ = u < s
    U1 = np.empty(N)
    U2 = np.empty(N)
    ns = int(succ.sum())
    if ns:
        # inverse CDF of the normalized overlap density
        v = u[succ] / s * s0  # uniform on (0, s0)
        y = _bisect(ov.cdf, v, -L, L)
        U2[succ] = y
        U1[succ] = y - a
    nr = N - ns
    if nr:
        v = (u[~succ] - s)  # uniform on (0, 1 - s)
        span = L + abs(a) + 40.0

        def F2(y):
            return ndtr(y) - lam * ov.cdf(y) * (y > -L)

        def F1(x):
            return ndtr(x) - lam * ov.cdf(x + a) * (x + a > -L)

        U1[~succ] = _bisect(F1, v, -span, span, 90)
        U2[~succ] = _bisect(F2, v, -span, span, 90)
    if scalar:
        return float(U1[0]), float(U2[0]), bool(succ[0])
    return U1, U2, succ


# ------------------------------------------------------- admissibility

def weighted_r_integral(values, hgrid: UniformGrid, T: float, alpha: float, H: float,
                        merge_tol: float = 0.05, quad_nodes: int = 8, scale: float = 1.0,
                        panels_per_decade: int = 3, t_lo: float | None = None):
    """``int_0^inf (1+t)^{2 alpha} |scale * R_T g(t)|^2 dt`` with a rigorous tail surplus.

    Returns ``(value_without_tail, tail_surplus)``.  The integral is computed
    on log-spaced Gauss panels between ``t_lo`` and ``t_cap``; the piece below
    ``t_lo`` uses ``R ~ t^{-gamma}`` and the tail uses the bound
    ``|R_T g(t)| <= m_T t^{-gamma-1}`` with ``m_T = int (T-s)^gamma |g(s)| ds``.
    """
    vals = np.atleast_2d(np.asarray(values, dtype=float))
    g = H - 0.5
    if not np.any(vals):
        return 0.0, 0.0
    dt = hgrid.dt
    t_lo = dt / 64.0 if t_lo is None else t_lo
    span = T - hgrid.t0
    t_cap = 1e3 * max(span, 1.0)
    dec = math.log10(t_cap / t_lo)
    npan = max(4, int(math.ceil(dec * panels_per_decade)))
    edges = np.logspace(math.log10(t_lo), math.log10(t_cap), npan + 1)
    x, w = np.polynomial.legendre.leggauss(quad_nodes)
    le = np.log(edges)
    mid = 0.5 * (le[1:] + le[:-1])
    half = 0.5 * (le[1:] - le[:-1])
    lt = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    t = np.exp(lt)
    R = scale * fk.r_operator(vals, hgrid, T, np.concatenate([[t_lo], t]), H, quad_nodes, merge_tol)
    R0 = R[:, 0]
    R = R[:, 1:]
    dens = (1.0 + t) ** (2 * alpha) * np.sum(R * R, axis=0) * t
    body = float(np.sum(wt * dens))
    A2 = float(np.sum(R0 * R0)) * t_lo ** (2 * g)
    near = A2 * (1.0 + t_lo) ** (2 * alpha) * t_lo ** (1 - 2 * g) / (1 - 2 * g)
    # m_T: int (T-s)^g |g(s)| ds, exact per cell
    nz = np.flatnonzero(np.any(vals != 0, axis=0))
    s0 = hgrid.t0 + nz * dt
    ua = T - (s0 + dt)
    ub = T - s0
    cell = (ub ** (g + 1) - np.maximum(ua, 0) ** (g + 1)) / (g + 1)
    mT = float(scale * np.sum(np.linalg.norm(vals[:, nz], axis=0) * cell))
    tail = mT ** 2 * (1 + 1 / t_cap) ** (2 * alpha) * t_cap ** (2 * alpha - 2 * g - 1) / (2 * g + 1 - 2 * alpha)
    return body + near, tail


@dataclass
class AdmissibilityReport:
    sup_T_integral: float
    x1_norm: float
    x2_norm: float
    phi1: float
    phi2: float
    pass_omega1: bool
    pass_omega2: bool
    T_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def passed(self) -> bool:
        return self.pass_omega1 and self.pass_omega2


def admissibility_T_grid(dt: float, T_hist: float) -> np.ndarray:
    Ts = [0.0]
    j = 0
    while 2 ** j * dt <= 4 * T_hist:
        Ts.append(2 ** j * dt)
        j += 1
    return np.asarray(Ts)


def omega1_value(gw_hist: np.ndarray, dt: float, alpha: float, H: float, T_hist: float,
                 merge_tol: float = 0.05, quad_nodes: int = 8) -> float:
    """Grid sup over ``T`` of the weighted ``R_T`` integral of the drift history (plus tail surplus)."""
    vals = np.atleast_2d(gw_hist)
    if not np.any(vals):
        return 0.0
    hgrid = UniformGrid(-vals.shape[1] * dt, dt, vals.shape[1])
    best = 0.0
    for T in admissibility_T_grid(dt, T_hist):
        body, tail = weighted_r_integral(vals, hgrid, T, alpha, H, merge_tol, quad_nodes)
        best = max(best, body + tail)
    return best


# ---------------------------------------------------------------- context

@dataclass
class CouplingContext:
    """Configuration plus the derived constants and the localized model."""

    config: CouplingConfig
    model: ModelSpec
    loc: LocalizedModel
    kernel: KernelParams
    kappa1: float
    kappa2: float
    Kbar: float
    girsanov_cap: float

    @property
    def dt(self) -> float:
        return self.config.dt


def local_radius_rule(model: ModelSpec, cfg: CouplingConfig, rng: np.random.Generator,
                      n_pilot: int = 256) -> float:
    """``a = max(M, C(M, K)) + 1`` with empirical proxies.

    ``M`` is the ``M_quantile`` of ``|W|_{1/2-eps}`` over ``[0, 1]``; ``C(M, K)``
    the largest ``sup |X|`` on ``[0, 1]`` over pilot paths started on the
    ``K``-sphere whose fBm Hölder norm is below the same quantile.
    """
    n1 = cfg.n1
    grid = UniformGrid(0.0, cfg.dt, n1)
    eps = cfg.eps_theta
    wn = []
    for _ in range(n_pilot):
        w = WienerPath.white(grid, model.d, rng)
        wn.append(holder_norm(w.values(), grid, 0.5 - eps, 0.0, 1.0))
    M = float(np.quantile(wn, cfg.M_quantile))
    kp = cfg.kernel()
    x0 = probe_points(model.d, cfg.K, 8) if model.d > 1 else np.array([[-cfg.K], [cfg.K]])
    sup_x, bn = [], []
    for x in x0:
        for _ in range(max(1, n_pilot // len(x0))):
            fb = sample_fgn(kp, grid, model.d, rng)
            tr = integrate(model, x, fb)
            sup_x.append(float(np.max(np.linalg.norm(tr.states, axis=1))))
            bn.append(holder_norm(fb.values(), grid, cfg.theta, 0.0, 1.0))
    sup_x, bn = np.asarray(sup_x), np.asarray(bn)
    keep = bn <= np.quantile(bn, cfg.M_quantile)
    C = float(sup_x[keep].max())
    return max(M, C) + 1.0


def build_context(model: ModelSpec, cfg: CouplingConfig, rng: np.random.Generator | None = None) -> CouplingContext:
    """Fill the derived constants (``K_bar``, ``kappa2``, ``a``, ``kappa1``, budget cap)."""
    rng = np.random.default_rng(0) if rng is None else rng
    Kbar = cfg.Kbar if cfg.Kbar is not None else kbar_estimate(model, cfg.K)
    kappa2 = cfg.kappa2 if cfg.kappa2 is not None else 4.0 * math.sqrt(Kbar)
    if cfg.local_radius is not None:
        a = float(cfg.local_radius)
    elif model.params.get("linear_rate") is not None:
        a = math.inf  # globally Lipschitz Lamperti drift: no localization needed
    else:
        a = local_radius_rule(model, cfg, rng)
    loc = LocalizedModel(model, a)
    kappa1 = cfg.kappa1 if cfg.kappa1 is not None else kappa1_estimate(loc, safety=cfg.kappa1_safety)
    if kappa1 * cfg.dt * (1.0 + 1.0 / cfg.kappa1_safety) > 1.0:
        raise ValueError(f"dt={cfg.dt} too coarse for kappa1={kappa1:.3g}: need dt*kappa1*(1+1/1.2) <= 1")
    fmax = kappa1 * Kbar + kappa2 * math.sqrt(Kbar)
    cap = cfg.girsanov_cap if cfg.girsanov_cap is not None else 100.0 * fmax ** 2
    cfg = replace(cfg, Kbar=Kbar, kappa2=kappa2, kappa1=kappa1, local_radius=a, girsanov_cap=cap)
    return CouplingContext(cfg, model, loc, cfg.kernel(), kappa1, kappa2, Kbar, cap)


# ---------------------------------------------------------------- state

@dataclass
class TrialRecord:
    k: int
    tau_prev_steps: int
    admissible: bool = False
    attempted: bool = False
    step1_success: bool = False
    ell_star: float = 0
    tau_k_steps: int | None = None
    girsanov_l2: float = 0.0
    branch: str = "skipped"
    adm: AdmissibilityReport | None = None
    interval_steps: list = field(default_factory=list)
    lazy_levels: list = field(default_factory=list)
    level_norms: list = field(default_factory=list)
    step3_steps: int = 0
    step3_nominal: float = 0.0
    merge_steps: int | None = None
    holder_B1: float = 0.0
    a1: float = float("nan")
    a2: float = float("nan")
    dt: float = 1.0
    origin_steps: int = 0

    def time(self, steps: int | None) -> float:
        return math.inf if steps is None else (steps - self.origin_steps) * self.dt

    @property
    def tau_prev(self) -> float:
        return self.time(self.tau_prev_steps)

    @property
    def tau_k(self) -> float:
        return self.time(self.tau_k_steps)


@dataclass
class CouplingState:
    """Snapshot of the coupled pair on the global integer clock."""

    phase: str
    k: int
    i: int                 # current node index
    origin: int            # node index of time 0
    X1: np.ndarray
    X2: np.ndarray
    dW1: np.ndarray        # (d, capacity) increments of W1
    gw: np.ndarray         # (d, capacity) g_w cells (W2 = W1 + int g_w)
    gb: np.ndarray         # (d, capacity) g_B cells
    tau_prev: int = 0
    ell: int = 0
    coupled_since: int | None = None
    clocks: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.X1.size

    _dt: float = 1.0

    def time(self, i: int | None = None) -> float:
        return ((self.i if i is None else i) - self.origin) * self._dt

    def ensure(self, n_cells: int) -> None:
        cap = self.dW1.shape[1]
        if n_cells <= cap:
            return
        new = max(n_cells, 2 * cap)
        for name in ("dW1", "gw", "gb"):
            a = getattr(self, name)
            b = np.zeros((a.shape[0], new))
            b[:, :cap] = a
            setattr(self, name, b)

    def W2_increments(self, i0: int, i1: int) -> np.ndarray:
        return self.dW1[:, i0:i1] + self.gw[:, i0:i1] * self._dt


def initial_state(cfg: CouplingConfig, x1, x2, past=None, rng: np.random.Generator | None = None,
                  capacity_time: float = 64.0) -> CouplingState:
    """State at time 0 with a shared past ``W`` on ``[-(T_hist+2), 0]``.

    ``past`` may be ``None`` (white noise from ``rng``), ``"zero"`` or an
    increment array of shape ``(d, n_past)``.
    """
    x1 = np.array(x1, dtype=float).reshape(-1)
    x2 = np.array(x2, dtype=float).reshape(-1)
    d = x1.size
    dt = cfg.dt
    n_past = int(round((cfg.T_hist + 2.0) / dt))
    cap = n_past + int(round(capacity_time / dt))
    dW = np.zeros((d, cap))
    if past is None:
        if rng is None:
            raise ValueError("rng required for a random past")
        dW[:, :n_past] = rng.standard_normal((d, n_past)) * math.sqrt(dt)
    elif isinstance(past, str) and past == "zero":
        pass
    else:
        p = np.atleast_2d(np.asarray(past, dtype=float))
        if p.shape != (d, n_past):
            raise ValueError(f"past must have shape {(d, n_past)}")
        dW[:, :n_past] = p
    st = CouplingState("WaitTau0", 0, n_past, n_past, x1, x2, dW, np.zeros((d, cap)), np.zeros((d, cap)))
    st._dt = dt
    return st


# ------------------------------------------------------------ the engine

class CouplingEngine:
    """Runs the coupling state machine for one replica."""

    def __init__(self, ctx: CouplingContext):
        self.ctx = ctx
        self.cfg = ctx.config
        self.kp = ctx.kernel
        self.dt = self.cfg.dt
        self.M = self.kp.n_hist(self.dt)
        self.c = fk.mvn_weights(self.kp.H, self.M)
        self.scale = self.kp.alpha_H * self.dt ** self.kp.gamma
        m = ctx.model
        self._lin = m.params.get("linear_rate")

    # --- noise ---------------------------------------------------------
    def dB1(self, st: CouplingState, i0: int, i1: int) -> np.ndarray:
        return self.scale * fk._conv_rows(st.dW1[:, i0 - self.M:i1], self.c, self.M, self.M + i1 - i0)

    def gB(self, st: CouplingState, i0: int, i1: int) -> np.ndarray:
        """``g_B`` on cells ``[i0, i1)`` from all ``g_w`` up to ``i1``."""
        seg = st.gw[:, i0 - self.M:i1]
        if not np.any(seg):
            return np.zeros((st.d, i1 - i0))
        return self.scale * fk._conv_rows(seg, self.c, self.M, self.M + i1 - i0)

    def gB_memory(self, st: CouplingState, i0: int, n: int) -> np.ndarray:
        """``g_B`` on ``[i0, i0+n)`` generated by ``g_w`` before ``i0``."""
        return fk.memory_drift_b(st.gw[:, i0 - self.M:i0], n, self.dt, self.kp, st.d)

    # --- integration ---------------------------------------------------
    def _F(self, y: np.ndarray) -> np.ndarray:
        return self.ctx.model.lamperti_drift(y)

    def integrate_pair(self, y0: np.ndarray, dB: np.ndarray, keep: bool = False):
        """Euler in Lamperti coordinates for the pair; ``y0`` (2, d), ``dB`` (2, d, n)."""
        n = dB.shape[2]
        dt = self.dt
        if self._lin is not None:
            lam = float(self._lin)
            zi = (1.0 - lam * dt) * y0.reshape(-1)
            u = dB.reshape(-1, n)
            path, _ = signal.lfilter([1.0], [1.0, -(1.0 - lam * dt)], u, axis=1,
                                     zi=zi[:, None])
            path = path.reshape(dB.shape)
            if not np.all(np.isfinite(path[..., -1])):
                raise IntegrationError("non-finite state", int(np.argmax(~np.isfinite(path).all(axis=(0, 1)))))
            yend = path[..., -1]
            if keep:
                full = np.concatenate([y0[..., None], path], axis=2)
                return yend, full
            return yend, None
        y = y0.copy()
        full = np.empty(dB.shape[:2] + (n + 1,)) if keep else None
        if keep:
            full[..., 0] = y
        for i in range(n):
            y = y + self._F(y) * dt + dB[:, :, i]
            if not np.all(np.isfinite(y)):
                raise IntegrationError("non-finite state", i, y)
            if keep:
                full[..., i + 1] = y
        return y, full

    def advance(self, st: CouplingState, dW1_seg: np.ndarray, gw_seg: np.ndarray | None, keep: bool = False):
        """Write noise and drift for the next cells and integrate both systems."""
        n = dW1_seg.shape[1]
        i0, i1 = st.i, st.i + n
        st.ensure(i1 + 1)
        st.dW1[:, i0:i1] = dW1_seg
        st.gw[:, i0:i1] = 0.0 if gw_seg is None else gw_seg
        dB1 = self.dB1(st, i0, i1)
        gB = self.gB(st, i0, i1)
        st.gb[:, i0:i1] = gB
        m = self.ctx.model
        y0 = np.stack([m.h(st.X1), m.h(st.X2)])
        dB = np.stack([dB1, dB1 + gB * self.dt])
        self._last_dB1 = dB1
        yend, full = self.integrate_pair(y0, dB, keep)
        X = m.inverse_h(yend) if m.h_inv is not None else np.stack(
            [m.inverse_h(yend[0], st.X1), m.inverse_h(yend[1], st.X2)])
        st.X1, st.X2 = X[0].copy(), X[1].copy()
        st.i = i1
        return full

    def tol_stick(self, st: CouplingState) -> float:
        return self.cfg.tol_stick * (1.0 + float(np.linalg.norm(st.X1)))

    # --- admissibility -------------------------------------------------
    def check_admissibility(self, st: CouplingState) -> AdmissibilityReport:
        cfg = self.cfg
        i = st.i
        hist = st.gw[:, max(0, i - self.M):i]
        sup_T = omega1_value(hist, self.dt, cfg.alpha, cfg.H, cfg.T_hist, cfg.adm_merge_tol, cfg.quad_nodes)
        # phi needs the path on [tau - 1 - T_hist, tau]
        lo = i - self.M - self.cfg.n1
        g = UniformGrid((lo - st.origin) * self.dt, self.dt, i - lo)
        tau = (i - st.origin) * self.dt
        w1 = WienerPath(g, st.dW1[:, lo:i])
        w2 = WienerPath(g, st.W2_increments(lo, i))
        phi1 = phi_value(w1, tau, cfg.eps_theta, self.kp)
        phi2 = phi1 if not np.any(st.gw[:, lo:i]) else phi_value(w2, tau, cfg.eps_theta, self.kp)
        n1, n2 = float(np.linalg.norm(st.X1)), float(np.linalg.norm(st.X2))
        K = cfg.K
        return AdmissibilityReport(sup_T, n1, n2, phi1, phi2, sup_T <= 1.0,
                                   n1 <= K and n2 <= K and phi1 <= K and phi2 <= K,
                                   admissibility_T_grid(self.dt, cfg.T_hist))

    # --- Step 1 --------------------------------------------------------
    def _companion_phi(self, y1_0, rho0, dB1, n):
        """Companion ``y1`` and ``rho`` along ``w1``: returns ``f`` cells, ``rho`` nodes."""
        loc = self.ctx.loc
        k1, k2, dt, tz = self.ctx.kappa1, self.ctx.kappa2, self.dt, self.cfg.tol_zero
        d = y1_0.size
        f = np.zeros((d, n))
        rho = np.zeros((n + 1, d))
        rho[0] = rho0
        y = y1_0.copy()
        r = rho0.copy()
        for i in range(n):
            if np.any(r):
                Fp = loc.F(np.stack([y + r, y]))
                dF = Fp[0] - Fp[1]
                Fy = Fp[1]
                r, fi = rho_euler_step(r, dF, k1, k2, dt, tz)
                f[:, i] = fi
            else:
                Fy = loc.F(y[None])[0]
            y = y + Fy * dt + dB1[:, i]
            rho[i + 1] = r
        return f, rho

    def _companion_psi(self, y2_0, rho0, dB2, n):
        """Inverse construction: companion ``y2`` driven by ``B^{w}`` and ``rho~``."""
        loc = self.ctx.loc
        k1, k2, dt, tz = self.ctx.kappa1, self.ctx.kappa2, self.dt, self.cfg.tol_zero
        d = y2_0.size
        f = np.zeros((d, n))
        y = y2_0.copy()
        r = rho0.copy()
        for i in range(n):
            if np.any(r):
                Fp = loc.F(np.stack([y, y - r]))
                dF = Fp[0] - Fp[1]
                Fy = Fp[0]
                r, fi = rho_euler_step(r, dF, k1, k2, dt, tz)
                f[:, i] = fi
            else:
                Fy = loc.F(y[None])[0]
            y = y + Fy * dt + dB2[:, i]
        return f

    def step1_proposal(self, st: CouplingState, w1: np.ndarray):
        """Everything the three-branch sampler needs for innovation ``w1`` (no state change)."""
        n = w1.shape[1]
        i0 = st.i
        st.ensure(i0 + n + 1)
        saved = st.dW1[:, i0:i0 + n].copy()
        st.dW1[:, i0:i0 + n] = w1
        dB1 = self.dB1(st, i0, i0 + n)
        st.dW1[:, i0:i0 + n] = saved
        P = self.gB_memory(st, i0, n)
        loc = self.ctx.loc
        y1 = loc.h_a(st.X1[None])[0]
        y2 = loc.h_a(st.X2[None])[0]
        rho0 = y2 - y1
        hist = st.gw[:, i0 - self.M:i0]
        f, rho = self._companion_phi(y1, rho0, dB1, n)
        g = fk.gb_to_gw(f, hist, self.kp, self.dt, memory="discrete")
        ft = self._companion_psi(y2, rho0, dB1 + P * self.dt, n)
        gt = fk.gb_to_gw(ft, hist, self.kp, self.dt, memory="discrete")
        return dict(f=f, g=g, rho=rho, ft=ft, gt=gt, rho0=rho0, dB1=dB1, P=P)

    def step1_attempt(self, st: CouplingState, rng: np.random.Generator, rec: TrialRecord):
        cfg = self.cfg
        n = cfg.n1
        d = st.d
        i0 = st.i
        w1 = rng.standard_normal((d, n)) * math.sqrt(self.dt)
        thin = rng.random()
        u = rng.random()
        adm = self.check_admissibility(st) if cfg.check_admissibility else None
        rec.adm = adm
        rec.admissible = adm is None or adm.passed
        trivially = (np.array_equal(st.X1, st.X2) and not np.any(st.gw[:, :i0]))
        rec.attempted = rec.admissible and (trivially or thin < 1.0 - cfg.delta1)
        gw = None
        if rec.attempted and trivially:
            rec.branch = "coupled" if u < 0.5 else "swapped"
            rec.a1 = rec.a2 = 1.0
        elif rec.attempted:
            pr = self.step1_proposal(st, w1)
            g, gt = pr["g"], pr["gt"]
            l2 = float(np.sum(g * g) * self.dt)
            rec.girsanov_l2 = l2
            if l2 > self.ctx.girsanov_cap:
                raise GirsanovBudgetError(f"int |g_h|^2 = {l2:.4g} exceeds budget {self.ctx.girsanov_cap:.4g}")
            la1 = -(float(np.sum(g * w1)) + 0.5 * l2)
            la2 = log_girsanov_density(gt, w1, self.dt)
            a1 = math.exp(min(0.0, la1))
            a2 = math.exp(min(0.0, la2))
            rec.a1, rec.a2 = a1, a2
            if u < 0.5 * a1:
                rec.branch, gw = "coupled", g
            elif u < 0.5 * (a1 + a2):
                rec.branch, gw = "swapped", -gt
            else:
                rec.branch = "diagonal"
        full = self.advance(st, w1, gw, keep=True)
        m = self.ctx.model
        # merge detection on the window (node values in x coordinates)
        x1 = m.inverse_h(full[0].T) if m.h_inv is not None else None
        if x1 is None:
            x1 = np.stack([m.inverse_h(full[0][:, j], st.X1) for j in range(n + 1)])
            x2 = np.stack([m.inverse_h(full[1][:, j], st.X2) for j in range(n + 1)])
        else:
            x2 = m.inverse_h(full[1].T)
        gap = np.linalg.norm(x1 - x2, axis=1)
        tol = self.tol_stick(st)
        bvals = np.concatenate([np.zeros((st.d, 1)), np.cumsum(self._last_dB1, axis=1)], axis=1)
        rec.holder_B1 = holder_norm(bvals, UniformGrid(0.0, self.dt, n), cfg.theta, 0.0, 1.0)
        if rec.attempted and gap[-1] <= tol:
            rec.step1_success = True
            st.X2 = st.X1.copy()
            bad = np.flatnonzero(gap > tol)
            rec.merge_steps = i0 + (int(bad[-1]) + 1 if bad.size else 0)
        return rec

    # --- Step 2 --------------------------------------------------------
    def compute_gS(self, st: CouplingState, n: int) -> np.ndarray:
        """Discrete continuation ``g_S`` on the next ``n`` cells (keeps ``g_B = 0``)."""
        return fk.continuation_drift(st.gw[:, st.i - self.M:st.i], n, self.kp, self.dt)

    def lazy_level_norm(self, hist: np.ndarray, t_a: float, t_b: float) -> float:
        """``|g_S|_{L2}`` on ``[T1 + t_a, T1 + t_b]`` from the continuous operator ``C R_0``."""
        vals = np.atleast_2d(hist)
        if not np.any(vals):
            return 0.0
        hgrid = UniformGrid(-vals.shape[1] * self.dt, self.dt, vals.shape[1])
        C = fk.inversion_constant(self.cfg.H)
        x, w = np.polynomial.legendre.leggauss(12)
        la, lb = math.log(t_a), math.log(t_b)
        npan = max(1, int(math.ceil((lb - la) / 0.5)))
        edges = np.linspace(la, lb, npan + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        lt = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        wt = (half[:, None] * w[None, :]).ravel()
        t = np.exp(lt)
        R = C * fk.r_operator(vals, hgrid, 0.0, t, self.cfg.H, self.cfg.quad_nodes, self.cfg.adm_merge_tol)
        return math.sqrt(float(np.sum(wt * t * np.sum(R * R, axis=0))))

    @staticmethod
    def lift(g: np.ndarray, dt: float, U1: float, U2: float, rng: np.random.Generator):
        """Lift scalar couplings to Wiener increments along direction ``g`` (shape (d, n))."""
        a = math.sqrt(float(np.sum(g * g)) * dt)
        e = g * dt / a                   # increments of int g / |g|
        V = rng.standard_normal()
        Z = rng.standard_normal(g.shape) * math.sqrt(dt)
        proj = float(np.sum(g * Z)) / a  # (Z | g/|g|) ~ N(0, 1)
        Wt = -V * e + (Z - proj * e)
        return (U1 + V) * e + Wt, (U2 + V) * e + Wt

    def step2_attempt(self, st: CouplingState, ell: int, gS: np.ndarray, rng: np.random.Generator):
        """One dyadic trial on ``I_l`` with the precomputed ``g_S`` cells; returns (success, norm)."""
        n = gS.shape[1]
        a = math.sqrt(float(np.sum(gS * gS)) * self.dt)
        b = self.cfg.budget(ell)
        if a == 0.0:
            dW = rng.standard_normal((st.d, n)) * math.sqrt(self.dt)
            self.advance(st, dW, None)
            st.X2 = st.X1.copy()
            return True, 0.0
        if a > b:
            log.warning("g_S norm %.4g exceeds budget b_%d = %.4g; using b = norm", a, ell, b)
            b = a
        U1, U2, succ = scalar_shift_coupling(a, b, rng)
        dW1, dW2 = self.lift(gS, self.dt, U1, U2, rng)
        gw = (dW2 - dW1) / self.dt
        self.advance(st, dW1, gw)
        if succ:
            if float(np.linalg.norm(st.X1 - st.X2)) <= self.tol_stick(st):
                st.X2 = st.X1.copy()
            else:
                log.warning("Step-2 success at level %d not confirmed by integration", ell)
                succ = False
        return bool(succ), a

    def lazy_step2(self, ell: int, a: float, rng: np.random.Generator) -> bool:
        b = self.cfg.budget(ell)
        if a == 0.0:
            return True
        return bool(scalar_shift_coupling(a, max(a, b), rng)[2])

    # --- Step 3 --------------------------------------------------------
    def wait(self, st: CouplingState, n_steps: int, rng: np.random.Generator, chunk: int = 1 << 14):
        """Shared innovations, no drift, for ``n_steps`` steps."""
        left = n_steps
        while left > 0:
            m = min(chunk, left)
            dW = rng.standard_normal((st.d, m)) * math.sqrt(self.dt)
            self.advance(st, dW, None)
            left -= m

    def step3_wait(self, st: CouplingState, ell: int, k: int, rng: np.random.Generator) -> int:
        """Advance ``Delta_3(l, k)`` (whole steps) with shared innovations and no drift."""
        n = self.cfg.step3_steps(ell, k)
        self.wait(st, n, rng)
        return n

    # --- full run --------------------------------------------------------
    def tau0(self, x1, x2) -> int:
        rho = self.cfg.rho_hat
        if rho is None:
            raise ValueError("rho_hat missing: run contraction_estimate first")
        th = self.cfg.theta
        s = float(psi(self.ctx.model, np.asarray(x1), th) + psi(self.ctx.model, np.asarray(x2), th))
        if s <= 1.0:
            return 0
        return int(math.ceil(math.log(1.0 / s) / math.log(rho) - 1e-12))

    def run(self, x1, x2, t_max: float, rng: np.random.Generator, past=None) -> "CouplingResult":
        cfg = self.cfg
        dt = self.dt
        st = initial_state(cfg, x1, x2, past if past is not None else None, rng,
                           capacity_time=min(t_max, 4096.0) + 8.0)
        origin = st.origin
        end = origin + int(math.floor(t_max / dt + 1e-9))
        records: list[TrialRecord] = []
        n_t0 = int(round(self.tau0(x1, x2) / dt))
        st.clocks["tau0"] = origin + n_t0
        if origin + n_t0 > end:
            st.phase = "Censored"
            return CouplingResult(math.inf, True, records, st, cfg)
        st.phase = "WaitTau0"
        self.wait(st, n_t0, rng)
        k = 0
        L = cfg.ell_max
        while True:
            k += 1
            st.k = k
            st.tau_prev = st.i
            if st.i >= end:
                st.phase = "Censored"
                return CouplingResult(math.inf, True, records, st, cfg)
            rec = TrialRecord(k, st.i, dt=dt, origin_steps=origin)
            records.append(rec)
            st.phase = "Step1"
            self.step1_attempt(st, rng, rec)
            rec.interval_steps.append(cfg.n1)
            if rec.step1_success:
                T1 = st.i
                st.phase = "Step2"
                # levels that end before t_max are simulated; later ones are resolved lazily
                lens = [cfg.interval_steps(ell) for ell in range(1, L + 1)]
                ends = T1 + np.cumsum(lens)
                n_sim = int(np.sum(ends <= end))
                sim_cells = int(ends[n_sim - 1] - T1) if n_sim else 0
                hist = st.gw[:, T1 - self.M:T1].copy()
                gS = self.compute_gS(st, sim_cells) if sim_cells else None
                failed_at = None
                off = 0
                for ell in range(1, L + 1):
                    st.ell = ell
                    nl = lens[ell - 1]
                    if ell <= n_sim:
                        ok, a = self.step2_attempt(st, ell, gS[:, off:off + nl], rng)
                        rec.lazy_levels.append(False)
                    else:
                        t_a = (off + 0) * dt
                        a = self.lazy_level_norm(hist, max(t_a, dt / 4), (off + nl) * dt)
                        ok = self.lazy_step2(ell, a, rng)
                        rec.lazy_levels.append(True)
                    rec.level_norms.append(a)
                    rec.interval_steps.append(nl)
                    off += nl
                    if not ok:
                        failed_at = ell
                        break
                if failed_at is None:
                    rec.ell_star = math.inf
                    rec.tau_k_steps = None
                    st.phase = "Coupled"
                    st.coupled_since = rec.merge_steps
                    tau_inf = (rec.merge_steps - origin) * dt
                    return CouplingResult(tau_inf, tau_inf > t_max, records, st, cfg)
                ell_star = failed_at
                if rec.lazy_levels[-1]:
                    # the failed level ends after t_max: the next trial starts beyond the horizon
                    rec.ell_star = ell_star
                    rec.step3_steps = cfg.step3_steps(ell_star, k)
                    rec.step3_nominal = cfg.step3_nominal(ell_star, k)
                    rec.tau_k_steps = T1 + off + rec.step3_steps
                    st.phase = "Censored"
                    return CouplingResult(math.inf, True, records, st, cfg)
            else:
                ell_star = 0
            rec.ell_star = ell_star
            st.phase = "Step3"
            n3 = cfg.step3_steps(ell_star, k)
            rec.step3_steps = n3
            rec.step3_nominal = cfg.step3_nominal(ell_star, k)
            rec.tau_k_steps = st.i + n3
            if rec.tau_k_steps > end:
                st.phase = "Censored"
                return CouplingResult(math.inf, True, records, st, cfg)
            self.step3_wait(st, ell_star, k, rng)


@dataclass
class CouplingResult:
    tau_inf: float
    censored: bool
    records: list
    state: CouplingState
    config: CouplingConfig

    @property
    def coupled(self) -> bool:
        return not self.censored


def run_coupling(ctx: CouplingContext, x1, x2, t_max: float, rng: np.random.Generator, past=None) -> CouplingResult:
    return CouplingEngine(ctx).run(x1, x2, t_max, rng, past)


def phi_value(w: WienerPath, tau: float, eps: float, kp: KernelParams) -> float:
    """``phi_{tau, eps}`` using only the path up to ``tau``."""
    return fk.phi_functional(w, tau, eps, kp)


def check_admissibility(st: CouplingState, ctx: CouplingContext) -> AdmissibilityReport:
    return CouplingEngine(ctx).check_admissibility(st)


def compute_gS(st: CouplingState, ctx: CouplingContext, n: int) -> np.ndarray:
    """``g_S`` on the ``n`` cells after the current node of ``st``."""
    return CouplingEngine(ctx).compute_gS(st, n)


def step3_duration(cfg: CouplingConfig, ell: int, k: int) -> float:
    """``Delta_3(l, k) = c3 varsigma^k 2^{beta l}``."""
    return cfg.step3_nominal(ell, k)


# --------------------------------------------------------------- schedule

def schedule_violations(records, cfg: CouplingConfig) -> list[str]:
    """Integer-step checks of interval lengths and Step-3 durations for every trial."""
    out = []
    for r in records:
        if not r.interval_steps or r.interval_steps[0] != cfg.n1:
            out.append(f"trial {r.k}: Step-1 window is not one time unit")
        for ell, nl in enumerate(r.interval_steps[1:], start=1):
            if nl != cfg.interval_steps(ell):
                out.append(f"trial {r.k}: |I_{ell}| = {nl} steps != c2 2^{ell}")
        if r.tau_k_steps is None:
            continue
        if r.ell_star != (len(r.interval_steps) - 1 if r.step1_success else 0):
            out.append(f"trial {r.k}: ell_star inconsistent with the number of dyadic trials")
        ell = int(r.ell_star)
        if r.step3_steps != cfg.step3_steps(ell, r.k):
            out.append(f"trial {r.k}: Step-3 length {r.step3_steps} != c3 varsigma^k 2^(beta l)")
        if r.tau_k_steps - r.tau_prev_steps != sum(r.interval_steps) + r.step3_steps:
            out.append(f"trial {r.k}: tau_k - tau_prev does not add up")
    return out


def trial_log_rows(records):
    """Rows for the trial-log CSV."""
    for r in records:
        adm = r.adm
        yield dict(
            k=r.k, attempted=int(r.attempted), step1_success=int(r.step1_success),
            ell_star="inf" if math.isinf(r.ell_star) else int(r.ell_star),
            tau_prev=repr(float(r.tau_prev)), tau_k=repr(float(r.tau_k)),
            girsanov_l2=repr(float(r.girsanov_l2)), branch=r.branch,
            adm_sup_T=repr(float(adm.sup_T_integral)) if adm else "nan",
            adm_phi1=repr(float(adm.phi1)) if adm else "nan",
            adm_phi2=repr(float(adm.phi2)) if adm else "nan",
            adm_pass=int(adm.passed) if adm else 1)


TRIAL_LOG_HEADER = ["k", "attempted", "step1_success", "ell_star", "tau_prev", "tau_k", "girsanov_l2",
                    "branch", "adm_sup_T", "adm_phi1", "adm_phi2", "adm_pass"]


# ------------------------------------------------------------- C_K

def gS_weighted_integral(gw_hist: np.ndarray, dt: float, alpha: float, H: float, merge_tol: float = 0.05) -> float:
    """``int_0^inf (1+t)^{2 alpha} |g_S(T1 + t)|^2 dt`` with ``g_S = C R_0 g``."""
    vals = np.atleast_2d(gw_hist)
    if not np.any(vals):
        return 0.0
    hgrid = UniformGrid(-vals.shape[1] * dt, dt, vals.shape[1])
    body, tail = weighted_r_integral(vals, hgrid, 0.0, alpha, H, merge_tol,
                                     scale=fk.inversion_constant(H))
    return body + tail


def measure_CK(ctx: CouplingContext, n_runs: int, rng: np.random.Generator, starts=None,
               safety: float = 1.5, apply: bool = False) -> float:
    """Monte Carlo max of the weighted ``g_S`` integral after successful Step-1 couplings.

    Each run draws ``w1`` at an admissible start pair, builds the coupled-branch
    drift and keeps it when the paths stick; the estimate is
    ``max(1, safety * max)``.  With ``apply=True`` the value is written to the
    config through :meth:`CouplingConfig.set_CK` (which also fixes ``c2``).
    """
    cfg = ctx.config
    eng = CouplingEngine(ctx)
    if starts is None:
        K = cfg.K
        pts = probe_points(ctx.model.d, K, 8, seed=11)
        starts = [(pts[i], pts[(i + 3) % len(pts)]) for i in range(len(pts))]
        starts.append((np.full(ctx.model.d, K / 2.0), np.full(ctx.model.d, -K / 2.0)))
    best = 0.0
    for r in range(n_runs):
        x1, x2 = starts[r % len(starts)]
        st = initial_state(cfg, x1, x2, "zero", capacity_time=4.0)
        w1 = rng.standard_normal((st.d, cfg.n1)) * math.sqrt(cfg.dt)
        pr = eng.step1_proposal(st, w1)
        eng.advance(st, w1, pr["g"])
        if float(np.linalg.norm(st.X1 - st.X2)) > eng.tol_stick(st):
            continue
        hist = st.gw[:, st.i - eng.M:st.i]
        best = max(best, gS_weighted_integral(hist, cfg.dt, cfg.alpha, cfg.H, cfg.adm_merge_tol))
    C_K = max(1.0, safety * best)
    if apply:
        cfg.set_CK(C_K)
    return C_K
