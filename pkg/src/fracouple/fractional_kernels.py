"""Fractional noise generation and the fractional operators used by the coupling.

Conventions
-----------
* Grids are uniform; node ``i`` is ``t0 + i*dt`` (never accumulated).
* Path objects store per-cell increments with shape ``(d, n)``.
* Drift functions (``g_w``, ``g_B``) are piecewise constant: one value per cell.
* ``gamma`` denotes ``H - 1/2`` throughout.

The Mandelbrot-Van Ness map is discretized by integrating the kernel exactly
against the piecewise-linear interpolant of ``W``.  The same cell weights give
the forward drift map ``g_w -> g_B`` and, through the reciprocal power series,
its inverse.  Both directions are therefore exactly consistent with
:func:`mvn_map`, which is what lets coupled paths stick to rounding error.
"""
from __future__ import annotations

import functools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, signal, special

log = logging.getLogger(__name__)

EIG_TOL = 1e-10


class CoverageError(ValueError):
    """Input path or record does not cover the span an operation needs."""


class ResolutionError(ValueError):
    """Numerical resolution problem (e.g. negative circulant eigenvalues)."""


class NonSmoothDriftWarning(UserWarning):
    """The fractional derivative was applied to a drift with large jumps."""


def _check_hurst(H: float) -> None:
    if not (0.5 < H < 1.0):
        raise ValueError(f"Hurst parameter must lie in (1/2, 1), got {H!r}")


# ---------------------------------------------------------------- constants

def alpha_h(H: float) -> float:
    """Normalization making ``Var(B_1) = 1`` for the two-sided kernel."""
    _check_hurst(H)
    return math.sqrt(2.0 * H * math.sin(math.pi * H) * math.gamma(2.0 * H)) / math.gamma(H + 0.5)


def calibrate_alpha_h(H: float) -> float:
    """Numerical calibration of :func:`alpha_h` from the untruncated kernel.

    Solves ``alpha^2 * (int_0^inf ((1+s)^g - s^g)^2 ds + 1/(2H)) = 1`` by
    adaptive quadrature.  Used by the calibration script and the tests as an
    independent route to the closed form.
    """
    _check_hurst(H)
    g = H - 0.5

    def f(s):
        return ((1.0 + s) ** g - s ** g) ** 2

    head, _ = integrate.quad(f, 0.0, 1.0, limit=200, epsabs=0, epsrel=1e-13)
    # tail: substitute s = 1/v to get a finite interval
    tail, _ = integrate.quad(lambda v: f(1.0 / v) / v ** 2, 0.0, 1.0, limit=200, epsabs=0, epsrel=1e-13)
    return 1.0 / math.sqrt(head + tail + 1.0 / (2.0 * H))


def inversion_constant(H: float) -> float:
    """Constant ``C`` in front of ``R_0`` in the memory part of ``g_B -> g_w``.

    ``cos(pi H)/pi`` (negative for H > 1/2).  It follows from
    ``D^g [I^g_{-inf} g] = (sin(pi g)/pi) R_0 g`` for ``g`` supported on the
    past, and is confirmed numerically against the exact discrete inverse.
    """
    _check_hurst(H)
    return math.cos(math.pi * H) / math.pi


# --------------------------------------------------------------------- types

@dataclass(frozen=True)
class UniformGrid:
    t0: float
    dt: float
    n: int

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be an integer >= 1, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def t_end(self) -> float:
        return self.t0 + self.n * self.dt

    def node(self, i: int) -> float:
        return self.t0 + i * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n + 1) * self.dt

    def index(self, t: float, tol: float = 1e-9) -> int:
        """Node index of time ``t``; raises if ``t`` is not a node."""
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) > tol:
            raise ValueError(f"time {t!r} is not a grid node (t0={self.t0}, dt={self.dt})")
        if i < 0 or i > self.n:
            raise CoverageError(f"time {t!r} outside grid [{self.t0}, {self.t_end}]")
        return i

    def sub(self, i0: int, i1: int) -> "UniformGrid":
        return UniformGrid(self.t0 + i0 * self.dt, self.dt, i1 - i0)


def _as_2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a (d, n) array, got shape {a.shape}")
    return a


@dataclass
class WienerPath:
    grid: UniformGrid
    increments: np.ndarray

    def __post_init__(self):
        self.increments = _as_2d(self.increments)
        if self.increments.shape[1] != self.grid.n:
            raise ValueError("increments length does not match grid.n")
        if not np.all(np.isfinite(self.increments)):
            raise ValueError("Wiener increments must be finite")

    @property
    def d(self) -> int:
        return self.increments.shape[0]

    def values(self) -> np.ndarray:
        """Node values with shape ``(d, n+1)``; zero at ``t0``."""
        out = np.zeros((self.d, self.grid.n + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    @classmethod
    def white(cls, grid: UniformGrid, d: int, rng: np.random.Generator) -> "WienerPath":
        return cls(grid, rng.standard_normal((d, grid.n)) * math.sqrt(grid.dt))

    @classmethod
    def zeros(cls, grid: UniformGrid, d: int) -> "WienerPath":
        return cls(grid, np.zeros((d, grid.n)))


@dataclass
class FbmPath:
    grid: UniformGrid
    H: float
    increments: np.ndarray

    def __post_init__(self):
        _check_hurst(self.H)
        self.increments = _as_2d(self.increments)
        if self.increments.shape[1] != self.grid.n:
            raise ValueError("increments length does not match grid.n")

    @property
    def d(self) -> int:
        return self.increments.shape[0]

    def values(self) -> np.ndarray:
        out = np.zeros((self.d, self.grid.n + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out


@dataclass
class DriftRecord:
    """Piecewise-constant ``g_w`` and ``g_B`` on a grid (one value per cell)."""

    grid: UniformGrid
    gw: np.ndarray
    gb: np.ndarray
    horizon: float = 256.0

    def __post_init__(self):
        self.gw = _as_2d(self.gw)
        self.gb = _as_2d(self.gb)
        if self.gw.shape != self.gb.shape or self.gw.shape[1] != self.grid.n:
            raise ValueError("gw/gb shapes must both be (d, grid.n)")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def d(self) -> int:
        return self.gw.shape[0]

    @classmethod
    def zeros(cls, grid: UniformGrid, d: int, horizon: float = 256.0) -> "DriftRecord":
        return cls(grid, np.zeros((d, grid.n)), np.zeros((d, grid.n)), horizon)


@dataclass(frozen=True)
class KernelParams:
    H: float
    theta: float | None = None
    alpha_H: float | None = None
    eps_theta: float | None = None
    quad_nodes: int = 8
    T_hist: float = 256.0
    delta: float | None = None  # weight exponent of the path space; recorded only

    def __post_init__(self):
        _check_hurst(self.H)
        theta = self.theta if self.theta is not None else 0.5 * (self.H + 0.5)
        if not (0.5 < theta < self.H):
            raise ValueError(f"theta must lie in (1/2, H), got {theta!r}")
        eps = 0.5 * (self.H - theta)
        if self.eps_theta is not None and abs(self.eps_theta - eps) > 1e-15:
            raise ValueError("eps_theta must equal (H - theta)/2")
        object.__setattr__(self, "theta", float(theta))
        object.__setattr__(self, "eps_theta", eps)
        if self.alpha_H is None:
            object.__setattr__(self, "alpha_H", alpha_h(self.H))
        if not self.alpha_H > 0:
            raise ValueError("alpha_H must be positive")
        if self.quad_nodes < 1:
            raise ValueError("quad_nodes must be >= 1")
        if not self.T_hist > 0:
            raise ValueError("T_hist must be positive")

    @property
    def gamma(self) -> float:
        return self.H - 0.5

    def n_hist(self, dt: float) -> int:
        """Kernel memory length in cells."""
        return max(1, int(round(self.T_hist / dt)))


# ----------------------------------------------------------- fGn generation

def fgn_autocov(H: float, k) -> np.ndarray:
    """Autocovariance of unit-step fGn at integer lags ``k``."""
    k = np.abs(np.asarray(k, dtype=float))
    h2 = 2.0 * H
    return 0.5 * ((k + 1.0) ** h2 + np.abs(k - 1.0) ** h2 - 2.0 * k ** h2)


@functools.lru_cache(maxsize=64)
def _circulant_sqrt_eigs(H: float, n: int) -> np.ndarray:
    N = 2 * n
    k = np.arange(N)
    row = fgn_autocov(H, np.minimum(k, N - k))
    lam = np.fft.fft(row).real
    lmax = lam.max()
    neg = lam < 0
    if np.any(lam < -EIG_TOL * lmax):
        raise ResolutionError(
            f"circulant embedding has eigenvalue {lam.min():.3e} < -{EIG_TOL}*max for H={H}, n={n}")
    if np.any(neg):
        log.info("clipping %d small negative circulant eigenvalues (min %.3e)", int(neg.sum()), lam.min())
        lam = np.where(neg, 0.0, lam)
    out = np.sqrt(lam / N)
    out.setflags(write=False)
    return out


def fgn_batch(H: float, n: int, n_paths: int, rng: np.random.Generator, dt: float = 1.0) -> np.ndarray:
    """Exact fGn samples (Davies-Harte), shape ``(n_paths, n)``, scaled to step ``dt``.

    Each complex FFT yields two independent samples (real and imaginary parts).
    """
    _check_hurst(H)
    if n < 1 or n_paths < 1:
        raise ValueError("n and n_paths must be >= 1")
    s = _circulant_sqrt_eigs(H, n)
    m = (n_paths + 1) // 2
    z = rng.standard_normal((m, 2 * n)) + 1j * rng.standard_normal((m, 2 * n))
    y = np.fft.fft(s * z, axis=1)[:, :n]
    out = np.concatenate([y.real, y.imag], axis=0)[:n_paths]
    return out * dt ** H


def sample_fgn(params: KernelParams, grid: UniformGrid, d: int, rng: np.random.Generator) -> FbmPath:
    """Exact fBm increments on ``grid`` (``d`` independent coordinates)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    inc = fgn_batch(params.H, grid.n, d, rng, grid.dt)
    return FbmPath(grid, params.H, inc)


# ------------------------------------------------- Mandelbrot-Van Ness map

@functools.lru_cache(maxsize=64)
def mvn_weights(H: float, M: int) -> np.ndarray:
    """Cell weights ``c_0..c_M`` of the discretized kernel.

    ``Delta B_i = alpha_H * dt**g * sum_m c_m * Delta W_{i-m}`` where the kernel is
    integrated exactly against piecewise-linear ``W`` (so ``c_0 = 1/(g+1)``).
    """
    g = H - 0.5
    p = g + 1.0
    c = np.empty(M + 1)
    c[0] = 1.0 / p
    if M >= 1:
        c[1] = (2.0 ** p - 2.0) / p
    if M >= 2:
        m = np.arange(2, M + 1, dtype=float)
        # second difference of x^p at m, evaluated without cancellation
        c[2:] = m ** p * (np.expm1(p * np.log1p(1.0 / m)) + np.expm1(p * np.log1p(-1.0 / m))) / p
    c.setflags(write=False)
    return c


@functools.lru_cache(maxsize=32)
def _reciprocal_weights_pow2(H: float, M: int, n: int) -> np.ndarray:
    c = mvn_weights(H, M)
    d = np.array([1.0 / c[0]])
    k = 1
    while k < n:
        k2 = min(2 * k, n)
        e = signal.fftconvolve(c[:k2], d)[:k2]
        dd = -signal.fftconvolve(d, e)[:k2]
        dd[: d.size] += 2.0 * d
        d = dd
        k = k2
    d.setflags(write=False)
    return d


def reciprocal_weights(H: float, M: int, n: int) -> np.ndarray:
    """First ``n`` coefficients of the power series ``1/c(z)`` (Newton iteration)."""
    m = 1
    while m < n:
        m *= 2
    return _reciprocal_weights_pow2(H, M, m)[:n]


def _conv_rows(x: np.ndarray, k: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Rows of ``x`` convolved with kernel ``k``, output indices ``[lo, hi)``."""
    if x.shape[1] == 0 or hi <= lo:
        return np.zeros((x.shape[0], max(hi - lo, 0)))
    y = signal.fftconvolve(x, k[None, :], axes=1)
    out = np.zeros((x.shape[0], hi - lo))
    top = min(hi, y.shape[1])
    if top > lo:
        out[:, : top - lo] = y[:, lo:top]
    return out


def truncation_deficit(H: float, T_hist: float, alpha: float | None = None) -> float:
    """``1 - Var(B_1)`` when each increment's kernel only sees ``T_hist`` of past.

    One-dimensional quadrature of the squared truncated kernel
    ``K(v) = min(1-v, T)^g - min((-v)_+, T)^g`` over ``v``.
    """
    g = H - 0.5
    a = alpha_h(H) if alpha is None else alpha

    def k(v):
        return min(1.0 - v, T_hist) ** g - min(max(-v, 0.0), T_hist) ** g

    pts = sorted({0.0, 1.0 - T_hist, -T_hist})
    lo = -T_hist - 1.0
    total = 0.0
    edges = [lo] + [p for p in pts if lo < p < 1.0] + [1.0]
    for x0, x1 in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(lambda v: k(v) ** 2, x0, x1, limit=400, epsabs=1e-14, epsrel=1e-12)
        total += val
    return 1.0 - a * a * total


def mvn_map(w: WienerPath, params: KernelParams, start: float | None = None) -> FbmPath:
    """fBm increments from a two-sided Wiener path.

    Output window is ``[start, w.grid.t_end]``; ``start`` defaults to
    ``w.grid.t0 + T_hist`` (the earliest time with a full kernel memory).
    """
    grid = w.grid
    dt = grid.dt
    M = params.n_hist(dt)
    i0 = M if start is None else grid.index(start)
    if i0 < M:
        have = i0 * dt
        raise CoverageError(
            f"insufficient past coverage: output start {grid.node(i0)} needs T_hist={params.T_hist} of past; "
            f"missing span [{grid.node(i0) - params.T_hist}, {grid.t0}] ({params.T_hist - have} time units)")
    n_out = grid.n - i0
    if n_out < 1:
        raise CoverageError("output window is empty")
    c = mvn_weights(params.H, M)
    x = w.increments[:, i0 - M:]
    dB = params.alpha_H * dt ** params.gamma * _conv_rows(x, c, M, M + n_out)
    if log.isEnabledFor(logging.DEBUG):
        log.debug("mvn_map: T_hist=%g, variance deficit %.3e", params.T_hist,
                  truncation_deficit(params.H, params.T_hist, params.alpha_H))
    return FbmPath(grid.sub(i0, grid.n), params.H, dB)


# --------------------------------------------------------- R_T operator

def _gl(q: int):
    x, wts = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * wts


def _cell_masses(values: np.ndarray, grid: UniformGrid, T: float, q: int, merge_tol: float):
    """Quadrature points ``u`` (distance ``T - s``) and masses for ``int u^g/(t+u) g(s) ds``.

    Returns ``(u, mass, near)`` where ``mass`` has shape ``(d, P)`` and already
    includes ``u^g`` and the cell weights; ``near`` lists cells handled by
    adaptive quadrature ``(u_a, u_b, value_vector)``.
    """
    dt = grid.dt
    nz = np.flatnonzero(np.any(values != 0.0, axis=0))
    # u-interval of cell j: [T - s_{j+1}, T - s_j]
    ua = T - (grid.t0 + (nz + 1) * dt)
    ub = ua + dt
    ua = np.maximum(ua, 0.0)
    near_mask = ua < 2.0 * dt
    near = [(ua[i], ub[i], values[:, nz[i]]) for i in np.flatnonzero(near_mask)]
    far = ~near_mask
    cells = nz[far]
    ua_f = ua[far]
    us = []
    ms = []
    if cells.size:
        if merge_tol > 0:
            # greedy blocks of consecutive cells, width <= merge_tol * distance
            order = np.argsort(ua_f)
            cells = cells[order]
            ua_f = ua_f[order]
            i = 0
            single_u, single_v = [], []
            blk_u, blk_m = [], []
            while i < cells.size:
                j = i + 1
                while (j < cells.size and cells[j - 1] - cells[j] == 1 and
                       (ua_f[j] + dt - ua_f[i]) <= merge_tol * ua_f[i]):
                    j += 1
                if j - i <= 2:
                    single_u.extend(ua_f[i:j])
                    single_v.extend(values[:, cells[k]] for k in range(i, j))
                else:
                    mid = ua_f[i:j] + 0.5 * dt
                    v = values[:, cells[i:j]]
                    m0 = v.sum(axis=1) * dt
                    uc = 0.5 * (ua_f[i] + ua_f[j - 1] + dt)
                    m1 = (v * (mid - uc)).sum(axis=1) * dt
                    half = 0.5 * (ua_f[j - 1] + dt - ua_f[i]) / math.sqrt(3.0)
                    blk_u.append([uc - half, uc + half])
                    blk_m.append(np.stack([0.5 * m0 - 0.5 * m1 / half, 0.5 * m0 + 0.5 * m1 / half], axis=1))
                i = j
            if single_u:
                ua_s = np.asarray(single_u)
                vs = np.stack(single_v, axis=1)
                x, wq = _gl(q)
                u = (ua_s[:, None] + dt * x[None, :]).ravel()
                us.append(u)
                ms.append((vs[:, :, None] * (dt * wq)[None, None, :]).reshape(vs.shape[0], -1))
            if blk_u:
                us.append(np.asarray(blk_u).ravel())
                ms.append(np.concatenate(blk_m, axis=1))
        else:
            x, wq = _gl(q)
            u = (ua_f[:, None] + dt * x[None, :]).ravel()
            vs = values[:, cells]
            us.append(u)
            ms.append((vs[:, :, None] * (dt * wq)[None, None, :]).reshape(vs.shape[0], -1))
    if us:
        u = np.concatenate(us)
        mass = np.concatenate(ms, axis=1)
    else:
        u = np.zeros(0)
        mass = np.zeros((values.shape[0], 0))
    return u, mass, near


def _cauchy_sum(t: np.ndarray, u: np.ndarray, weighted: np.ndarray, chunk: int = 2_000_000) -> np.ndarray:
    """``out[:, i] = sum_p weighted[:, p] / (t_i + u_p)``."""
    d = weighted.shape[0]
    out = np.zeros((d, t.size))
    if u.size == 0:
        return out
    step = max(1, chunk // u.size)
    for i in range(0, t.size, step):
        tt = t[i:i + step]
        out[:, i:i + step] = weighted @ (1.0 / (tt[None, :] + u[:, None]))
    return out


def _near_integral(ua: float, ub: float, t: float, g: float) -> float:
    if ua == 0.0:
        val, _ = integrate.quad(lambda u: 1.0 / (t + u), 0.0, ub, weight="alg", wvar=(g, 0.0),
                                epsabs=0.0, epsrel=1e-12, limit=200)
    else:
        val, _ = integrate.quad(lambda u: u ** g / (t + u), ua, ub, epsabs=0.0, epsrel=1e-12, limit=200)
    return val


def r_operator(values, grid: UniformGrid, T: float, t, H: float, quad_nodes: int = 8,
               merge_tol: float = 0.0) -> np.ndarray:
    """``(R_T g)(t) = t^{-g} * int_{-inf}^0 (T-s)^g / (t+T-s) g(s) ds``.

    ``values`` are cell values of ``g`` on ``grid`` (which must end at 0);
    ``t`` is an array of positive times or a :class:`UniformGrid` (nodes > 0 are
    used).  Returns an array of shape ``(d, len(t))``.  ``merge_tol > 0`` merges
    far cells into two-point moment-matched blocks (used by admissibility).
    """
    _check_hurst(H)
    vals = _as_2d(values)
    if vals.shape[1] != grid.n:
        raise ValueError("values length does not match grid")
    if abs(grid.t_end) > 1e-9 * max(1.0, abs(grid.t0)):
        raise ValueError(f"history grid must end at 0, ends at {grid.t_end}")
    if T < 0:
        raise ValueError("T must be >= 0")
    if isinstance(t, UniformGrid):
        tt = t.times()
        tt = tt[tt > 0]
    else:
        tt = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(tt <= 0):
        raise ValueError("t-nodes must be strictly positive")
    g = H - 0.5
    out = np.zeros((vals.shape[0], tt.size))
    if not np.any(vals):
        return out
    u, mass, near = _cell_masses(vals, grid, T, quad_nodes, merge_tol)
    if u.size:
        out += _cauchy_sum(tt, u, mass * u[None, :] ** g)
    for ua, ub, v in near:
        col = np.array([_near_integral(ua, ub, ti, g) for ti in tt])
        out += v[:, None] * col[None, :]
    return out * tt[None, :] ** (-g)


def r_operator_cell_average(values, grid: UniformGrid, T: float, out_grid: UniformGrid, H: float,
                            quad_nodes: int = 8) -> np.ndarray:
    """Cell averages of ``R_T g`` over the cells of ``out_grid`` (which starts at 0)."""
    g = H - 0.5
    dt = out_grid.dt
    n = out_grid.n
    x, wq = _gl(quad_nodes)
    # cell 0 carries the t^{-g} singularity: Gauss-Jacobi nodes with weight t^{-g}
    xj, wj = special.roots_jacobi(quad_nodes, 0.0, -g)
    xj = 0.5 * (xj + 1.0)
    wj = wj * 0.5 ** (1.0 - g)
    left = out_grid.t0 + np.arange(n) * dt
    nodes = [left[0] + dt * xj]
    if n > 1:
        nodes.append((left[1:, None] + dt * x[None, :]).ravel())
    tt = np.concatenate(nodes)
    vals = r_operator(values, grid, T, tt, H, quad_nodes) * tt[None, :] ** g  # strip t^{-g}
    d = vals.shape[0]
    out = np.empty((d, n))
    q = quad_nodes
    out[:, 0] = (vals[:, :q] * wj[None, :]).sum(axis=1) * dt ** (1.0 - g) / dt
    if n > 1:
        rest = vals[:, q:].reshape(d, n - 1, q) * (tt[q:].reshape(n - 1, q) ** (-g))[None]
        out[:, 1:] = (rest * wq[None, None, :]).sum(axis=2)
    return out


# ------------------------------------------------------ g_w <-> g_B pair

def _hist_values(hist, d: int, M: int, dt: float) -> np.ndarray:
    """Last ``M`` cells of the ``g_w`` history (zero-padded at the front)."""
    if hist is None:
        return np.zeros((d, M))
    if isinstance(hist, DriftRecord):
        if abs(hist.grid.dt - dt) > 1e-12 * dt:
            raise ValueError("history and window grids have different dt")
        h = hist.gw
    else:
        h = _as_2d(hist)
    if h.shape[0] != d:
        raise ValueError("history dimension mismatch")
    if h.shape[1] >= M:
        return h[:, h.shape[1] - M:]
    return np.concatenate([np.zeros((d, M - h.shape[1])), h], axis=1)


def memory_drift_b(hist, n: int, dt: float, params: KernelParams, d: int | None = None) -> np.ndarray:
    """``g_B`` generated on the next ``n`` cells by the ``g_w`` history alone."""
    M = params.n_hist(dt)
    dd = d if d is not None else (hist.d if isinstance(hist, DriftRecord) else _as_2d(hist).shape[0])
    h = _hist_values(hist, dd, M, dt)
    c = mvn_weights(params.H, M)
    return params.alpha_H * dt ** params.gamma * _conv_rows(h, c, M, M + n)


def gw_to_gb(g, hist, params: KernelParams, dt: float) -> np.ndarray:
    """Cell values of ``g_B`` on a window from ``g_w`` on the window and its history.

    Exactly the drift seen by :func:`mvn_map` when ``W`` is shifted by ``int g_w``.
    """
    g = _as_2d(g)
    d, n = g.shape
    M = params.n_hist(dt)
    h = _hist_values(hist, d, M, dt)
    c = mvn_weights(params.H, M)
    full = np.concatenate([h, g], axis=1)
    return params.alpha_H * dt ** params.gamma * _conv_rows(full, c, M, M + n)


def gb_to_gw(f, hist, params: KernelParams, dt: float, memory: str = "discrete",
             tol_jump: float | None = None) -> np.ndarray:
    """Cell values of ``g_w`` on a window producing ``g_B = f`` there.

    The window part is the discrete fractional derivative (product integration
    with the reciprocal weights of :func:`mvn_weights`).  The memory part is
    ``memory="discrete"``: exact cancellation of :func:`memory_drift_b`, or
    ``memory="operator"``: ``C * R_0 g_w`` cell-averaged (continuous formula).
    """
    f = _as_2d(f)
    d, n = f.shape
    if tol_jump is not None and n > 1:
        jump = np.max(np.abs(np.diff(f, axis=1)))
        if jump > tol_jump:
            warnings.warn(f"g_B has a jump {jump:.3e} > tol_jump={tol_jump:.3e}; fractional derivative "
                          "accuracy degrades", NonSmoothDriftWarning, stacklevel=2)
    M = params.n_hist(dt)
    scale = 1.0 / (params.alpha_H * dt ** params.gamma)
    dr = reciprocal_weights(params.H, M, n)
    if memory == "discrete":
        rhs = f - memory_drift_b(hist, n, dt, params, d)
        return scale * _conv_rows(rhs, dr, 0, n)
    if memory == "operator":
        out = scale * _conv_rows(f, dr, 0, n)
        h = _hist_values(hist, d, M, dt)
        if np.any(h):
            hgrid = UniformGrid(-M * dt, dt, M)
            out += inversion_constant(params.H) * r_operator_cell_average(
                h, hgrid, 0.0, UniformGrid(0.0, dt, n), params.H, params.quad_nodes)
        return out
    raise ValueError(f"unknown memory mode {memory!r}")


def continuation_drift(hist, n: int, params: KernelParams, dt: float) -> np.ndarray:
    """``g_w`` on the next ``n`` cells that keeps ``g_B = 0`` there (discrete ``g_S``)."""
    hv = hist.gw if isinstance(hist, DriftRecord) else _as_2d(hist)
    return gb_to_gw(np.zeros((hv.shape[0], n)), hist, params, dt, memory="discrete")


# ------------------------------------------------------------ functionals

def holder_norm(values, grid: UniformGrid, theta: float, a: float, b: float) -> float:
    """``sup |f(t)-f(s)|/(t-s)^theta`` over all grid node pairs in ``[a, b]``.

    ``values`` are node values, shape ``(n+1,)`` or ``(d, n+1)``; the
    Euclidean norm is used for vectors.
    """
    if not (0.0 < theta < 1.0):
        raise ValueError("theta must lie in (0, 1)")
    v = _as_2d(values)
    if v.shape[1] != grid.n + 1:
        raise ValueError("values must be node values (length n+1)")
    try:
        i0 = grid.index(a)
        i1 = grid.index(b)
    except CoverageError as exc:
        raise CoverageError(f"window [{a}, {b}] not covered by the grid: {exc}") from None
    if i1 <= i0:
        raise ValueError("window must satisfy a < b")
    x = v[:, i0:i1 + 1]
    m = x.shape[1]
    best = 0.0
    for k in range(1, m):
        diff = x[:, k:] - x[:, :-k]
        dist = np.sqrt(np.einsum("ij,ij->j", diff, diff)) if x.shape[0] > 1 else np.abs(diff[0])
        best = max(best, float(dist.max()) / (k * grid.dt) ** theta)
    return best


def _pow_diff(hi: np.ndarray, lo: np.ndarray, p: float) -> np.ndarray:
    """``hi**p - lo**p`` for ``hi >= lo >= 0`` without cancellation."""
    out = np.empty(np.broadcast(hi, lo).shape)
    hi, lo = np.broadcast_arrays(hi, lo)
    pos = lo > 0
    out[pos] = lo[pos] ** p * np.expm1(p * np.log1p((hi[pos] - lo[pos]) / lo[pos]))
    out[~pos] = hi[~pos] ** p
    return out


def kernel_integral(w: WienerPath, lo: float, hi: float, u, power: float) -> np.ndarray:
    """``int_lo^hi (u - r)^power dW_r`` for piecewise-linear ``W`` and ``u >= hi``.

    Vectorized over the evaluation points ``u``; returns shape ``(d, len(u))``.
    Partial cells are integrated exactly.
    """
    grid = w.grid
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if lo < grid.t0 - 1e-12 or hi > grid.t_end + 1e-12:
        raise CoverageError(f"span [{lo}, {hi}] not covered by [{grid.t0}, {grid.t_end}]")
    if np.any(u < hi - 1e-12):
        raise ValueError("evaluation points must satisfy u >= hi")
    d = w.d
    if hi <= lo:
        return np.zeros((d, u.size))
    j0 = max(0, int(math.floor((lo - grid.t0) / grid.dt + 1e-12)))
    j1 = min(grid.n, int(math.ceil((hi - grid.t0) / grid.dt - 1e-12)))
    j = np.arange(j0, j1)
    a = np.maximum(grid.t0 + j * grid.dt, lo)
    b = np.minimum(grid.t0 + (j + 1) * grid.dt, hi)
    slope = w.increments[:, j0:j1] / grid.dt
    p = power + 1.0
    # int_a^b (u-r)^power dr = [(u-a)^p - (u-b)^p]/p
    xa = np.maximum(u[:, None] - a[None, :], 0.0)
    xb = np.maximum(u[:, None] - b[None, :], 0.0)
    cell = _pow_diff(xa, xb, p) / p
    return slope @ cell.T


def _ipp_memory(w: WienerPath, a: float, b: float, u: np.ndarray, g: float) -> np.ndarray:
    """``int_a^b (u-r)^g dW_r`` by integration by parts.

    ``(u-a)^g (W_b - W_a) + g int_a^b (u-r)^{g-1} (W_r - W_b) dr`` with the
    piecewise-linear ``W_r - W_b`` integrated exactly cell by cell.
    """
    grid = w.grid
    i_a = grid.index(a)
    i_b = grid.index(b)
    vals = w.values()
    Wb = vals[:, i_b]
    Wa = vals[:, i_a]
    j = np.arange(i_a, i_b)
    r0 = grid.t0 + j * grid.dt
    r1 = r0 + grid.dt
    V = vals[:, i_a:i_b] - Wb[:, None]          # W_{r_j} - W_b
    S = w.increments[:, i_a:i_b] / grid.dt      # slope on cell j
    x0 = u[:, None] - r0[None, :]               # larger end
    x1 = u[:, None] - r1[None, :]
    # int_{x1}^{x0} x^{g-1} (V + (u - x - r0) S) dx
    Ig = _pow_diff(x0, x1, g) / g               # int x^{g-1}
    Ip = _pow_diff(x0, x1, g + 1.0) / (g + 1.0)  # int x^g
    # (u - r0) = x0
    term = V @ Ig.T + S @ (x0 * Ig - Ip).T
    return (np.power(u - a, g))[None, :] * (Wb - Wa)[:, None] + g * term


def phi_functional(w: WienerPath, tau: float, eps: float, params: KernelParams,
                   method: str = "ipp") -> float:
    """Noise-memory functional of the admissibility condition at time ``tau``.

    Sup over grid pairs in ``[tau, tau+1]`` of the difference quotient of the
    truncated memory integral over ``[tau-1-T_hist, tau-1]``, plus the
    ``(1/2 - eps)``-Hölder norm of ``w`` on ``[tau-1, tau]``.
    """
    grid = w.grid
    g = params.gamma
    lo = tau - 1.0 - params.T_hist
    if lo < grid.t0 - 1e-9:
        raise CoverageError(f"insufficient past coverage: need [{lo}, {tau - 1}], path starts at {grid.t0}")
    if tau > grid.t_end + 1e-9:
        raise CoverageError(f"path must reach tau={tau}, ends at {grid.t_end}")
    i_tau = grid.index(tau)
    n1 = int(round(1.0 / grid.dt))
    lo_node = grid.node(grid.index(lo)) if lo > grid.t0 else grid.t0
    u = grid.t0 + (i_tau + np.arange(n1 + 1)) * grid.dt
    if method == "ipp":
        F = _ipp_memory(w, lo_node, tau - 1.0, u, g)
    elif method == "direct":
        F = kernel_integral(w, lo_node, tau - 1.0, u, g)
    else:
        raise ValueError(f"unknown method {method!r}")
    best = 0.0
    for k in range(1, n1 + 1):
        diff = F[:, k:] - F[:, :-k]
        q = np.sqrt(np.einsum("ij,ij->j", diff, diff)).max() / (k * grid.dt)
        best = max(best, float(q))
    hold = holder_norm(w.values(), grid, 0.5 - eps, tau - 1.0, tau)
    return best + hold


@dataclass
class MemoryComponents:
    gamma1: np.ndarray
    gamma2: np.ndarray
    gamma3: np.ndarray
    lambdas: list = field(default_factory=list)
    far: np.ndarray | None = None  # part before the truncation horizon (should be ~0)
    alpha_H: float = 1.0

    def reconstruct(self) -> np.ndarray:
        total = sum(self.lambdas, np.zeros_like(self.gamma1)) + self.gamma1 - self.gamma2 + self.gamma3
        return self.alpha_H * total


def memory_decomposition(w: WienerPath, s: float, t: float, breakpoints, params: KernelParams,
                         h: float | None = None) -> MemoryComponents:
    """Split ``B_t - B_s`` into near-field terms and the far-past pieces.

    ``Gamma1 = int_{fl(s)-1}^{s-h} [(t-r)^g - (s-r)^g] dW``,
    ``Gamma2 = int_{s-h}^s (s-r)^g dW``, ``Gamma3 = int_{s-h}^t (t-r)^g dW`` and
    ``Lambda_m`` the same difference kernel over ``[tau_{m-1}, tau_m]`` (clipped
    to the memory horizon), the last piece ending at ``fl(s)-1``.
    """
    if not s < t <= math.floor(s) + 1 + 1e-12:
        raise ValueError("need s < t <= floor(s) + 1")
    bps = [float(b) for b in breakpoints]
    if any(b1 <= b0 for b0, b1 in zip(bps[:-1], bps[1:])):
        raise ValueError("breakpoints must be strictly increasing")
    if bps and bps[-1] > s:
        raise ValueError("breakpoints must not exceed s")
    g = params.gamma
    dt = w.grid.dt
    h = dt if h is None else h
    fs = math.floor(s + 1e-12) - 1.0
    lo = fs - params.T_hist
    if lo < w.grid.t0 - 1e-9:
        raise CoverageError(f"insufficient past coverage: need {lo}, path starts at {w.grid.t0}")
    ut = np.array([t])
    us = np.array([s])

    def diff(a, b):
        if b <= a:
            return np.zeros(w.d)
        return (kernel_integral(w, a, b, ut, g) - kernel_integral(w, a, b, us, g))[:, 0]

    gamma1 = diff(fs, s - h)
    gamma2 = kernel_integral(w, s - h, s, us, g)[:, 0]
    gamma3 = kernel_integral(w, s - h, t, ut, g)[:, 0]
    cuts = [lo] + [min(max(b, lo), fs) for b in bps if b < fs] + [fs]
    lambdas = [diff(a, b) for a, b in zip(cuts[:-1], cuts[1:])]
    return MemoryComponents(gamma1, gamma2, gamma3, lambdas, None, params.alpha_H)


# ----------------------------------------------------------------- CSV I/O

def write_noise_csv(path, grid: UniformGrid, increments) -> None:
    """Cumulative path values, header ``t,coord_0,...``, 17 significant digits."""
    inc = _as_2d(increments)
    vals = np.zeros((inc.shape[0], grid.n + 1))
    np.cumsum(inc, axis=1, out=vals[:, 1:])
    times = grid.times()
    header = "t," + ",".join(f"coord_{i}" for i in range(inc.shape[0]))
    data = np.column_stack([times, vals.T])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_noise_csv(path) -> WienerPath:
    """Inverse of :func:`write_noise_csv` (returns increments on the file's grid)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0] != "t" or any(h != f"coord_{i}" for i, h in enumerate(header[1:])):
        raise ValueError(f"unexpected noise CSV header {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    if t.size < 2:
        raise ValueError("noise CSV needs at least two rows")
    dt = (t[-1] - t[0]) / (t.size - 1)
    grid = UniformGrid(float(t[0]), float(dt), t.size - 1)
    if np.max(np.abs(grid.times() - t)) > 1e-9 * max(1.0, np.max(np.abs(t))):
        raise ValueError("noise CSV times are not uniform")
    return WienerPath(grid, np.diff(data[:, 1:].T, axis=1))
