"""SDE models, assumption validators and the pathwise Euler integrator.

Model callables are batch-friendly: a state array of shape ``(..., d)`` maps to
``(..., d)`` for ``b`` and ``h``, ``(..., d, d)`` for ``sigma`` and ``grad_h``,
and ``(...)`` for ``V``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .fractional_kernels import FbmPath, KernelParams, UniformGrid, holder_norm, sample_fgn

log = logging.getLogger(__name__)

TOL_H2 = 1e-8


class IntegrationError(RuntimeError):
    """Non-finite state during integration."""

    def __init__(self, msg: str, step: int, state=None):
        super().__init__(f"{msg} at step {step}")
        self.step = step
        self.state = state


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d: int
    b: Callable
    sigma: Callable
    h: Callable
    grad_h: Callable
    V: Callable
    grad_V: Callable
    beta0: float
    kappa0: float
    sigma_bound: float
    h_inv: Callable | None = None
    lipschitz: Callable | None = None  # optional hint: radius -> Lipschitz bound of b on the ball
    params: dict = field(default_factory=dict)

    def lamperti_drift(self, y: np.ndarray) -> np.ndarray:
        """``F(y) = grad_h(x) b(x)`` at ``x = h^{-1}(y)``."""
        x = self.inverse_h(y)
        return np.einsum("...ij,...j->...i", self.grad_h(x), self.b(x))

    def inverse_h(self, y: np.ndarray, x_start: np.ndarray | None = None, tol: float = 1e-13,
                  max_iter: int = 60) -> np.ndarray:
        """``h^{-1}(y)``: analytic when supplied, otherwise damped Newton."""
        if self.h_inv is not None:
            return self.h_inv(y)
        y = np.asarray(y, dtype=float)
        x = np.array(y if x_start is None else x_start, dtype=float)
        for _ in range(max_iter):
            r = self.h(x) - y
            if np.max(np.abs(r)) <= tol * (1.0 + np.max(np.abs(y))):
                return x
            step = np.linalg.solve(self.grad_h(x), r[..., None])[..., 0]
            x = x - step
        raise RuntimeError(f"Newton inversion of h did not converge for model {self.name}")


@dataclass
class Trajectory:
    grid: UniformGrid
    states: np.ndarray  # (n+1, d)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.grid.n + 1:
            raise ValueError("states must have n+1 rows")

    @property
    def d(self) -> int:
        return self.states.shape[1]


# ------------------------------------------------------------- builtins

def _quad_V(x):
    return 1.0 + np.sum(x * x, axis=-1)


def _quad_grad_V(x):
    return 2.0 * x


def _eye_like(x, d):
    return np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy()


def additive_baseline(d: int = 1) -> ModelSpec:
    """``dX = -X dt + dB``."""
    return ModelSpec(
        name="additive_baseline", d=d,
        b=lambda x: -np.asarray(x, dtype=float),
        sigma=lambda x: _eye_like(np.asarray(x, dtype=float), d),
        h=lambda x: np.array(x, dtype=float),
        grad_h=lambda x: _eye_like(np.asarray(x, dtype=float), d),
        V=_quad_V, grad_V=_quad_grad_V, beta0=2.0 * d, kappa0=2.0, sigma_bound=1.0,
        h_inv=lambda y: np.array(y, dtype=float),
        lipschitz=lambda r: 1.0, params={"d": d, "linear_rate": 1.0})


def scalar_sin() -> ModelSpec:
    """``sigma = 1/(1 + sin(x)/2)``, ``h = x - cos(x)/2``, ``b = -x``."""
    return ModelSpec(
        name="scalar_sin", d=1,
        b=lambda x: -np.asarray(x, dtype=float),
        sigma=lambda x: (1.0 / (1.0 + 0.5 * np.sin(np.asarray(x, dtype=float))))[..., None],
        h=lambda x: np.asarray(x, dtype=float) - 0.5 * np.cos(x),
        grad_h=lambda x: (1.0 + 0.5 * np.sin(np.asarray(x, dtype=float)))[..., None],
        V=_quad_V, grad_V=_quad_grad_V, beta0=2.0, kappa0=2.0, sigma_bound=2.0,
        lipschitz=lambda r: 1.0)


def planar_rotation(rho_rot: float = 1.0) -> ModelSpec:
    """``b(z) = -z - rho_rot cos(theta_z) z_perp`` with identity noise."""

    def b(z):
        z = np.asarray(z, dtype=float)
        r = np.sqrt(np.sum(z * z, axis=-1))
        cos_t = np.divide(z[..., 0], r, out=np.zeros_like(r), where=r > 0)
        perp = np.stack([-z[..., 1], z[..., 0]], axis=-1)
        return -z - rho_rot * cos_t[..., None] * perp

    return ModelSpec(
        name="planar_rotation", d=2, b=b,
        sigma=lambda x: _eye_like(np.asarray(x, dtype=float), 2),
        h=lambda x: np.array(x, dtype=float),
        grad_h=lambda x: _eye_like(np.asarray(x, dtype=float), 2),
        V=_quad_V, grad_V=_quad_grad_V, beta0=2.0, kappa0=2.0, sigma_bound=1.0,
        h_inv=lambda y: np.array(y, dtype=float),
        lipschitz=lambda r: 1.0 + 2.0 * abs(rho_rot), params={"rho_rot": rho_rot})


def diagonal_class_model(P, sigmas, antiderivs, drift_scale: float = 1.0) -> ModelSpec:
    """``sigma(x) = P Diag(sigma_i(y_i))`` with ``y = P^{-1} x`` and ``h_i = phi_i(y_i)``.

    ``antiderivs[i]`` must satisfy ``phi_i' = 1/sigma_i``; then ``grad h = sigma^{-1}``.
    """
    P = np.asarray(P, dtype=float)
    Pinv = np.linalg.inv(P)
    d = P.shape[0]

    def y_of(x):
        return np.einsum("ij,...j->...i", Pinv, np.asarray(x, dtype=float))

    def sigma(x):
        y = y_of(x)
        diag = np.stack([sigmas[i](y[..., i]) for i in range(d)], axis=-1)
        return P * diag[..., None, :]

    def h(x):
        y = y_of(x)
        return np.stack([antiderivs[i](y[..., i]) for i in range(d)], axis=-1)

    def grad_h(x):
        y = y_of(x)
        inv = np.stack([1.0 / sigmas[i](y[..., i]) for i in range(d)], axis=-1)
        return inv[..., :, None] * Pinv

    return ModelSpec(
        name="diagonal_class", d=d, b=lambda x: -drift_scale * np.asarray(x, dtype=float),
        sigma=sigma, h=h, grad_h=grad_h, V=_quad_V, grad_V=_quad_grad_V,
        beta0=2.0 * d, kappa0=2.0 * drift_scale, sigma_bound=float("nan"))


def shear_counterexample() -> ModelSpec:
    """Two-dimensional model whose ``sigma^{-1}`` is not the Jacobian of any map.

    In gradient layout (entry ``(i, j)`` is ``d_i h_j``) the matrix is
    ``[[1, x2], [0, 1]]``; in the Jacobian layout used by this package
    (entry ``(i, j)`` is ``d_j h_i``) it is the transpose ``[[1, 0], [x2, 1]]``.
    Its second row ``(x2, 1)`` is not a gradient.
    """

    def grad_h(x):
        x = np.asarray(x, dtype=float)
        out = _eye_like(x, 2)
        out[..., 1, 0] = x[..., 1]
        return out

    def sigma(x):
        x = np.asarray(x, dtype=float)
        out = _eye_like(x, 2)
        out[..., 1, 0] = -x[..., 1]
        return out

    def h(x):
        # no exact potential exists; this one matches the first row only
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 0], x[..., 1] + x[..., 0] * x[..., 1]], axis=-1)

    return ModelSpec(
        name="shear_counterexample", d=2, b=lambda x: -np.asarray(x, dtype=float),
        sigma=sigma, h=h, grad_h=grad_h, V=_quad_V, grad_V=_quad_grad_V,
        beta0=4.0, kappa0=2.0, sigma_bound=float("nan"))


# ------------------------------------------------------------- registry

MODEL_REGISTRY: dict[str, Callable[..., ModelSpec]] = {}


def check_h0(model: ModelSpec, radii=(10.0, 100.0, 1e3, 1e4), n_dir: int = 64, growth: float = 4.0) -> bool:
    """Probe sublinear growth: ``|b(x)|/(1+|x|)`` must not keep growing with ``|x|``."""
    rng = np.random.default_rng(12345)
    u = rng.standard_normal((n_dir, model.d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    ratios = []
    for r in radii:
        x = r * u
        ratios.append(float(np.max(np.linalg.norm(model.b(x), axis=-1)) / (1.0 + r)))
    return ratios[-1] <= growth * max(ratios[0], 1e-300)


def register_model(name: str, factory: Callable[..., ModelSpec]) -> None:
    model = factory()
    if not check_h0(model):
        raise ValueError(f"model {name!r} rejected: drift grows superlinearly")
    MODEL_REGISTRY[name] = factory


def get_model(name: str, **kwargs) -> ModelSpec:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**kwargs)


register_model("additive_baseline", additive_baseline)
register_model("scalar_sin", scalar_sin)
register_model("planar_rotation", planar_rotation)


# ------------------------------------------------------------ integration

def _check_finite(x, i, model):
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite state in model {model.name}", i, x)


def integrate(model: ModelSpec, x0, fbm: FbmPath) -> Trajectory:
    """Euler scheme ``X_{i+1} = X_i + b(X_i) dt + sigma(X_i) dB_i``."""
    x = np.array(x0, dtype=float).reshape(model.d)
    if fbm.d != model.d:
        raise ValueError(f"fBm dimension {fbm.d} != model dimension {model.d}")
    dt = fbm.grid.dt
    dB = fbm.increments
    out = np.empty((fbm.grid.n + 1, model.d))
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(fbm.grid.n):
            x = x + model.b(x) * dt + model.sigma(x) @ dB[:, i]
            _check_finite(x, i, model)
            out[i + 1] = x
    return Trajectory(fbm.grid, out)


def integrate_lamperti(model: ModelSpec, x0, fbm: FbmPath) -> Trajectory:
    """Euler in ``y = h(x)``: ``y_{i+1} = y_i + F(y_i) dt + dB_i`` (``F = grad_h b`` at ``h^{-1}``)."""
    if fbm.d != model.d:
        raise ValueError(f"fBm dimension {fbm.d} != model dimension {model.d}")
    y = model.h(np.array(x0, dtype=float).reshape(model.d))
    dt = fbm.grid.dt
    out = np.empty((fbm.grid.n + 1, model.d))
    out[0] = np.array(x0, dtype=float).reshape(model.d)
    x = out[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(fbm.grid.n):
            x = model.inverse_h(y) if model.h_inv is not None else model.inverse_h(y, x)
            y = y + np.einsum("ij,j->i", model.grad_h(x), model.b(x)) * dt + fbm.increments[:, i]
            _check_finite(y, i, model)
            x = model.inverse_h(y) if model.h_inv is not None else model.inverse_h(y, x)
            out[i + 1] = x
    return Trajectory(fbm.grid, out)


def integrate_batch(model: ModelSpec, x0: np.ndarray, dB: np.ndarray, dt: float) -> np.ndarray:
    """Vectorized Euler over paths: ``x0`` (N, d), ``dB`` (N, d, n) -> states (N, n+1, d)."""
    x = np.array(x0, dtype=float)
    N, d = x.shape
    n = dB.shape[2]
    out = np.empty((N, n + 1, d))
    out[:, 0] = x
    for i in range(n):
        x = x + model.b(x) * dt + np.einsum("nij,nj->ni", model.sigma(x), dB[:, :, i])
        _check_finite(x, i, model)
        out[:, i + 1] = x
    return out


# ------------------------------------------------------------ validators

def probe_points(d: int, radius: float, n_probe: int, seed: int = 0) -> np.ndarray:
    """Deterministic low-discrepancy points in the closed ball of ``radius`` (origin included)."""
    if n_probe < 1:
        raise ValueError("probe count must be >= 1")
    m = max(1, int(math.ceil(math.log2(max(n_probe, 2)))))
    s = qmc.Sobol(d + 1, scramble=True, seed=seed).random_base2(m)[:n_probe]
    z = qmc.Sobol(d, scramble=True, seed=seed + 1).random_base2(m)[:n_probe]
    # direction from inverse-normal of Sobol points, radius from the extra coordinate
    from scipy.special import ndtri
    g = ndtri(np.clip(z, 1e-12, 1 - 1e-12))
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    r = radius * s[:, :1] ** (1.0 / d)
    pts = g / norm * r
    pts[0] = 0.0
    return pts


@dataclass
class H1Report:
    passed: bool
    max_violation: float
    argmax: np.ndarray
    n_probe: int
    radius: float


def check_h1(model: ModelSpec, radius: float = 50.0, n_probe: int = 4096, beta0: float | None = None,
             kappa0: float | None = None, tol: float = 1e-12) -> H1Report:
    """Evaluate ``(grad V | b) - (beta0 - kappa0 V)`` at probe points; pass iff all <= tol*(1+V)."""
    beta0 = model.beta0 if beta0 is None else beta0
    kappa0 = model.kappa0 if kappa0 is None else kappa0
    x = probe_points(model.d, radius, n_probe)
    V = model.V(x)
    lhs = np.sum(model.grad_V(x) * model.b(x), axis=-1)
    viol = lhs - (beta0 - kappa0 * V)
    scaled = viol / (1.0 + np.abs(V))
    k = int(np.argmax(scaled))
    return H1Report(bool(np.all(scaled <= tol)), float(viol[k]), x[k], n_probe, radius)


@dataclass
class H2Report:
    passed: bool
    max_cond: float
    max_jacobian_error: float
    max_identity_error: float
    max_integrability_error: float
    worst_point: np.ndarray
    n_probe: int
    radius: float
    failures: list = field(default_factory=list)


def _fd_jacobian(f, x, eps):
    d = x.shape[-1]
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        cols.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)  # (..., out, k)


def check_h2(model: ModelSpec, radius: float = 10.0, n_probe: int = 1024, tol_fd: float = 1e-6,
             eps: float = 1e-5) -> H2Report:
    """Invertibility of sigma, ``grad_h = sigma^{-1}`` and the integrability of ``sigma^{-1}``."""
    x = probe_points(model.d, radius, n_probe)
    S = model.sigma(x)
    cond = np.linalg.cond(S)
    finite = np.all(np.isfinite(cond)) and np.all(cond < 1e12)
    Sinv = np.linalg.inv(S)
    ident = np.max(np.abs(np.einsum("nij,njk->nik", model.grad_h(x), S) - np.eye(model.d)), axis=(1, 2))
    J = _fd_jacobian(model.h, x, eps)
    jac_err = np.max(np.abs(J - Sinv), axis=(1, 2)) / (1.0 + np.max(np.abs(Sinv), axis=(1, 2)))

    def sinv(z):
        return np.linalg.inv(model.sigma(z))

    D = np.stack([(sinv(x + eps * e) - sinv(x - eps * e)) / (2 * eps) for e in np.eye(model.d)], axis=-1)
    # D[n, i, j, k] = d_k (sigma^{-1})_{ij}; need d_k A_ij = d_j A_ik
    integ = np.max(np.abs(D - np.swapaxes(D, 2, 3)), axis=(1, 2, 3))
    failures = []
    if not finite:
        failures.append("sigma not invertible at some probe point")
    if np.max(ident) > TOL_H2:
        failures.append("grad_h * sigma != Identity")
    if np.max(jac_err) > tol_fd:
        failures.append("finite-difference Jacobian of h does not match sigma^{-1}")
    if np.max(integ) > tol_fd:
        failures.append("sigma^{-1} fails the integrability condition")
    k = int(np.argmax(integ + jac_err + ident))
    log.debug("check_h2 %s: max condition number %.3e", model.name, float(np.max(cond)))
    return H2Report(not failures, float(np.max(cond)), float(np.max(jac_err)), float(np.max(ident)),
                    float(np.max(integ)), x[k], n_probe, radius, failures)


def psi(model: ModelSpec, x, theta: float) -> np.ndarray:
    """``Psi = V^{(2 theta - 1)/4}``."""
    return model.V(np.asarray(x, dtype=float)) ** ((2.0 * theta - 1.0) / 4.0)


@dataclass
class ContractionReport:
    rho_hat: float
    C_hat: float
    frac_active: float
    passed: bool
    n_samples: int
    message: str = ""


def contraction_estimate(model: ModelSpec, params: KernelParams, n_paths: int, rng: np.random.Generator,
                         x_grid=None, dt: float = 1.0 / 64, n_rho: int = 4000) -> ContractionReport:
    """Fit ``Psi(X_1) <= rho Psi(x) + C (1 + |B|_theta^{0,1})`` on Monte Carlo samples.

    For every ``rho`` the smallest admissible ``C(rho)`` is a sample maximum.  The
    reported pair minimizes the fixed-point level ``C/(1-rho)``; ties go to the
    smallest ``rho``.
    """
    theta = params.theta
    if x_grid is None:
        x_grid = probe_points(model.d, 20.0, 16)
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    n = int(round(1.0 / dt))
    grid = UniformGrid(0.0, 1.0 / n, n)
    p0, p1, bn = [], [], []
    for x in x_grid:
        dB = np.stack([sample_fgn(params, grid, model.d, rng).increments for _ in range(n_paths)])
        X = integrate_batch(model, np.repeat(x[None, :], n_paths, 0), dB, grid.dt)
        vals = np.concatenate([np.zeros((n_paths, model.d, 1)), np.cumsum(dB, axis=2)], axis=2)
        bn.extend(holder_norm(v, grid, theta, 0.0, 1.0) for v in vals)
        p0.extend([float(psi(model, x, theta))] * n_paths)
        p1.extend(psi(model, X[:, -1], theta))
    p0, p1, bn = map(np.asarray, (p0, p1, bn))
    rhos = (np.arange(n_rho) + 0.5) / n_rho
    denom = 1.0 + bn
    C = np.maximum(0.0, np.max((p1[None, :] - rhos[:, None] * p0[None, :]) / denom[None, :], axis=1))
    J = C / (1.0 - rhos)
    best = J.min()
    k = int(np.flatnonzero(J <= best * (1.0 + 1e-6) + 1e-300)[0])
    rho_hat, C_hat = float(rhos[k]), float(C[k])
    slack = rho_hat * p0 + C_hat * denom - p1
    active = float(np.mean(slack <= 1e-9 * (1.0 + np.abs(p1))))
    ok = rho_hat < 1.0 and np.all(slack >= -1e-12)
    msg = "" if ok else "no rho < 1 fits the samples"
    return ContractionReport(rho_hat, C_hat, active, bool(ok), p0.size, msg)


@dataclass
class PathBoundDiagnostic:
    lhs: float
    rhs: float
    violated: bool


def path_bound_check(model: ModelSpec, traj: Trajectory, fbm: FbmPath, theta: float, C_diag: float,
                     beta_tilde: float = 1.0) -> PathBoundDiagnostic:
    """``sup F(X) <= C_diag (F(X_0) + beta_tilde (1 + |B|_theta)^{4/(2 theta-1)})`` with ``F = 1+|x|^2``."""
    F = 1.0 + np.sum(traj.states ** 2, axis=1)
    vals = fbm.values()
    bnorm = holder_norm(vals, fbm.grid, theta, fbm.grid.t0, fbm.grid.t_end)
    lhs = float(F.max())
    with np.errstate(over="ignore"):
        rhs = float(C_diag * (F[0] + beta_tilde * (1.0 + bnorm) ** (4.0 / (2.0 * theta - 1.0))))
    violated = not lhs <= rhs
    if violated:
        log.warning("path bound violated: sup F = %.4g > %.4g", lhs, rhs)
    return PathBoundDiagnostic(lhs, rhs, violated)


def fit_path_bound_constant(model: ModelSpec, params: KernelParams, x0s, n_paths: int, rng: np.random.Generator,
                            dt: float = 1.0 / 64, beta_tilde: float = 1.0, safety: float = 1.2) -> float:
    """Pilot calibration of ``C_diag``: safety factor times the largest observed ratio (at least 1)."""
    theta = params.theta
    n = int(round(1.0 / dt))
    grid = UniformGrid(0.0, 1.0 / n, n)
    worst = 1.0
    for x0 in np.atleast_2d(x0s):
        for _ in range(n_paths):
            fbm = sample_fgn(params, grid, model.d, rng)
            tr = integrate(model, x0, fbm)
            diag = path_bound_check(model, tr, fbm, theta, 1.0, beta_tilde)
            worst = max(worst, diag.lhs / diag.rhs)
    return safety * worst
