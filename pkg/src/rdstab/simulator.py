"""Closed-loop simulation of the semilinear plant with the modal controller.

Method of lines on a uniform grid: the linear diffusion-reaction part is
advanced by Crank-Nicolson, the sector nonlinearity and the control forcing
by an explicit second-order predictor-corrector (Heun), and the observer by
the trapezoidal rule using the boundary measurement read from the grid at
every step.  The boundary-actuated case imposes the right boundary
condition through the stencil with the input evaluated at the half-step.

A Heun-style difference between predictor and corrector serves as the local
error estimate of the explicit part; the step is halved (down to a floor)
when it exceeds the tolerance.
"""

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from . import spectral, synthesis


class StiffnessError(RuntimeError):
    """Explicit part rejected the smallest admissible step."""


@dataclass(frozen=True)
class NonlinearitySpec:
    """Reaction nonlinearity f(t,x,z) = qf(x) z + g(z) with |g(z)| <= kf |z|."""

    qf: Callable
    kind: str = "sine"
    kf: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sine", "saturation", "tanh", "zero"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.kf < 0:
            raise ValueError("sector radius must be nonnegative")

    def g(self, z):
        if self.kind == "zero" or self.kf == 0.0:
            return np.zeros_like(z)
        if self.kind == "sine":
            return self.kf * np.sin(z)
        if self.kind == "tanh":
            return self.kf * np.tanh(z)
        return self.kf * np.clip(z, -1.0, 1.0)


@dataclass(frozen=True)
class ControllerRealization:
    """Finite-dimensional output-feedback controller in modal coordinates."""

    case: str
    n_ctrl: int
    n_obs: int
    lambdas: np.ndarray
    qc: float
    phi0: np.ndarray
    b: np.ndarray
    k: np.ndarray
    l: np.ndarray
    beta: Optional[np.ndarray] = None

    @property
    def k_ext(self):
        out = np.zeros(self.n_obs)
        out[: self.n_ctrl] = self.k
        return out

    @property
    def l_ext(self):
        out = np.zeros(self.n_obs)
        out[: self.n_ctrl] = self.l
        return out

    def system_matrix(self):
        """Drift of the observer driven by the measurement y."""
        diag = np.diag(-self.lambdas[: self.n_obs] + self.qc)
        kx, lx = self.k_ext, self.l_ext
        c_row = self.phi0[: self.n_obs]
        if self.case == synthesis.DISTRIBUTED:
            return diag + np.outer(self.b, kx) - np.outer(lx, c_row)
        cb = float(np.dot(c_row, self.b))
        return (
            diag
            + np.outer(self.beta, kx)
            - np.outer(lx, c_row)
            - cb * np.outer(lx, kx)
        )


def controller_from_design(plant, gains):
    return ControllerRealization(
        case=plant.case,
        n_ctrl=plant.n_ctrl,
        n_obs=plant.n_obs,
        lambdas=plant.lambdas[: plant.n_obs].copy(),
        qc=plant.qc,
        phi0=plant.phi0.copy(),
        b=plant.b.copy(),
        k=gains.k.copy(),
        l=gains.l.copy(),
        beta=None if plant.beta is None else plant.beta.copy(),
    )


@dataclass
class SimConfig:
    """Grid, stepping and initial data of one closed-loop run."""

    coeffs: spectral.PlantCoefficients
    dec: spectral.Decomposition
    controller: ControllerRealization
    z0: Callable
    shape_b: Optional[Callable] = None
    m_nodes: int = 401
    dt: float = 2e-4
    t_final: float = 10.0
    zhat0: Optional[np.ndarray] = None
    n_proj: int = 40
    record_dt: Optional[float] = None
    step_tol: float = 1e-3
    dt_floor_halvings: int = 6


@dataclass
class Trajectory:
    """Recorded closed-loop signals; modal holds the first n_proj
    projections of the state, modal_w the shifted coefficients of the
    boundary case used by the Lyapunov evaluation."""

    case: str
    t: np.ndarray
    l2_norm: np.ndarray
    h1_norm: np.ndarray
    y: np.ndarray
    u: np.ndarray
    zhat: np.ndarray
    modal: np.ndarray
    tail_lambdas: np.ndarray
    controller: ControllerRealization
    v: Optional[np.ndarray] = None
    modal_w: Optional[np.ndarray] = None
    dt_effective: float = 0.0


class _Linear:
    """Tridiagonal form of z -> (p z')' - q0 z with the case's boundary
    rows, plus the boundary forcing column for the actuated case."""

    def __init__(self, coeffs, grid, actuated):
        x, h, m = grid.nodes, grid.h, grid.m
        p = np.broadcast_to(np.asarray(coeffs.p((x[:-1] + x[1:]) / 2), float), (m - 1,))
        q0 = np.broadcast_to(np.asarray(coeffs.q0(x), float), (m,))
        th1, th2 = coeffs.theta1, coeffs.theta2
        dirichlet_right = th2 == 0.0
        n = m - 1 if dirichlet_right else m

        lo = np.zeros(n)
        di = np.zeros(n)
        up = np.zeros(n)
        # left half-cell flux balance (theta1 > 0 always)
        cot1 = np.cos(th1) / np.sin(th1)
        di[0] = -(p[0] / h + float(coeffs.p(0.0)) * cot1) / (h / 2) - q0[0]
        up[0] = p[0] / h / (h / 2)
        i = np.arange(1, n - 1)
        lo[i] = p[i - 1] / h**2
        up[i] = p[i] / h**2
        di[i] = -(p[i - 1] + p[i]) / h**2 - q0[i]
        self.force = np.zeros(n)
        if dirichlet_right:
            lo[n - 1] = p[m - 3] / h**2
            di[n - 1] = -(p[m - 3] + p[m - 2]) / h**2 - q0[m - 2]
            if actuated:
                self.force[n - 1] = p[m - 2] / h**2
        else:
            cot2 = np.cos(th2) / np.sin(th2)
            lo[n - 1] = p[m - 2] / h / (h / 2)
            di[n - 1] = -(p[m - 2] / h + float(coeffs.p(1.0)) * cot2) / (h / 2) - q0[
                m - 1
            ]
            if actuated:
                self.force[n - 1] = float(coeffs.p(1.0)) / np.sin(th2) / (h / 2)
        self.lo, self.di, self.up = lo, di, up
        self.n_active = n
        self.dirichlet_right = dirichlet_right
        self.m = m

    def apply(self, z):
        out = self.di * z
        out[:-1] += self.up[:-1] * z[1:]
        out[1:] += self.lo[1:] * z[:-1]
        return out

    def cn_bands(self, dt):
        ab = np.zeros((3, self.n_active))
        ab[0, 1:] = -dt / 2 * self.up[:-1]
        ab[1] = 1.0 - dt / 2 * self.di
        ab[2, :-1] = -dt / 2 * self.lo[1:]
        return ab

    def pad(self, z_active, boundary_value):
        if not self.dirichlet_right:
            return z_active
        return np.concatenate([z_active, [boundary_value]])


class _Recorder:
    def __init__(self, config, basis, boundary):
        self.basis = basis
        self.n_proj = config.n_proj
        self.boundary = boundary
        if boundary:
            x = basis.grid.nodes
            denom = np.cos(config.coeffs.theta2) + 2 * np.sin(config.coeffs.theta2)
            self.b_proj = spectral.project(-(x**2) / denom, basis, config.n_proj)
        self.rows = {
            key: []
            for key in ("t", "l2", "h1", "y", "u", "v", "zhat", "modal", "modal_w")
        }

    def record(self, t, z_full, zhat, u, v):
        c = spectral.project(z_full, self.basis, self.n_proj)
        r = self.rows
        r["t"].append(t)
        r["l2"].append(np.sqrt(self.basis.grid.norm_sq(z_full)))
        r["h1"].append(np.sqrt(float(np.dot(self.basis.lambdas[: self.n_proj], c**2))))
        r["y"].append(z_full[0])
        r["u"].append(u)
        r["v"].append(v)
        r["zhat"].append(zhat.copy())
        r["modal"].append(c)
        if self.boundary:
            r["modal_w"].append(c + self.b_proj * u)

    def finish(self, case, controller, dt):
        r = self.rows
        return Trajectory(
            case=case,
            t=np.array(r["t"]),
            l2_norm=np.array(r["l2"]),
            h1_norm=np.array(r["h1"]),
            y=np.array(r["y"]),
            u=np.array(r["u"]),
            zhat=np.array(r["zhat"]),
            modal=np.array(r["modal"]),
            tail_lambdas=self.basis.lambdas[: self.n_proj].copy(),
            controller=controller,
            v=np.array(r["v"]) if case == synthesis.BOUNDARY else None,
            modal_w=np.array(r["modal_w"]) if self.boundary else None,
            dt_effective=dt,
        )


def _observer_step(ctrl_mat, l_ext, zhat, dt, y0, y1):
    lhs = np.eye(len(zhat)) - dt / 2 * ctrl_mat
    rhs = zhat + dt / 2 * (ctrl_mat @ zhat + l_ext * (y0 + y1))
    return np.linalg.solve(lhs, rhs)


def _prepare(config, boundary):
    grid = spectral.Grid.uniform(config.m_nodes)
    basis = spectral.eigendecompose(config.coeffs, config.dec, grid, config.n_proj)
    lin = _Linear(config.coeffs, grid, actuated=boundary)
    z_full = np.asarray(
        config.z0(grid.nodes) if callable(config.z0) else config.z0, dtype=float
    ).copy()
    if z_full.shape != (config.m_nodes,):
        raise ValueError("initial condition does not match the grid")
    zhat = (
        np.zeros(config.controller.n_obs)
        if config.zhat0 is None
        else np.asarray(config.zhat0, dtype=float).copy()
    )
    if zhat.shape != (config.controller.n_obs,):
        raise ValueError("observer initial state has the wrong length")
    return grid, basis, lin, z_full, zhat


def _check_left_bc(config, grid, z_full):
    h = grid.h
    dz0 = (-3 * z_full[0] + 4 * z_full[1] - z_full[2]) / (2 * h)
    res = np.cos(config.coeffs.theta1) * z_full[0] - np.sin(config.coeffs.theta1) * dz0
    scale = 1.0 + float(np.max(np.abs(z_full)))
    if abs(res) > 1e-2 * scale:
        warnings.warn(
            f"initial condition violates the left boundary condition "
            f"(residual {res:.2e})",
            stacklevel=3,
        )


def simulate_distributed(config, nonlin):
    """Closed-loop run with in-domain actuation; returns the Trajectory."""
    if config.controller.case != synthesis.DISTRIBUTED:
        raise ValueError("controller was built for the boundary case")
    if config.shape_b is None:
        raise ValueError("distributed simulation needs the input shape b")
    grid, basis, lin, z_full, zhat = _prepare(config, boundary=False)
    _check_left_bc(config, grid, z_full)
    rec = _Recorder(config, basis, boundary=False)

    ctrl = config.controller
    ctrl_mat = ctrl.system_matrix()
    k_ext, l_ext = ctrl.k_ext, ctrl.l_ext
    qf_x = np.broadcast_to(np.asarray(nonlin.qf(grid.nodes), float), grid.nodes.shape)
    b_x = np.asarray(config.shape_b(grid.nodes), dtype=float)
    na = lin.n_active
    explicit = lambda z, u: (qf_x * z + nonlin.g(z) + b_x * u)[:na]

    dt = config.dt
    record_dt = config.record_dt or config.t_final / 1000.0
    dt_min = config.dt / 2**config.dt_floor_halvings
    ab = lin.cn_bands(dt)
    z = z_full[:na]
    t = 0.0
    u = float(np.dot(k_ext, zhat))
    rec.record(0.0, lin.pad(z, 0.0), zhat, u, 0.0)
    next_rec = record_dt
    while t < config.t_final - 1e-12:
        dt_step = min(dt, config.t_final - t)
        if dt_step < dt:
            ab = lin.cn_bands(dt_step)
        half = z + dt_step / 2 * lin.apply(z)
        n0 = explicit(lin.pad(z, 0.0), u)
        z_pred = solve_banded((1, 1), ab, half + dt_step * n0)
        y0 = z[0]
        zhat_pred = _observer_step(ctrl_mat, l_ext, zhat, dt_step, y0, z_pred[0])
        u_pred = float(np.dot(k_ext, zhat_pred))
        n1 = explicit(lin.pad(z_pred, 0.0), u_pred)
        z_new = solve_banded((1, 1), ab, half + dt_step / 2 * (n0 + n1))
        err = np.max(np.abs(z_new - z_pred)) / 3.0
        scale = config.step_tol * (1.0 + float(np.max(np.abs(z_new))))
        if err > scale and dt_step >= dt:
            if dt / 2 < dt_min:
                raise StiffnessError(
                    f"explicit error {err:.2e} at t={t:.4f} exceeds tolerance at "
                    f"the minimal step {dt:.2e}; the nonlinearity is too stiff"
                )
            dt /= 2
            ab = lin.cn_bands(dt)
            continue
        if not np.all(np.isfinite(z_new)):
            raise RuntimeError(f"state became non-finite at t = {t + dt_step:.4f}")
        zhat = _observer_step(ctrl_mat, l_ext, zhat, dt_step, y0, z_new[0])
        z = z_new
        t += dt_step
        u = float(np.dot(k_ext, zhat))
        if t >= next_rec - 1e-12 or t >= config.t_final - 1e-12:
            rec.record(t, lin.pad(z, 0.0), zhat, u, 0.0)
            next_rec += record_dt
    return rec.finish(synthesis.DISTRIBUTED, ctrl, dt)


def simulate_boundary(config, nonlin):
    """Closed-loop run with right-boundary actuation; the input value is the
    feedback u = k z_hat and enters the boundary stencil at the half-step."""
    if config.controller.case != synthesis.BOUNDARY:
        raise ValueError("controller was built for the distributed case")
    grid, basis, lin, z_full, zhat = _prepare(config, boundary=True)
    _check_left_bc(config, grid, z_full)
    ctrl = config.controller
    ctrl_mat = ctrl.system_matrix()
    k_ext, l_ext = ctrl.k_ext, ctrl.l_ext
    u0 = float(np.dot(k_ext, zhat))
    h = grid.h
    dz1 = (3 * z_full[-1] - 4 * z_full[-2] + z_full[-3]) / (2 * h)
    compat = (
        np.cos(config.coeffs.theta2) * z_full[-1]
        + np.sin(config.coeffs.theta2) * dz1
        - u0
    )
    if abs(compat) > 1e-2 * (1.0 + float(np.max(np.abs(z_full)))):
        warnings.warn(
            f"initial condition incompatible with the actuated boundary "
            f"condition (residual {compat:.2e})",
            stacklevel=2,
        )
    rec = _Recorder(config, basis, boundary=True)

    qf_x = np.broadcast_to(np.asarray(nonlin.qf(grid.nodes), float), grid.nodes.shape)
    na = lin.n_active
    explicit = lambda z: (qf_x * z + nonlin.g(z))[:na]

    def rate(zh, y):
        return float(np.dot(k_ext, ctrl_mat @ zh + l_ext * y))

    dt = config.dt
    record_dt = config.record_dt or config.t_final / 1000.0
    dt_min = config.dt / 2**config.dt_floor_halvings
    ab = lin.cn_bands(dt)
    z = z_full[:na]
    t = 0.0
    u = u0
    rec.record(0.0, lin.pad(z, u), zhat, u, rate(zhat, z_full[0]))
    next_rec = record_dt
    while t < config.t_final - 1e-12:
        dt_step = min(dt, config.t_final - t)
        if dt_step < dt:
            ab = lin.cn_bands(dt_step)
        half = z + dt_step / 2 * lin.apply(z)
        y0 = z[0]
        n0 = explicit(lin.pad(z, u))
        z_pred = solve_banded(
            (1, 1), ab, half + dt_step * (n0 + lin.force * u)
        )
        zhat_pred = _observer_step(ctrl_mat, l_ext, zhat, dt_step, y0, z_pred[0])
        u_pred = float(np.dot(k_ext, zhat_pred))
        u_half = 0.5 * (u + u_pred)
        n1 = explicit(lin.pad(z_pred, u_pred))
        z_new = solve_banded(
            (1, 1), ab, half + dt_step / 2 * (n0 + n1) + dt_step * lin.force * u_half
        )
        err = np.max(np.abs(z_new - z_pred)) / 3.0
        scale = config.step_tol * (1.0 + float(np.max(np.abs(z_new))))
        if err > scale and dt_step >= dt:
            if dt / 2 < dt_min:
                raise StiffnessError(
                    f"explicit error {err:.2e} at t={t:.4f} exceeds tolerance at "
                    f"the minimal step {dt:.2e}"
                )
            dt /= 2
            ab = lin.cn_bands(dt)
            continue
        if not np.all(np.isfinite(z_new)):
            raise RuntimeError(f"state became non-finite at t = {t + dt_step:.4f}")
        zhat = _observer_step(ctrl_mat, l_ext, zhat, dt_step, y0, z_new[0])
        z = z_new
        t += dt_step
        u = float(np.dot(k_ext, zhat))
        if t >= next_rec - 1e-12 or t >= config.t_final - 1e-12:
            rec.record(t, lin.pad(z, u), zhat, u, rate(zhat, z[0]))
            next_rec += record_dt
    return rec.finish(synthesis.BOUNDARY, ctrl, dt)


@dataclass
class LyapunovVerdict:
    passed: bool
    worst_excess: float
    tol: float
    v0: float


def lyapunov_trace(traj, cert, basis=None, tol=0.05):
    """Certificate Lyapunov value along a trajectory and its decay verdict.

    The truncated-analysis state is rebuilt from the observer and the
    projected trajectory (errors scaled by sqrt(lambda_n); the boundary case
    also divides the upper observer block by lambda_n and sums the shifted
    coefficients in the tail).  The verdict checks
    V(t) <= V(0) exp(-2 delta t) (1 + tol).
    """
    ctrl = traj.controller
    n0, n = ctrl.n_ctrl, ctrl.n_obs
    lams = basis.lambdas if basis is not None else traj.tail_lambdas
    if cert.p.shape[0] != 2 * n:
        raise ValueError(
            f"certificate is for 2N = {cert.p.shape[0]}, controller has N = {n}"
        )
    if traj.modal.shape[1] <= n:
        raise ValueError("trajectory does not carry enough projected modes")
    zn = traj.modal[:, :n]
    err = zn - traj.zhat
    lam1 = lams[n0:n]
    if traj.case == synthesis.BOUNDARY:
        upper = traj.zhat[:, n0:n] / lam1
        tail_coeffs = traj.modal_w[:, n:]
    else:
        upper = traj.zhat[:, n0:n]
        tail_coeffs = traj.modal[:, n:]
    x = np.hstack(
        [
            traj.zhat[:, :n0],
            err[:, :n0],
            upper,
            err[:, n0:n] * np.sqrt(lam1),
        ]
    )
    v = np.einsum("ti,ij,tj->t", x, cert.p, x)
    v = v + cert.gamma * (tail_coeffs**2 @ lams[n : traj.modal.shape[1]])
    bound = v[0] * np.exp(-2 * cert.delta * traj.t) * (1.0 + tol)
    if v[0] <= 0.0:
        passed = bool(np.all(v <= 1e-12))
        return v, LyapunovVerdict(passed, 0.0 if passed else float(np.max(v)), tol, v[0])
    excess = (v - bound) / (v[0] * np.exp(-2 * cert.delta * traj.t))
    worst = float(np.max(excess))
    return v, LyapunovVerdict(bool(np.all(v <= bound + 1e-12)), worst, tol, float(v[0]))


def decay_fit(t, series, window):
    """Least-squares exponential rate over the trailing time window.

    Returns the positive decay rate of the fitted exp(-rate t); requires the
    series to be strictly positive on the window.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(series, dtype=float)
    sel = t >= t[-1] - window
    if np.count_nonzero(sel) < 2:
        raise ValueError("window contains fewer than two samples")
    if np.any(s[sel] <= 0):
        raise ValueError("series must be positive on the fit window")
    slope = np.polyfit(t[sel], np.log(s[sel]), 1)[0]
    return -float(slope)
