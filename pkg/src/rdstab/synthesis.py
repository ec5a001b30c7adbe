"""Modal plant construction, gain placement and closed-loop assembly.

The plant is projected onto the operator eigenbasis, the first n_ctrl modes
get an observer-based feedback (single input, single boundary measurement),
and the truncated closed-loop matrices used by the stability certification
are assembled for the two actuation cases:

* distributed: the input acts through an L2 shape function b(x);
* boundary: the input enters the right Robin boundary condition and is
  pulled into the domain by a change of variable, which yields modal input
  coefficients beta_n and a dynamic extension driven by the input rate.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import spectral

DISTRIBUTED = "distributed"
BOUNDARY = "boundary"


@dataclass(frozen=True)
class ModalPlant:
    """Projected plant data at orders (n_ctrl, n_obs).

    lambdas holds lambda_1..lambda_{n_obs+1}; the input coefficients are
    b (both cases) plus a and beta for the boundary case, where
    beta_n = a_n + (-lambda_n + qc) b_n.  res_b_sq / res_a_sq are the
    squared L2 residuals of the input shapes beyond mode n_obs and mphi the
    measurement tail sum, all of which enter the certification inequalities.
    """

    case: str
    n_ctrl: int
    n_obs: int
    lambdas: np.ndarray
    qc: float
    phi0: np.ndarray
    b: np.ndarray
    res_b_sq: float
    mphi: float
    a: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    res_a_sq: Optional[float] = None

    @property
    def a0_diag(self):
        return -self.lambdas[: self.n_ctrl] + self.qc

    @property
    def a1_diag(self):
        return -self.lambdas[self.n_ctrl : self.n_obs] + self.qc

    @property
    def input0(self):
        """Input coefficients of the controlled modes (b_n or beta_n)."""
        if self.case == BOUNDARY:
            return self.beta[: self.n_ctrl]
        return self.b[: self.n_ctrl]


@dataclass(frozen=True)
class GainSet:
    """Feedback row k, observer column l, and the decay rate they certify."""

    k: np.ndarray
    l: np.ndarray
    delta: float
    target_poles_state: np.ndarray
    target_poles_observer: np.ndarray


@dataclass(frozen=True)
class ClosedLoopMatrices:
    """Truncated closed-loop data; block order (z_hat0, err0, z_hat1, err1).

    f is the 2N x 2N state matrix, g the 2N x N residue input map, l_script
    the measurement-tail input column, k_tilde the feedback row on the
    extended state.  omega bounds the first N squared modal amplitudes by a
    quadratic form of the state; lambda_tilde holds the diagonal weights of
    the residue penalty.  e_row (boundary case) expresses the input rate as
    a linear function of the full (3N+1)-dimensional analysis vector.
    """

    case: str
    n_ctrl: int
    n_obs: int
    f: np.ndarray
    g: np.ndarray
    l_script: np.ndarray
    k_tilde: np.ndarray
    omega: np.ndarray
    lambda_tilde: np.ndarray
    e_row: Optional[np.ndarray] = None


def build_modal_plant(
    basis, coeffs, dec, case, n_ctrl, n_obs, delta, shape_b=None, beta_check_tol=1e-3
):
    """Project the plant onto the first n_obs modes.

    For the boundary case the lifting shapes are computed on the grid,

        b(x) = -x^2 / (cos(theta2) + 2 sin(theta2)),
        a(x) = (2 p + 2 x p' - x^2 (q - qc)) / (cos(theta2) + 2 sin(theta2)),

    projected, and the resulting beta_n cross-checked against the boundary
    trace formula p(1) (-cos(theta2) phi_n'(1) + sin(theta2) phi_n(1)).
    """
    if case not in (DISTRIBUTED, BOUNDARY):
        raise ValueError(f"unknown actuation case {case!r}")
    if n_ctrl < 1 or n_obs < n_ctrl + 1:
        raise ValueError("orders must satisfy n_obs >= n_ctrl + 1 >= 2")
    if basis.n_max < n_obs + 1:
        raise ValueError(
            f"basis holds {basis.n_max} modes, need {n_obs + 1} for the tail data"
        )
    if delta <= 0:
        raise ValueError("decay rate delta must be positive")
    gap = -basis.lambdas[n_ctrl] + dec.qc
    if gap >= -delta:
        raise ValueError(
            f"mode gap violated: -lambda_{n_ctrl + 1} + qc = {gap:.4f} "
            f">= -delta = {-delta}; increase n_ctrl"
        )

    x = basis.grid.nodes
    mphi = spectral.boundary_tail_sum(basis, n_obs)
    lambdas = basis.lambdas[: n_obs + 1].copy()
    phi0 = basis.phi_at_0[:n_obs].copy()

    if case == DISTRIBUTED:
        if shape_b is None:
            raise ValueError("distributed case needs the input shape function b")
        bx = shape_b(x)
        b = spectral.project(bx, basis, n_obs)
        scale = max(1.0, float(np.max(np.abs(b))))
        if np.any(np.abs(b[:n_ctrl]) < 1e-10 * scale):
            raise ValueError(
                "input shape has a vanishing projection on a controlled mode"
            )
        return ModalPlant(
            case=case,
            n_ctrl=n_ctrl,
            n_obs=n_obs,
            lambdas=lambdas,
            qc=dec.qc,
            phi0=phi0,
            b=b,
            res_b_sq=spectral.residual_norm_sq(bx, basis, n_obs),
            mphi=mphi,
        )

    theta2 = basis.theta2
    denom = np.cos(theta2) + 2 * np.sin(theta2)
    assert denom > 0  # cos and 2 sin are nonnegative on [0, pi/2], never both 0
    p_x = np.broadcast_to(np.asarray(coeffs.p(x), dtype=float), x.shape)
    q_tilde = np.broadcast_to(np.asarray(dec.q(x), dtype=float), x.shape) - dec.qc
    dp_x = np.gradient(p_x, basis.grid.h, edge_order=2)
    ax = (2 * p_x + 2 * x * dp_x - x**2 * q_tilde) / denom
    bx = -(x**2) / denom
    a = spectral.project(ax, basis, n_obs)
    b = spectral.project(bx, basis, n_obs)
    beta = a + (-lambdas[:n_obs] + dec.qc) * b
    beta_trace = float(p_x[-1]) * (
        -np.cos(theta2) * basis.dphi_at_1[:n_obs]
        + np.sin(theta2) * basis.phi_at_1[:n_obs]
    )
    rel = np.abs(beta - beta_trace) / np.maximum(np.abs(beta_trace), 1e-6)
    if np.max(rel) > beta_check_tol:
        raise RuntimeError(
            "boundary input coefficients disagree with the trace formula "
            f"(worst relative gap {np.max(rel):.2e}); refine the grid"
        )
    scale = max(1.0, float(np.max(np.abs(beta))))
    if np.any(np.abs(beta[:n_ctrl]) < 1e-10 * scale):
        raise ValueError("vanishing boundary input coefficient on a controlled mode")
    return ModalPlant(
        case=case,
        n_ctrl=n_ctrl,
        n_obs=n_obs,
        lambdas=lambdas,
        qc=dec.qc,
        phi0=phi0,
        b=b,
        res_b_sq=spectral.residual_norm_sq(bx, basis, n_obs),
        mphi=mphi,
        a=a,
        beta=beta,
        res_a_sq=spectral.residual_norm_sq(ax, basis, n_obs),
    )


def _poly_from_roots(value, roots):
    out = 1.0 + 0.0j
    for r in roots:
        out *= value - r
    return out


def _check_conjugate_closed(targets):
    t = np.asarray(targets, dtype=complex)
    if not np.allclose(np.sort_complex(t), np.sort_complex(np.conj(t))):
        raise ValueError("target poles must be closed under conjugation")
    return t


def place_single_input(a0_diag, b0, targets):
    """Feedback row k with eig(diag(a0) + b0 k) equal to the targets.

    Characteristic-polynomial matching: evaluating the desired polynomial at
    each open-loop pole a_i gives k_i = -p_des(a_i) / (b_i prod_{j != i}
    (a_i - a_j)).  Requires distinct a0 entries and nonzero b0.
    """
    a = np.asarray(a0_diag, dtype=float)
    b = np.asarray(b0, dtype=float)
    t = _check_conjugate_closed(targets)
    if len(a) != len(b) or len(a) != len(t):
        raise ValueError("a0, b0 and targets must have equal length")
    if np.any(np.abs(b) < 1e-12 * max(1.0, float(np.max(np.abs(b))))):
        raise ValueError("uncontrollable mode: zero input coefficient")
    n = len(a)
    if n > 1 and np.min(np.abs(np.subtract.outer(a, a) + np.eye(n))) < 1e-12:
        raise ValueError("open-loop poles must be distinct")
    k = np.empty(n)
    for i in range(n):
        denom = b[i] * np.prod(a[i] - np.delete(a, i)) if n > 1 else b[i]
        k[i] = -np.real(_poly_from_roots(a[i], t)) / denom
    placed = np.linalg.eigvals(np.diag(a) + np.outer(b, k))
    if not _spectra_match(placed, t, 1e-8):
        raise RuntimeError("pole placement failed to reach the requested spectrum")
    return k


def place_observer(a0_diag, c0, targets):
    """Observer column l with eig(diag(a0) - l c0) equal to the targets.

    Dual of place_single_input: the transpose maps the output row to an
    input column.
    """
    c = np.asarray(c0, dtype=float)
    if np.any(np.abs(c) < 1e-12 * max(1.0, float(np.max(np.abs(c))))):
        raise ValueError("unobservable mode: vanishing measurement trace")
    k = place_single_input(a0_diag, c, targets)
    return -k


def _spectra_match(eigs, targets, tol):
    key = lambda z: (np.round(np.real(z), 12), np.round(np.imag(z), 12))
    e = sorted(np.asarray(eigs, dtype=complex), key=key)
    t = sorted(np.asarray(targets, dtype=complex), key=key)
    scale = max(1.0, float(np.max(np.abs(t))))
    return bool(np.max(np.abs(np.array(e) - np.array(t))) <= tol * scale)


def default_state_poles(n_ctrl, delta):
    return -(delta + 1.0 + np.arange(n_ctrl))


def default_observer_poles(n_ctrl, delta):
    return -(delta + 2.0 + np.arange(n_ctrl))


def make_gains(
    plant,
    delta,
    k=None,
    l=None,
    state_poles=None,
    observer_poles=None,
):
    """Gains for the controlled block, placed or supplied directly.

    When k (or l) is given the corresponding targets are taken to be the
    spectrum it actually achieves; either way every closed-loop pole must
    sit strictly left of -delta.
    """
    a0 = plant.a0_diag
    b0 = plant.input0
    c0 = plant.phi0[: plant.n_ctrl]
    if k is None:
        tk = np.asarray(
            state_poles
            if state_poles is not None
            else default_state_poles(plant.n_ctrl, delta),
            dtype=complex,
        )
        k = place_single_input(a0, b0, tk)
    else:
        k = np.atleast_1d(np.asarray(k, dtype=float))
        tk = np.linalg.eigvals(np.diag(a0) + np.outer(b0, k))
    if l is None:
        tl = np.asarray(
            observer_poles
            if observer_poles is not None
            else default_observer_poles(plant.n_ctrl, delta),
            dtype=complex,
        )
        l = place_observer(a0, c0, tl)
    else:
        l = np.atleast_1d(np.asarray(l, dtype=float))
        tl = np.linalg.eigvals(np.diag(a0) - np.outer(l, c0))
    for name, poles in (("state", tk), ("observer", tl)):
        if np.max(np.real(poles)) >= -delta:
            raise ValueError(
                f"{name} poles {np.sort_complex(poles)} do not clear the "
                f"required decay rate {delta}"
            )
    return GainSet(
        k=k,
        l=l,
        delta=delta,
        target_poles_state=tk,
        target_poles_observer=tl,
    )


def _assemble(plant, gains, input0, input1_scaled, omega_lower):
    n0 = plant.n_ctrl
    n1 = plant.n_obs - n0
    n = plant.n_obs
    a0 = np.diag(plant.a0_diag)
    a1 = np.diag(plant.a1_diag)
    c0 = plant.phi0[:n0]
    lam1 = plant.lambdas[n0:n]
    c1t = plant.phi0[n0:n] / np.sqrt(lam1)
    k, l = gains.k, gains.l

    f = np.zeros((2 * n, 2 * n))
    s0, s1, s2, s3 = slice(0, n0), slice(n0, 2 * n0), slice(2 * n0, n0 + n), slice(
        n0 + n, 2 * n
    )
    f[s0, s0] = a0 + np.outer(input0, k)
    f[s0, s1] = np.outer(l, c0)
    f[s0, s3] = np.outer(l, c1t)
    f[s1, s1] = a0 - np.outer(l, c0)
    f[s1, s3] = -np.outer(l, c1t)
    f[s2, s0] = np.outer(input1_scaled, k)
    f[s2, s2] = a1
    f[s3, s3] = a1

    g = np.zeros((2 * n, n))
    g[s1, :n0] = np.eye(n0)
    g[s3, n0:] = np.eye(n1)

    l_script = np.zeros(2 * n)
    l_script[s0] = l
    l_script[s1] = -l

    k_tilde = np.zeros(2 * n)
    k_tilde[s0] = k

    omega = np.zeros((2 * n, 2 * n))
    eye0 = np.eye(n0)
    omega[s0, s0] = eye0
    omega[s0, s1] = eye0
    omega[s1, s0] = eye0
    omega[s1, s1] = eye0
    omega[s2, s2] = np.diag(omega_lower[0])
    omega[s2, s3] = np.diag(omega_lower[1])
    omega[s3, s2] = np.diag(omega_lower[1])
    omega[s3, s3] = np.diag(1.0 / lam1)

    lambda_tilde = np.concatenate([np.ones(n0), lam1])
    return f, g, l_script, k_tilde, omega, lambda_tilde


def assemble_distributed(plant, gains):
    """Closed-loop matrices for the distributed-input case."""
    if plant.case != DISTRIBUTED:
        raise ValueError("plant is not a distributed-control projection")
    n0, n = plant.n_ctrl, plant.n_obs
    lam1 = plant.lambdas[n0:n]
    f, g, l_script, k_tilde, omega, lambda_tilde = _assemble(
        plant,
        gains,
        input0=plant.b[:n0],
        input1_scaled=plant.b[n0:n],
        omega_lower=(np.ones(n - n0), 1.0 / np.sqrt(lam1)),
    )
    return ClosedLoopMatrices(
        case=DISTRIBUTED,
        n_ctrl=n0,
        n_obs=n,
        f=f,
        g=g,
        l_script=l_script,
        k_tilde=k_tilde,
        omega=omega,
        lambda_tilde=lambda_tilde,
    )


def assemble_boundary(plant, gains):
    """Closed-loop matrices for the boundary-input case, including the
    input-rate row on the extended analysis vector."""
    if plant.case != BOUNDARY:
        raise ValueError("plant is not a boundary-control projection")
    n0, n = plant.n_ctrl, plant.n_obs
    lam1 = plant.lambdas[n0:n]
    beta0 = plant.beta[:n0]
    f, g, l_script, k_tilde, omega, lambda_tilde = _assemble(
        plant,
        gains,
        input0=beta0,
        input1_scaled=plant.beta[n0:n] / lam1,
        omega_lower=(lam1**2, np.sqrt(lam1)),
    )
    k, l = gains.k, gains.l
    c0 = plant.phi0[:n0]
    c1t = plant.phi0[n0:n] / np.sqrt(lam1)
    kl = float(np.dot(k, l))
    e_row = np.concatenate(
        [
            k @ (np.diag(plant.a0_diag) + np.outer(beta0, k)),
            kl * c0,
            np.zeros(n - n0),
            kl * c1t,
            [kl],
            np.zeros(n),
        ]
    )
    return ClosedLoopMatrices(
        case=BOUNDARY,
        n_ctrl=n0,
        n_obs=n,
        f=f,
        g=g,
        l_script=l_script,
        k_tilde=k_tilde,
        omega=omega,
        lambda_tilde=lambda_tilde,
        e_row=e_row,
    )


def lyapunov_solution(f, delta):
    """Solve (F + delta I)^T P + P (F + delta I) = -I by a direct
    vectorized linear solve; requires F + delta I Hurwitz."""
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    shifted = f + delta * np.eye(n)
    if np.max(np.real(np.linalg.eigvals(shifted))) >= 0:
        raise ValueError("F + delta I is not Hurwitz; no stabilizing solution")
    eye = np.eye(n)
    lhs = np.kron(eye, shifted.T) + np.kron(shifted.T, eye)
    p = np.linalg.solve(lhs, -eye.reshape(-1)).reshape(n, n)
    return (p + p.T) / 2


def lyapunov_norm_diagnostic(f, delta):
    """Spectral norm of the shifted Lyapunov solution; swept over observer
    orders it exhibits the boundedness that underlies certificate
    feasibility at large orders."""
    p = lyapunov_solution(f, delta)
    return float(np.linalg.norm(p, 2))
