"""Numerical diagonalization of the reaction-diffusion operator.

The elliptic operator is A f = -(p f')' + q f on [0,1] with separated
boundary conditions

    cos(theta1) f(0) - sin(theta1) f'(0) = 0,
    cos(theta2) f(1) + sin(theta2) f'(1) = 0,

discretized by conservative second-order finite differences on a uniform
grid.  Boundary conditions are folded into half-cell flux balances at the
end nodes, which keeps the discrete operator symmetric with respect to the
trapezoid inner product and therefore guarantees a real spectrum and
orthogonal eigenvectors.

All projections, residuals and tail sums below use trapezoid quadrature on
the same grid.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import polygamma


class ResolutionError(RuntimeError):
    """Discretization too coarse for the requested number of modes."""


@dataclass(frozen=True)
class PlantCoefficients:
    """Spatial data of the plant.

    p is the diffusion coefficient (strictly positive), q0 the open-loop
    reaction coefficient, qf the linear center of the sector in which the
    nonlinearity lives.  theta1, theta2 are the boundary-condition angles at
    x = 0 and x = 1.  theta1 must lie in (0, pi/2] so that the left
    measurement trace is well defined; theta2 in [0, pi/2].
    """

    p: Callable
    q0: Callable
    qf: Callable
    theta1: float
    theta2: float

    def __post_init__(self):
        if not (0.0 < self.theta1 <= np.pi / 2):
            raise ValueError(f"theta1 must be in (0, pi/2], got {self.theta1}")
        if not (0.0 <= self.theta2 <= np.pi / 2):
            raise ValueError(f"theta2 must be in [0, pi/2], got {self.theta2}")


@dataclass(frozen=True)
class Decomposition:
    """Split of the shifted reaction coefficient: q0 - qf = q - qc with q > 0."""

    q: Callable
    qc: float


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [0,1] with trapezoid quadrature weights."""

    m: int
    nodes: np.ndarray
    h: float
    quad_weights: np.ndarray

    @classmethod
    def uniform(cls, m):
        if m < 3:
            raise ValueError("grid needs at least 3 nodes")
        nodes = np.linspace(0.0, 1.0, m)
        h = 1.0 / (m - 1)
        w = np.full(m, h)
        w[0] = w[-1] = h / 2
        return cls(m=m, nodes=nodes, h=h, quad_weights=w)

    def inner(self, f, g):
        return float(np.dot(self.quad_weights, np.asarray(f) * np.asarray(g)))

    def norm_sq(self, f):
        return self.inner(f, f)


@dataclass(frozen=True)
class EigenBasis:
    """Computed eigenpairs of A with boundary traces and coefficient bounds.

    lambdas is increasing; phis[k] samples the unit eigenfunction of
    lambdas[k] on grid.nodes.  phi_at_0 etc. hold the boundary traces, with
    derivatives estimated by one-sided second-order differences.  p_lo, p_hi
    and q_hi are the grid min/max coefficient bounds entering the eigenvalue
    bracket pi^2 (n-1)^2 p_lo <= lambda_n <= pi^2 n^2 p_hi + q_hi.
    """

    n_max: int
    lambdas: np.ndarray
    phis: np.ndarray
    phi_at_0: np.ndarray
    dphi_at_0: np.ndarray
    phi_at_1: np.ndarray
    dphi_at_1: np.ndarray
    p_lo: float
    p_hi: float
    q_hi: float
    grid: Grid
    theta1: float
    theta2: float

    def bracket_bounds(self):
        n = np.arange(1, self.n_max + 1)
        lower = np.pi**2 * (n - 1) ** 2 * self.p_lo
        upper = np.pi**2 * n**2 * self.p_hi + self.q_hi
        return lower, upper


def _operator_bands(p, q, grid, theta1, theta2):
    """Weighted symmetric tridiagonal form of A and the active-node weights.

    Returns (diag, offdiag, weights, dirichlet_right).  The generalized
    problem  S f = lambda diag(weights) f  is encoded by the bands of S.
    """
    x, h, m = grid.nodes, grid.h, grid.m
    p_half = p((x[:-1] + x[1:]) / 2)
    p_half = np.broadcast_to(np.asarray(p_half, dtype=float), (m - 1,)).copy()
    q_nodes = np.broadcast_to(np.asarray(q(x), dtype=float), (m,)).copy()

    dirichlet_right = theta2 == 0.0
    n_act = m - 1 if dirichlet_right else m

    w = grid.quad_weights[:n_act].copy()
    if not dirichlet_right:
        w[-1] = h / 2
    else:
        w[-1] = h  # node m-2 is interior once the Dirichlet node is dropped

    diag = np.empty(n_act)
    off = -p_half[: n_act - 1] / h

    # half-cell flux balance at x = 0: p(0) f'(0) = p(0) cot(theta1) f(0)
    cot1 = np.cos(theta1) / np.sin(theta1)
    diag[0] = p_half[0] / h + float(p(0.0)) * cot1 + w[0] * q_nodes[0]
    diag[1 : n_act - 1] = (p_half[: n_act - 2] + p_half[1 : n_act - 1]) / h + w[
        1 : n_act - 1
    ] * q_nodes[1 : n_act - 1]
    if dirichlet_right:
        diag[-1] = (p_half[m - 3] + p_half[m - 2]) / h + w[-1] * q_nodes[m - 2]
    else:
        cot2 = np.cos(theta2) / np.sin(theta2)
        diag[-1] = p_half[m - 2] / h + float(p(1.0)) * cot2 + w[-1] * q_nodes[m - 1]
    return diag, off, w, dirichlet_right


def eigendecompose(coeffs, dec, grid, n_max):
    """Compute the first n_max eigenpairs of A = -(p f')' + q f.

    The potential q and its positivity come from the decomposition; the
    boundary angles from the plant coefficients.  Eigenvectors are
    L2-normalized under trapezoid quadrature and sign-fixed so that
    phi_n(0) > 0 (falling back to phi_n'(0) > 0).

    Raises ValueError for sign-violating coefficients, ResolutionError when
    the computed spectrum escapes the coefficient bracket by more than the
    discretization tolerance, which indicates the grid is too coarse.
    """
    if grid.m < 10 * n_max:
        raise ValueError(
            f"grid too coarse: m = {grid.m} < 10 * n_max = {10 * n_max}"
        )
    x = grid.nodes
    p_x = np.broadcast_to(np.asarray(coeffs.p(x), dtype=float), (grid.m,))
    q_x = np.broadcast_to(np.asarray(dec.q(x), dtype=float), (grid.m,))
    if np.min(p_x) <= 0:
        raise ValueError("diffusion coefficient p must be strictly positive")
    if np.min(q_x) < 0:
        # q = 0 is fine for the spectrum itself; strict positivity only
        # matters downstream (positive lambda_1, H1-equivalent energy)
        raise ValueError("decomposed potential q must be nonnegative")
    split = q_x - dec.qc
    target = np.asarray(coeffs.q0(x), dtype=float) - np.asarray(
        coeffs.qf(x), dtype=float
    )
    if np.max(np.abs(split - np.broadcast_to(target, (grid.m,)))) > 1e-12:
        raise ValueError("decomposition q - qc does not match q0 - qf on the grid")

    diag, off, w, dirichlet_right = _operator_bands(
        coeffs.p, dec.q, grid, coeffs.theta1, coeffs.theta2
    )
    # symmetrize the generalized problem: C = W^-1/2 S W^-1/2
    s = 1.0 / np.sqrt(w)
    c_diag = diag * s * s
    c_off = off * s[:-1] * s[1:]
    lam, vec = eigh_tridiagonal(
        c_diag, c_off, select="i", select_range=(0, n_max - 1)
    )

    phis = np.zeros((n_max, grid.m))
    phis[:, : len(w)] = (vec * s[:, None]).T  # Dirichlet node stays zero

    # deterministic sign: positive left trace, else positive left slope
    h = grid.h
    for k in range(n_max):
        lead = phis[k, 0]
        if lead == 0.0:
            lead = -3 * phis[k, 0] + 4 * phis[k, 1] - phis[k, 2]
        if lead < 0:
            phis[k] *= -1.0

    dphi0 = (-3 * phis[:, 0] + 4 * phis[:, 1] - phis[:, 2]) / (2 * h)
    dphi1 = (3 * phis[:, -1] - 4 * phis[:, -2] + phis[:, -3]) / (2 * h)

    p_lo, p_hi = float(np.min(p_x)), float(np.max(p_x))
    q_hi = float(np.max(q_x))
    basis = EigenBasis(
        n_max=n_max,
        lambdas=lam,
        phis=phis,
        phi_at_0=phis[:, 0].copy(),
        dphi_at_0=dphi0,
        phi_at_1=phis[:, -1].copy(),
        dphi_at_1=dphi1,
        p_lo=p_lo,
        p_hi=p_hi,
        q_hi=q_hi,
        grid=grid,
        theta1=coeffs.theta1,
        theta2=coeffs.theta2,
    )
    lower, upper = basis.bracket_bounds()
    scale = np.maximum(upper, 1.0)
    if np.any(lam < lower - 1e-3 * scale) or np.any(lam > upper + 1e-3 * scale):
        raise ResolutionError(
            "computed eigenvalues violate the coefficient bracket; "
            "increase the grid resolution m"
        )
    return basis


def project(f, basis, n):
    """First n quadrature projections <f, phi_k>, k = 1..n."""
    if n > basis.n_max:
        raise ValueError(f"requested {n} coefficients but only {basis.n_max} modes")
    fw = basis.grid.quad_weights * np.asarray(f, dtype=float)
    return basis.phis[:n] @ fw


def residual_norm_sq(f, basis, n):
    """Squared L2 norm of f minus its projection on the first n modes."""
    coeffs = project(f, basis, n)
    total = basis.grid.norm_sq(f)
    return max(0.0, total - float(np.dot(coeffs, coeffs)))


def boundary_tail_sum(basis, n, tail_policy="bracket"):
    """Upper estimate of sum_{k > n} phi_k(0)^2 / lambda_k.

    The modes up to n_max are summed exactly; the remainder beyond n_max is
    bounded analytically through the eigenvalue bracket
    lambda_k >= pi^2 (k-1)^2 p_lo (tail_policy="bracket") or dropped
    entirely (tail_policy="partial").  Overestimating is safe: the value
    only tightens the scalar stability constraint it feeds.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= basis.n_max:
        raise ValueError(
            f"need computed modes beyond n = {n}; basis only has {basis.n_max}"
        )
    if basis.lambdas[n] <= 0:
        raise ValueError("tail sum requires lambda_{n+1} > 0")
    partial = float(np.sum(basis.phi_at_0[n:] ** 2 / basis.lambdas[n:]))
    if tail_policy == "partial":
        return partial
    if tail_policy != "bracket":
        raise ValueError(f"unknown tail policy {tail_policy!r}")
    sup_trace = float(np.max(np.abs(basis.phi_at_0)))
    # sum_{k > n_max} 1/(k-1)^2 = psi'(n_max), exact via the trigamma function
    tail = sup_trace**2 / (np.pi**2 * basis.p_lo) * float(polygamma(1, basis.n_max))
    return partial + tail


def quadratic_form(f, basis):
    """Energy sum_k lambda_k <f, phi_k>^2 over the retained modes.

    Equals <A f, f> for f satisfying the boundary conditions, and is used
    as the H1-equivalent squared norm throughout.
    """
    coeffs = project(f, basis, basis.n_max)
    return float(np.dot(basis.lambdas, coeffs**2))


def bc_residuals(basis):
    """Scaled residuals of both boundary conditions for every mode.

    Derivative traces are one-sided second-order estimates, so residuals
    scale like (mu_n h)^2; callers should compare against that.
    """
    r0 = np.cos(basis.theta1) * basis.phi_at_0 - np.sin(basis.theta1) * basis.dphi_at_0
    r1 = np.cos(basis.theta2) * basis.phi_at_1 + np.sin(basis.theta2) * basis.dphi_at_1
    scale = 1.0 + np.sqrt(np.maximum(basis.lambdas, 0.0))
    return np.abs(r0) / scale, np.abs(r1) / scale
