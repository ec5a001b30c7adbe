"""Stability certificates as affine matrix inequalities.

For a fixed scaling gamma the two certificate conditions are affine in the
decision variables: the symmetric matrix P, the Young multipliers alpha_i
and the measurement-tail multiplier beta.  This module builds them, decides
feasibility with a small self-contained solver, and re-verifies every
candidate point by exact symmetric eigendecomposition.  Only verified
points become certificates; infeasibility is reported, never certified.

The solver minimizes the smoothed maximum eigenvalue

    Phi(v) = tau * log sum_j sum_i exp(eig_i(M_j(v)) / tau)

over all constraint blocks M_j (the inequalities plus the positivity floor
eps_p I - P and the scalar bound slacks), with continuation tau 1 -> 1e-4,
L-BFGS descent and multi-start.  Phi is convex and smooth, and upper-bounds
the true maximum eigenvalue to within tau * log(#eigenvalues).
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import solve_continuous_are
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from . import synthesis

BOUND_SLACK = 1e-6  # strict scalar bounds encoded as >= bound + slack


@dataclass
class AffineMatrixInequality:
    """Symmetric-matrix constraint  constant + sum_k v_k T_k <= 0.

    Terms are keyed by ("P", i, j) with i <= j for entries of the symmetric
    matrix variable (the coefficient already covers both positions) or by
    ("s", name) for scalar variables.
    """

    name: str
    size: int
    constant: np.ndarray
    terms: list
    p_dim: int
    scalar_names: tuple

    def value_at(self, p=None, **scalars):
        m = self.constant.copy()
        for key, mat in self.terms:
            if key[0] == "P":
                m += p[key[1], key[2]] * mat
            else:
                m += scalars[key[1]] * mat
        return m

    def max_eig_at(self, p=None, **scalars):
        return float(np.linalg.eigvalsh(self.value_at(p=p, **scalars))[-1])


@dataclass
class Certificate:
    """Verified feasible point of the certificate inequalities."""

    p: np.ndarray
    alphas: dict
    beta: float
    gamma: float
    kf: float
    margins: dict
    case: str = ""
    n_obs: int = 0
    delta: float = 0.0

    feasible = True

    def to_dict(self):
        return {
            "case": self.case,
            "n_obs": self.n_obs,
            "delta": self.delta,
            "gamma": self.gamma,
            "kf": self.kf,
            "alphas": dict(self.alphas),
            "beta": self.beta,
            "margins": dict(self.margins),
            "p": self.p.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            p=np.asarray(d["p"], dtype=float),
            alphas={k: float(v) for k, v in d["alphas"].items()},
            beta=float(d["beta"]),
            gamma=float(d["gamma"]),
            kf=float(d["kf"]),
            margins={k: float(v) for k, v in d["margins"].items()},
            case=d.get("case", ""),
            n_obs=int(d.get("n_obs", 0)),
            delta=float(d.get("delta", 0.0)),
        )


@dataclass
class InfeasibleReport:
    """Best point found when no verified certificate was obtained."""

    margins: dict
    worst: float
    message: str

    feasible = False


@dataclass
class MarginReport:
    margins: dict
    p_min_eig: float
    passed: bool


def _sym_basis(dim, i, j):
    e = np.zeros((dim, dim))
    e[i, j] = 1.0
    e[j, i] = 1.0
    if i == j:
        e[i, i] = 1.0
    return e


def _p_keys(p_dim):
    return [("P", i, j) for i in range(p_dim) for j in range(i, p_dim)]


def _theta1_p_terms(mats, delta, size):
    """Coefficient matrices of the P entries in the large inequality."""
    two_n = mats.f.shape[0]
    f = mats.f
    terms = []
    for i in range(two_n):
        for j in range(i, two_n):
            e = _sym_basis(two_n, i, j)
            mat = np.zeros((size, size))
            mat[:two_n, :two_n] = f.T @ e + e @ f + 2 * delta * e
            col = e @ mats.l_script
            mat[:two_n, two_n] = col
            mat[two_n, :two_n] = col
            blk = e @ mats.g
            mat[:two_n, two_n + 1 :] = blk
            mat[two_n + 1 :, :two_n] = blk.T
            terms.append((("P", i, j), mat))
    return terms


def build_theta1_distributed(mats, plant, gains, gamma, kf):
    """Large certificate inequality for the distributed-input case.

    Blocks: the dissipation block coupling P with the closed-loop matrix,
    the measurement-tail column against -beta, and the residue column
    against the weighted multiplier -alpha2 gamma Lambda~^-1.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if kf < 0:
        raise ValueError("kf must be nonnegative")
    two_n = mats.f.shape[0]
    n = mats.n_obs
    size = 3 * n + 1
    terms = _theta1_p_terms(mats, gains.delta, size)

    m1 = np.zeros((size, size))
    m1[:two_n, :two_n] = gamma * plant.res_b_sq * np.outer(mats.k_tilde, mats.k_tilde)
    terms.append((("s", "alpha1"), m1))

    m2 = np.zeros((size, size))
    m2[:two_n, :two_n] = gamma * kf**2 * mats.omega
    m2[two_n + 1 :, two_n + 1 :] = -gamma * np.diag(1.0 / mats.lambda_tilde)
    terms.append((("s", "alpha2"), m2))

    mb = np.zeros((size, size))
    mb[two_n, two_n] = -1.0
    terms.append((("s", "beta"), mb))

    return AffineMatrixInequality(
        name="theta1",
        size=size,
        constant=np.zeros((size, size)),
        terms=terms,
        p_dim=two_n,
        scalar_names=("alpha1", "alpha2", "beta"),
    )


def build_theta1_boundary(mats, plant, gains, gamma, kf):
    """Large certificate inequality for the boundary-input case.

    Compared with the distributed case the feedback-residual weight uses the
    lifted shape a, the input-rate row enters through alpha2, and alpha3
    carries both the sector terms and the residue penalty.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if kf < 0:
        raise ValueError("kf must be nonnegative")
    two_n = mats.f.shape[0]
    n = mats.n_obs
    size = 3 * n + 1
    terms = _theta1_p_terms(mats, gains.delta, size)

    ktk = np.outer(mats.k_tilde, mats.k_tilde)

    m1 = np.zeros((size, size))
    m1[:two_n, :two_n] = gamma * plant.res_a_sq * ktk
    terms.append((("s", "alpha1"), m1))

    m2 = gamma * plant.res_b_sq * np.outer(mats.e_row, mats.e_row)
    terms.append((("s", "alpha2"), m2))

    m3 = np.zeros((size, size))
    m3[:two_n, :two_n] = gamma * kf**2 * (2 * plant.res_b_sq * ktk + mats.omega)
    m3[two_n + 1 :, two_n + 1 :] = -gamma * np.diag(1.0 / mats.lambda_tilde)
    terms.append((("s", "alpha3"), m3))

    mb = np.zeros((size, size))
    mb[two_n, two_n] = -1.0
    terms.append((("s", "beta"), mb))

    return AffineMatrixInequality(
        name="theta1",
        size=size,
        constant=np.zeros((size, size)),
        terms=terms,
        p_dim=two_n,
        scalar_names=("alpha1", "alpha2", "alpha3", "beta"),
    )


def build_theta2_lmi(gamma, lam_next, qc, delta, mphi, kf, case):
    """Small tail inequality in Schur-complement form.

    Feasibility of this block (with the alphas above their bounds) is
    equivalent to the scalar tail condition; the distributed case gives a
    3x3 matrix in (alpha1, alpha2, beta), the boundary case a 4x4 in
    (alpha1, alpha2, alpha3, beta) with a doubled sector tail term.
    """
    if lam_next <= 0:
        raise ValueError("tail requires lambda_{N+1} > 0")
    s = np.sqrt(gamma * lam_next)
    mu0 = 2 * gamma * (-lam_next + qc + delta)
    if case == synthesis.DISTRIBUTED:
        size = 3
        names = ("alpha1", "alpha2", "beta")
        kf_scalar, kf_coeff = "alpha2", gamma * kf**2 / lam_next
    else:
        size = 4
        names = ("alpha1", "alpha2", "alpha3", "beta")
        kf_scalar, kf_coeff = "alpha3", 2 * gamma * kf**2 / lam_next
    constant = np.zeros((size, size))
    constant[0, 0] = mu0
    constant[0, 1:] = s
    constant[1:, 0] = s
    terms = []
    for idx, name in enumerate(names[:-1]):
        m = np.zeros((size, size))
        m[idx + 1, idx + 1] = -1.0
        if name == kf_scalar:
            m[0, 0] = kf_coeff
        terms.append((("s", name), m))
    mb = np.zeros((size, size))
    mb[0, 0] = mphi
    terms.append((("s", "beta"), mb))
    return AffineMatrixInequality(
        name="theta2",
        size=size,
        constant=constant,
        terms=terms,
        p_dim=0,
        scalar_names=names,
    )


def theta2_scalar(gamma, lam_next, qc, delta, mphi, kf, case, alphas, beta):
    """Scalar form of the tail condition, used to cross-check the LMI."""
    if case == synthesis.DISTRIBUTED:
        inv = 1.0 / alphas["alpha1"] + 1.0 / alphas["alpha2"]
        tail = alphas["alpha2"] * gamma * kf**2 / lam_next
    else:
        inv = (
            1.0 / alphas["alpha1"]
            + 1.0 / alphas["alpha2"]
            + 1.0 / alphas["alpha3"]
        )
        tail = 2 * alphas["alpha3"] * gamma * kf**2 / lam_next
    return (
        2 * gamma * (-(1.0 - inv / 2.0) * lam_next + qc + delta)
        + beta * mphi
        + tail
    )


@dataclass
class SolveOptions:
    tau_ladder: tuple = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)
    maxiter: int = 200
    warm_tau_start: int = 2  # warm starts skip the hot early stages
    seed: int = 0
    extra_starts: int = 1
    # the smoothed objective is convex, so once one start has converged to a
    # clearly positive margin further starts cannot flip the verdict; margins
    # scale with gamma, hence the relative cutoff
    clear_margin_scale: float = 1e-4


class _Block:
    """One constraint compiled against the flat decision vector."""

    def __init__(self, name, size, constant, keys, mats, index):
        self.name = name
        self.size = size
        self.constant = constant
        self.idx = np.array([index[k] for k in keys], dtype=int)
        self.mats = np.array(mats)  # (n_terms, size, size)
        self.flat = self.mats.reshape(len(keys), -1)

    def value(self, v):
        if len(self.idx) == 0:
            return self.constant
        return self.constant + np.tensordot(v[self.idx], self.mats, axes=([0], [0]))


def _compile_blocks(inequalities, bounds, eps_p):
    p_dim = max(a.p_dim for a in inequalities)
    scalar_names = sorted({n for a in inequalities for n in a.scalar_names})
    keys = _p_keys(p_dim) + [("s", n) for n in scalar_names]
    index = {k: i for i, k in enumerate(keys)}
    blocks = []
    for a in inequalities:
        ks, ms = zip(*a.terms)
        blocks.append(_Block(a.name, a.size, a.constant, list(ks), list(ms), index))
    # positivity floor: eps_p I - P <= 0
    floor_terms = [(k, -_sym_basis(p_dim, k[1], k[2])) for k in _p_keys(p_dim)]
    ks, ms = zip(*floor_terms)
    blocks.append(
        _Block("p_floor", p_dim, eps_p * np.eye(p_dim), list(ks), list(ms), index)
    )
    for name in scalar_names:
        if name in bounds:
            lo = bounds[name] + BOUND_SLACK
            blocks.append(
                _Block(
                    f"bound_{name}",
                    1,
                    np.array([[lo]]),
                    [("s", name)],
                    [np.array([[-1.0]])],
                    index,
                )
            )
    return blocks, index, p_dim, scalar_names


def _objective(u_vec, blocks, tau, scale):
    v = scale * u_vec
    eigs = []
    per_block = []
    for b in blocks:
        lam, u = np.linalg.eigh(b.value(v))
        eigs.append(lam)
        per_block.append((lam, u))
    allv = np.concatenate(eigs)
    phi = tau * logsumexp(allv / tau)
    w = softmax(allv / tau)
    grad = np.zeros_like(v)
    pos = 0
    for b, (lam, u) in zip(blocks, per_block):
        wb = w[pos : pos + b.size]
        pos += b.size
        if len(b.idx) == 0:
            continue
        wmat = (u * wb) @ u.T
        grad[b.idx] += b.flat @ wmat.ravel()
    return phi, scale * grad


def _equilibration(blocks, n_vars):
    """Per-variable scale equalizing coefficient magnitudes across blocks.

    The closed-loop data mixes O(1) and O(lambda_N^2) coefficients, which
    stalls quasi-Newton steps; optimizing in Jacobi-equilibrated variables
    removes the disparity without touching the problem itself.
    """
    r = np.zeros(n_vars)
    for b in blocks:
        if len(b.idx):
            r[b.idx] += np.sum(b.flat**2, axis=1)
    return 1.0 / np.maximum(np.sqrt(r), 1e-8)


def _exact_margins(v, blocks):
    return {b.name: float(np.linalg.eigvalsh(b.value(v))[-1]) for b in blocks}


def _pack(p_mat, scalars, index, p_dim, scalar_names):
    v = np.zeros(len(index))
    for i in range(p_dim):
        for j in range(i, p_dim):
            v[index[("P", i, j)]] = p_mat[i, j]
    for n in scalar_names:
        v[index[("s", n)]] = scalars[n]
    return v


def _unpack(v, index, p_dim, scalar_names):
    p = np.zeros((p_dim, p_dim))
    for i in range(p_dim):
        for j in range(i, p_dim):
            p[i, j] = p[j, i] = v[index[("P", i, j)]]
    scalars = {n: float(v[index[("s", n)]]) for n in scalar_names}
    return p, scalars


def solve_feasibility(
    inequalities,
    bounds,
    eps_p=1e-8,
    eps_margin=1e-8,
    *,
    gamma,
    kf,
    p_init=None,
    warm=None,
    options=None,
    case="",
    n_obs=0,
    delta=0.0,
):
    """Search for a verified feasible point of the given inequalities.

    bounds maps scalar names to their strict lower bounds.  p_init seeds the
    matrix variable (typically the shifted Lyapunov solution); warm may be a
    Certificate from a nearby problem whose variables start the search.
    Returns a Certificate on success, otherwise an InfeasibleReport carrying
    the best margins found (a soft verdict: infeasibility is not certified).
    """
    opts = options or SolveOptions()
    blocks, index, p_dim, scalar_names = _compile_blocks(inequalities, bounds, eps_p)

    def base_scalars():
        s = {}
        for n in scalar_names:
            s[n] = 2.0 * bounds[n] if bounds.get(n, 0.0) > 0 else 1.0
        if "beta" in s:
            s["beta"] = 1.0
        return s

    starts = []
    if warm is not None:
        wv = _pack(
            warm.p, {**warm.alphas, "beta": warm.beta}, index, p_dim, scalar_names
        )
        starts.append((wv, opts.warm_tau_start))
    if p_init is None:
        p_init = np.eye(p_dim)
    s0 = base_scalars()
    starts.append((_pack(p_init, s0, index, p_dim, scalar_names), 0))
    if gamma != 1.0:
        s1 = dict(s0)
        s1["beta"] = gamma
        starts.append((_pack(gamma * p_init, s1, index, p_dim, scalar_names), 0))
    rng = np.random.default_rng(opts.seed)
    for _ in range(opts.extra_starts):
        s2 = {n: v * rng.uniform(1.0, 3.0) for n, v in base_scalars().items()}
        scale = rng.uniform(0.2, 5.0)
        starts.append((_pack(scale * gamma * p_init, s2, index, p_dim, scalar_names), 0))

    def check(v):
        margins = _exact_margins(v, blocks)
        return margins, max(margins.values())

    def certificate_from(v, margins):
        p, scalars = _unpack(v, index, p_dim, scalar_names)
        cert = Certificate(
            p=p,
            alphas={n: scalars[n] for n in scalar_names if n != "beta"},
            beta=scalars.get("beta", 0.0),
            gamma=gamma,
            kf=kf,
            margins=margins,
            case=case,
            n_obs=n_obs,
            delta=delta,
        )
        report = verify_certificate(cert, inequalities, eps_p, eps_margin)
        return cert if report.passed else None

    scale = _equilibration(blocks, len(index))
    best_margins, best_worst = None, np.inf
    for v0, tau_from in starts:
        margins, worst = check(v0)
        if worst <= -eps_margin:
            # a reused certificate may already satisfy the new inequalities
            cert = certificate_from(v0, margins)
            if cert is not None:
                return cert
        u_vec = v0 / scale
        for tau in opts.tau_ladder[tau_from:]:
            res = minimize(
                _objective,
                u_vec,
                args=(blocks, tau, scale),
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": opts.maxiter, "ftol": 1e-14, "gtol": 1e-12},
            )
            u_vec = res.x
            margins, worst = check(scale * u_vec)
            if worst < best_worst:
                best_worst, best_margins = worst, margins
            if worst <= -eps_margin:
                cert = certificate_from(scale * u_vec, margins)
                if cert is not None:
                    return cert
        if best_worst > opts.clear_margin_scale * gamma:
            break  # converged well inside the infeasible region
    return InfeasibleReport(
        margins=best_margins or {},
        worst=best_worst,
        message="no verified feasible point within budget",
    )


def verify_certificate(cert, inequalities, eps_p=1e-8, eps_margin=1e-8):
    """Exact eigenvalue check of a candidate point against each inequality
    and the matrix-variable positivity floor."""
    margins = {}
    for a in inequalities:
        margins[a.name] = a.max_eig_at(p=cert.p, **cert.alphas, beta=cert.beta)
    p_min = float(np.linalg.eigvalsh(cert.p)[0])
    passed = all(m <= -eps_margin for m in margins.values()) and p_min >= eps_p
    return MarginReport(margins=margins, p_min_eig=p_min, passed=passed)
