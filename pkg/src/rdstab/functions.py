"""Named coefficient-function builders shared by configs and scripts.

Every builder returns a vectorized callable on [0,1].  Configs reference
them by kind; tabulated data is linearly interpolated.
"""

import numpy as np


def constant(value):
    v = float(value)

    def f(x):
        return np.full_like(np.asarray(x, dtype=float), v)

    return f


def polynomial(coefficients):
    """Polynomial with coefficients ordered from the constant term up."""
    c = np.asarray(coefficients, dtype=float)

    def f(x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), c)

    return f


def cosine_window(lo, hi):
    """cos(x) restricted to [lo, hi], zero elsewhere.

    Samples that land exactly on a jump get the half value, which keeps
    trapezoid quadrature of the discontinuous shape second-order accurate
    when the window edges align with grid nodes.
    """
    lo, hi = float(lo), float(hi)
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError("window must satisfy 0 <= lo < hi <= 1")

    def f(x):
        x = np.asarray(x, dtype=float)
        inside = ((x > lo) & (x < hi)).astype(float)
        edge = np.isclose(x, lo, rtol=0.0, atol=1e-12) | np.isclose(
            x, hi, rtol=0.0, atol=1e-12
        )
        return np.cos(x) * (inside + 0.5 * edge)

    return f


def tabulated(xs, values):
    xs = np.asarray(xs, dtype=float)
    values = np.asarray(values, dtype=float)
    if xs.shape != values.shape or xs.ndim != 1:
        raise ValueError("tabulated data needs matching 1-d x and value arrays")

    def f(x):
        return np.interp(np.asarray(x, dtype=float), xs, values)

    return f


def from_config(node):
    """Build a coefficient function from a config mapping."""
    if not isinstance(node, dict) or "kind" not in node:
        raise ValueError(f"coefficient spec must be a mapping with 'kind': {node!r}")
    kind = node["kind"]
    if kind == "constant":
        return constant(node["value"])
    if kind == "polynomial":
        return polynomial(node["coefficients"])
    if kind == "cosine_window":
        return cosine_window(node["lo"], node["hi"])
    if kind == "tabulated":
        return tabulated(node["x"], node["values"])
    raise ValueError(f"unknown coefficient kind {kind!r}")
