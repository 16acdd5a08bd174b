"""Scalar special functions and the Gauss-Radau rule used across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _check_gamma_args(a: float, x: float) -> None:
    if not a > 0:
        raise ValueError(f"upper_incomplete_gamma requires a > 0, got {a}")
    if not x >= 0:
        raise ValueError(f"upper_incomplete_gamma requires x >= 0, got {x}")


def _lower_series(a: float, x: float) -> float:
    """Regularised lower gamma P(a, x) by its power series."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise RuntimeError("incomplete gamma series did not converge")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_continued_fraction(a: float, x: float) -> float:
    """Unregularised Gamma(a, x) by the modified Lentz continued fraction."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise RuntimeError("incomplete gamma continued fraction did not converge")
    return math.exp(-x + a * math.log(x)) * h


def upper_incomplete_gamma(a: float, x: float) -> float:
    """Unregularised upper incomplete gamma function.

    Parameters
    ----------
    a : float
        Shape, strictly positive. Half-integers are the common case here.
    x : float
        Lower integration limit, nonnegative.

    Returns
    -------
    float
        ``int_x^inf t**(a-1) exp(-t) dt``.

    Notes
    -----
    Uses the continued fraction for ``x > a + 1`` and the complement of the
    regularised series otherwise.
    """
    a = float(a)
    x = float(x)
    _check_gamma_args(a, x)
    if x == 0.0:
        return math.gamma(a)
    if x > a + 1.0:
        return _upper_continued_fraction(a, x)
    return math.gamma(a) * (1.0 - _lower_series(a, x))


def regularized_upper_gamma(a: float, x: float) -> float:
    """Gamma(a, x) / Gamma(a)."""
    a = float(a)
    x = float(x)
    _check_gamma_args(a, x)
    if x == 0.0:
        return 1.0
    if x > a + 1.0:
        return _upper_continued_fraction(a, x) / math.gamma(a)
    return 1.0 - _lower_series(a, x)


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy in bits, with h2(0) = h2(1) = 0."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary_entropy requires 0 <= x <= 1, got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def normal_cdf(a: float) -> float:
    """Standard normal CDF evaluated through erfc."""
    return 0.5 * math.erfc(-float(a) / math.sqrt(2.0))


def _xlogy_ratio(q: float, p: float) -> float:
    return 0.0 if q == 0.0 else q * math.log(q / p)


def relative_entropy_bernoulli(q: float, p: float) -> float:
    """Natural-log relative entropy D(q || p) between Bernoulli laws."""
    return _xlogy_ratio(q, p) + _xlogy_ratio(1.0 - q, 1.0 - p)


def binomial_bound_F(n: int, p: float, k: int) -> float:
    """Normal-approximation sandwich for the binomial CDF.

    ``F(n, p, k) = Phi(sign(k/n - p) * sqrt(2 n D(k/n, p)))``. For ``k < n``
    it satisfies ``F(n, p, k) <= P[Bin(n, p) <= k] <= F(n, p, k + 1)``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"binomial_bound_F requires 0 < p < 1, got {p}")
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"binomial_bound_F requires 0 <= k <= n, n >= 1; got n={n}, k={k}")
    q = k / n
    d = max(relative_entropy_bernoulli(q, p), 0.0)
    sign = (q > p) - (q < p)
    return normal_cdf(sign * math.sqrt(2.0 * n * d))


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Radau rule on [0, 1] with its fixed node at t = 1."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-D arrays of equal length")
        if self.nodes.size < 1:
            raise ValueError("a quadrature rule needs at least one node")
        if self.nodes[-1] != 1.0:
            raise ValueError("last node must be exactly 1")
        if np.any(np.diff(self.nodes) <= 0) or self.nodes[0] <= 0:
            raise ValueError("nodes must be strictly increasing in (0, 1]")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    @property
    def order(self) -> int:
        return int(self.nodes.size)

    def integrate(self, fn) -> float:
        return float(np.dot(self.weights, fn(self.nodes)))


def gauss_radau(m: int) -> QuadratureRule:
    """Gauss-Radau rule of order ``m`` on [0, 1] with the node t = 1 fixed.

    Built from the Jacobi matrix of the Legendre polynomials on [-1, 1]
    with its last diagonal entry modified so that x = 1 is an eigenvalue,
    then mapped affinely to [0, 1]. Exact for polynomials of degree
    ``2m - 2``.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"gauss_radau requires an integer m >= 1, got {m}")
    m = int(m)
    if m == 1:
        return QuadratureRule(np.array([1.0]), np.array([1.0]))
    k = np.arange(1, m, dtype=float)
    offdiag = k / np.sqrt(4.0 * k * k - 1.0)
    jac = np.diag(offdiag, 1) + np.diag(offdiag, -1)
    # Radau modification: choose alpha so that det(J - I) = 0.
    rhs = np.zeros(m - 1)
    rhs[-1] = offdiag[-1] ** 2
    shift = np.linalg.solve(jac[: m - 1, : m - 1] - np.eye(m - 1), rhs)
    jac[-1, -1] = 1.0 + shift[-1]
    vals, vecs = np.linalg.eigh(jac)
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    nodes = 0.5 * (vals + 1.0)
    weights = vecs[0, :] ** 2
    weights = weights / weights.sum()
    nodes[-1] = 1.0
    return QuadratureRule(nodes, weights)
