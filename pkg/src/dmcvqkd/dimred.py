"""Photon-number truncation corrections and their affine (tangent) bounds.

All functions take the high-energy weight ``w = kappa * nu`` or the score
probability ``nu`` as documented. Tangent lines are taken at interior
linearisation points so every slope is finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .special import binary_entropy

SQRT5 = math.sqrt(5.0)
W_DELTA_MAX = 2.0 / 3.0
DELTA_MAX = 1.0 / math.sqrt(3.0)
W_XI_L = (5.0 + SQRT5) / 10.0
W_XI_U = (5.0 - SQRT5) / 10.0
XI_L_PLATEAU = (1.0 + SQRT5) / 2.0
XI_U_PLATEAU = (1.0 - SQRT5) / 2.0


def _check_weight(w: float) -> float:
    w = float(w)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {w}")
    return w


def delta_of_w(w: float) -> float:
    """Trace-distance bound between a state and its truncation of weight ``w``."""
    w = _check_weight(w)
    if w >= W_DELTA_MAX:
        return DELTA_MAX
    root = w * math.sqrt(w * (4.0 - 3.0 * w))
    base = w * (2.0 - w)
    return (math.sqrt(base + root) + math.sqrt(max(base - root, 0.0))) / (2.0 * math.sqrt(2.0))


def _slope_bracket(w: float) -> float:
    s = math.sqrt(w * (4.0 - 3.0 * w))
    plus = (3.0 * w + s) / math.sqrt((2.0 - w) + s)
    minus = (3.0 * w - s) / math.sqrt((2.0 - w) - s)
    return plus - minus


def ddelta_dw(w: float) -> float:
    """Derivative of :func:`delta_of_w` on (0, 2/3)."""
    w = float(w)
    if not 0.0 < w < W_DELTA_MAX:
        raise ValueError(f"derivative defined on (0, 2/3), got {w}")
    return (1.0 - w) / (2.0 * math.sqrt(2.0) * w * math.sqrt(4.0 - 3.0 * w)) * _slope_bracket(w)


def _check_nu_c(nu: float, kappa: float) -> float:
    w = kappa * nu
    if not (nu > 0 and w < W_DELTA_MAX):
        raise ValueError(f"linearisation point needs 0 < kappa*nu < 2/3, got kappa*nu={w}")
    return w


def delta_tangent(nu0: float, kappa: float) -> tuple[float, float]:
    """Tangent ``(m0, c0)`` with ``delta(kappa nu) <= m0 (nu - nu0) + c0``."""
    w0 = _check_nu_c(nu0, kappa)
    m0 = (1.0 - w0) / (2.0 * math.sqrt(2.0) * nu0 * math.sqrt(4.0 - 3.0 * w0)) * _slope_bracket(w0)
    return m0, delta_of_w(w0)


def continuity_penalty(delta: float, d_z: int) -> float:
    """Entropy continuity penalty v(delta) for a register of dimension ``d_z``."""
    if delta == 0.0:
        return 0.0
    return delta * math.log2(d_z) + (1.0 + delta) * binary_entropy(delta / (1.0 + delta))


def entropy_correction_tangent(nu_c: float, kappa: float, d_z: int) -> tuple[float, float]:
    """Tangent ``(m_corr, c_corr)`` upper-bounding ``v(delta(kappa nu))``."""
    w_c = _check_nu_c(nu_c, kappa)
    delta_c = delta_of_w(w_c)
    dv = math.log2(d_z) + math.log2((1.0 + delta_c) / delta_c)
    m_corr = (
        (1.0 - w_c) * kappa / (2.0 * math.sqrt(2.0) * w_c * math.sqrt(4.0 - 3.0 * w_c))
        * dv * _slope_bracket(w_c)
    )
    c_corr = delta_c * math.log2(d_z) + (1.0 + delta_c) * binary_entropy(delta_c / (1.0 + delta_c))
    return m_corr, c_corr


def xi_L(w: float) -> float:
    """Lower-constraint statistics correction (nonnegative, concave)."""
    w = float(w)
    if w < 0:
        raise ValueError("weight must be nonnegative")
    if w >= W_XI_L:
        return XI_L_PLATEAU
    return w + 2.0 * math.sqrt(w * (1.0 - w))


def xi_U(w: float) -> float:
    """Upper-constraint statistics correction (nonpositive, convex)."""
    w = float(w)
    if w < 0:
        raise ValueError("weight must be nonnegative")
    if w >= W_XI_U:
        return XI_U_PLATEAU
    return w - 2.0 * math.sqrt(w * (1.0 - w))


def xi_hat_L_coeffs(nu_L: float, kappa: float) -> tuple[float, float]:
    """Slope and intercept of the tangent upper bound on ``xi_L(kappa nu)``."""
    w = kappa * nu_L
    if not (nu_L > 0 and w <= W_XI_L):
        raise ValueError(f"nu_L needs 0 < kappa*nu_L <= (5+sqrt5)/10, got {w}")
    if w >= 1.0:
        raise ValueError("kappa*nu_L must stay below 1")
    slope = (1.0 + (1.0 - 2.0 * w) / math.sqrt(w * (1.0 - w))) * kappa
    return slope, math.sqrt(w / (1.0 - w))


def xi_hat_U_coeffs(nu_U: float, kappa: float) -> tuple[float, float]:
    """Slope and intercept of the tangent lower bound on ``xi_U(kappa nu)``."""
    w = kappa * nu_U
    if not (nu_U > 0 and w <= W_XI_U):
        raise ValueError(f"nu_U needs 0 < kappa*nu_U <= (5-sqrt5)/10, got {w}")
    slope = (1.0 - (1.0 - 2.0 * w) / math.sqrt(w * (1.0 - w))) * kappa
    return slope, -math.sqrt(w / (1.0 - w))


def xi_hat_L(nu: float, nu_L: float, kappa: float) -> float:
    slope, icpt = xi_hat_L_coeffs(nu_L, kappa)
    return slope * nu + icpt


def xi_hat_U(nu: float, nu_U: float, kappa: float) -> float:
    slope, icpt = xi_hat_U_coeffs(nu_U, kappa)
    return slope * nu + icpt


@dataclass(frozen=True)
class LinearisationPoints:
    """Tangent points for the entropy penalty and the two statistics corrections."""

    nu_c: float
    nu_L: float
    nu_U: float

    def validate(self, kappa: float) -> None:
        _check_nu_c(self.nu_c, kappa)
        xi_hat_L_coeffs(self.nu_L, kappa)
        xi_hat_U_coeffs(self.nu_U, kappa)

    @classmethod
    def at(cls, q_top: float, kappa: float, floor: float = 1e-14) -> "LinearisationPoints":
        """Tangent points at ``q_top`` clipped into their admissible ranges."""
        nu = max(q_top, floor)
        cap_c = 0.999 * W_DELTA_MAX / kappa
        return cls(min(nu, cap_c), min(nu, 0.999 * W_XI_L / kappa), min(nu, W_XI_U / kappa))


@dataclass(frozen=True)
class CorrectionSet:
    """Affine truncation corrections, all functions of the probability of ``top``.

    ``g_corr(nu) = m_corr (nu - nu_c) + c_corr`` and the statistics bounds
    ``xi_hat_L(nu) = m_L nu + c_L``, ``xi_hat_U(nu) = m_U nu + c_U``.
    Disabled groups have zero coefficients.
    """

    nu_c: float
    m_corr: float
    c_corr: float
    m0: float
    c0: float
    m_L: float
    c_L: float
    m_U: float
    c_U: float
    kappa: float

    def __post_init__(self) -> None:
        if self.c_corr < 0 or self.m_corr < 0:
            raise ValueError("entropy penalty tangent must be nonnegative")
        for name in ("m_corr", "c_corr", "m_L", "c_L", "m_U", "c_U"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def build(
        cls,
        points: LinearisationPoints,
        kappa: float,
        d_z: int,
        continuity: bool = True,
        statistics: bool = True,
    ) -> "CorrectionSet":
        if continuity:
            m_corr, c_corr = entropy_correction_tangent(points.nu_c, kappa, d_z)
            m0, c0 = delta_tangent(points.nu_c, kappa)
        else:
            m_corr = c_corr = m0 = c0 = 0.0
        if statistics:
            m_L, c_L = xi_hat_L_coeffs(points.nu_L, kappa)
            m_U, c_U = xi_hat_U_coeffs(points.nu_U, kappa)
        else:
            m_L = c_L = m_U = c_U = 0.0
        return cls(points.nu_c, m_corr, c_corr, m0, c0, m_L, c_L, m_U, c_U, kappa)

    def g_corr(self, q_top: float) -> float:
        return self.m_corr * (q_top - self.nu_c) + self.c_corr

    def xi_hat_L(self, q_top: float) -> float:
        return self.m_L * q_top + self.c_L

    def xi_hat_U(self, q_top: float) -> float:
        return self.m_U * q_top + self.c_U
