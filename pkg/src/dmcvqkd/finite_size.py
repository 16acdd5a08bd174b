"""Finite-size key length from a min-tradeoff function and an error budget."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .entropy import AffineScoreFunction
from .special import normal_cdf, relative_entropy_bernoulli

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
BETA_RANGE = (1e-12, 0.5)


# ----------------------------------------------------------------------------
# Completeness


def _zs_argument(n: int, p: float, k: int) -> float:
    """Signed argument of the normal CDF in the binomial sandwich."""
    q = k / n
    d = max(relative_entropy_bernoulli(q, p), 0.0)
    return ((q > p) - (q < p)) * math.sqrt(2.0 * n * d)


def lower_tail_bound(n: int, p: float, a: int) -> float:
    """Upper bound on ``P[Bin(n, p) < a]``; zero when ``a <= 0``."""
    if a <= 0:
        return 0.0
    return normal_cdf(_zs_argument(n, p, min(a, n)))


def upper_tail_bound(n: int, p: float, b: int) -> float:
    """Upper bound on ``P[Bin(n, p) > b]``; zero when ``b >= n``.

    Evaluated as ``Phi(-x)`` so tiny tails keep their relative accuracy.
    """
    if b >= n:
        return 0.0
    return normal_cdf(-_zs_argument(n, p, max(b, 0)))


def _largest_true(pred, lo: int, hi: int) -> int:
    """Largest integer in ``[lo, hi]`` with ``pred`` true, ``pred`` monotone decreasing; ``lo`` is assumed true."""
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return hi if pred(hi) else lo


def _count_bounds(n: int, p: float, budget: float) -> tuple[int, int, bool]:
    """Acceptance counts ``[a, b]`` with each tail bounded by ``budget / 2``.

    Returns the tightest such counts found by bisection and whether both
    tails could be made nontrivial.
    """
    half = budget / 2.0
    if p <= 0.0:
        return 0, 0, True
    if p >= 1.0:
        return n, n, True
    centre = min(max(int(math.floor(n * p)), 0), n)
    a = _largest_true(lambda k: lower_tail_bound(n, p, k) <= half, 0, centre)
    # b is the smallest count with a small enough upper tail.
    b = n - _largest_true(lambda k: upper_tail_bound(n, p, n - k) <= half, 0, n - centre)
    return a, b, a > 0 and b < n


def completeness_tolerances(p, n: int, budgets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tolerances ``(zeta, zeta_prime, tight)`` per score.

    The score ``c`` is accepted when ``p_c - zeta'_c <= freq(c) <= p_c + zeta_c``.
    Each tail of the binomial count gets half of ``budgets[c]``. ``tight``
    is False where one side had to be left open (the widest interval).
    """
    p = np.asarray(p, dtype=float)
    budgets = np.broadcast_to(np.asarray(budgets, dtype=float), p.shape)
    n = int(n)
    if n < 1:
        raise ValueError("N must be at least 1")
    if np.any(budgets <= 0) or np.any(budgets >= 1):
        raise ValueError("completeness budgets must lie in (0, 1)")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p must be a probability vector")
    zeta = np.zeros_like(p)
    zeta_prime = np.zeros_like(p)
    tight = np.zeros(p.shape, dtype=bool)
    for i, (pc, eps) in enumerate(zip(p, budgets)):
        a, b, ok = _count_bounds(n, float(pc), float(eps))
        zeta_prime[i] = max(pc - a / n, 0.0)
        zeta[i] = max(b / n - pc, 0.0)
        tight[i] = ok
    return zeta, zeta_prime, tight


def split_budget(eps_com_pe: float, n_scores: int, first_share: float | None = None) -> np.ndarray:
    """Per-score completeness budgets summing to ``eps_com_pe``.

    By default the budget is split equally; ``first_share`` gives the first
    score (the generation label) that fraction and splits the rest equally.
    """
    if not 0 < eps_com_pe < 1:
        raise ValueError("eps_com_pe must lie in (0, 1)")
    if first_share is None:
        return np.full(n_scores, eps_com_pe / n_scores)
    if not 0.0 < first_share < 1.0:
        raise ValueError("first_share must lie in (0, 1)")
    rest = (1.0 - first_share) * eps_com_pe / (n_scores - 1)
    return np.concatenate(([first_share * eps_com_pe], np.full(n_scores - 1, rest)))


@dataclass(frozen=True)
class AcceptanceSet:
    """Box ``[lower, upper]`` of tolerated frequencies intersected with the simplex."""

    p: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        for name in ("p", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.p.shape == self.lower.shape == self.upper.shape) or self.p.ndim != 1:
            raise ValueError("p, lower and upper must be 1-D arrays of equal length")
        if np.any(self.lower < 0) or np.any(self.upper > 1) or np.any(self.lower > self.upper):
            raise ValueError("interval endpoints must satisfy 0 <= lower <= upper <= 1")
        if self.lower.sum() > 1.0 + 1e-12 or self.upper.sum() < 1.0 - 1e-12:
            raise ValueError("acceptance set does not meet the probability simplex")

    @classmethod
    def from_tolerances(cls, p, zeta, zeta_prime) -> "AcceptanceSet":
        p = np.asarray(p, dtype=float)
        return cls(p, np.clip(p - zeta_prime, 0.0, 1.0), np.clip(p + zeta, 0.0, 1.0))

    @classmethod
    def build(cls, p, n: int, budgets) -> "AcceptanceSet":
        zeta, zeta_prime, _ = completeness_tolerances(p, n, budgets)
        return cls.from_tolerances(p, zeta, zeta_prime)

    @property
    def zeta(self) -> np.ndarray:
        return self.upper - self.p

    @property
    def zeta_prime(self) -> np.ndarray:
        return self.p - self.lower

    def contains(self, freq, tol: float = 0.0) -> bool:
        freq = np.asarray(freq, dtype=float)
        return bool(np.all(freq >= self.lower - tol) and np.all(freq <= self.upper + tol))


def floor_over_acceptance(f: AffineScoreFunction, acceptance: AcceptanceSet) -> float:
    """Exact minimum of an affine function over the acceptance polytope.

    The polytope is a box cut by ``sum x = 1``, so the minimum is reached by
    starting from the lower corner and pouring the remaining mass into the
    scores with the smallest coefficients first.
    """
    coef = f.coefficients
    if coef.shape != acceptance.p.shape:
        raise ValueError("function and acceptance set range over different scores")
    x = acceptance.lower.copy()
    mass = 1.0 - x.sum()
    for i in np.argsort(coef, kind="stable"):
        if mass <= 0:
            break
        add = min(acceptance.upper[i] - x[i], mass)
        x[i] += add
        mass -= add
    return f.constant + float(coef @ x)


# ----------------------------------------------------------------------------
# GEAT and privacy amplification


def _check_unit(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")


@dataclass(frozen=True)
class GeatTerms:
    """Named pieces of the GEAT smooth min-entropy bound (bits)."""

    first_order: float
    v: float
    k_beta: float
    second_order: float
    third_order: float
    epsilon_term: float

    @property
    def total(self) -> float:
        return self.first_order - self.second_order - self.third_order - self.epsilon_term


def geat_terms(f: AffineScoreFunction, h: float, n: float, beta: float, d_z: int, eps_s: float, eps_ea: float) -> GeatTerms:
    """Terms of the GEAT bound with ``Pr[Omega]`` replaced by ``eps_ea``.

    ``Max[f]`` is the largest vertex value; ``Min_Sigma[f]`` and ``Var[f]``
    use the bounds stored on ``f`` (falling back to the simplex minimum and
    to ``(Max - Min)^2 / 4``).
    """
    if not 0.0 < beta < 0.5:
        raise ValueError(f"beta must lie in (0, 1/2), got {beta}")
    _check_unit("eps_s", eps_s)
    _check_unit("eps_ea", eps_ea)
    max_f = f.max_value
    min_sigma = f.min_value if f.min_sigma_bound is None else f.min_sigma_bound
    var = (max_f - f.min_value) ** 2 / 4.0 if f.var_bound is None else f.var_bound
    v = math.log2(2 * d_z**2 + 1) + math.sqrt(2.0 + var)
    spread = 2.0 * math.log2(d_z) + max_f - min_sigma
    r = beta / (1.0 - beta)
    # Log domain: 2^spread overflows for steep min-tradeoff functions.
    log_k = (
        3.0 * math.log((1.0 - beta) / (1.0 - 2.0 * beta))
        - math.log(6.0 * math.log(2.0))
        + r * spread * math.log(2.0)
        + 3.0 * math.log(np.logaddexp(spread * math.log(2.0), 2.0))
    )
    k_beta = _exp(log_k)
    second = r * math.log(2.0) / 2.0 * v * v
    third = _exp(log_k + math.log(n * r * r))
    eps_term = (_smoothing_cost(eps_s) - (1.0 + beta) * math.log2(eps_ea)) / beta
    return GeatTerms(n * h, v, k_beta, second, third, eps_term)


def _smoothing_cost(eps_s: float) -> float:
    """``-log2(1 - sqrt(1 - eps^2))``, positive; stable for tiny ``eps``."""
    return -math.log2(-math.expm1(0.5 * math.log1p(-eps_s * eps_s)))


def _exp(x: float) -> float:
    return math.inf if x > 709.0 else math.exp(x)


def geat_bound(f: AffineScoreFunction, h: float, n: float, beta: float, d_z: int, eps_s: float, eps_ea: float) -> float:
    """GEAT lower bound (bits) on the smooth min-entropy of the raw key."""
    return geat_terms(f, h, n, beta, d_z, eps_s, eps_ea).total


def ev_hash_length(eps_cor: float) -> int:
    """Error-verification hash length ``ceil(log2(1 / eps_cor))``."""
    _check_unit("eps_cor", eps_cor)
    bits = -math.log2(eps_cor)
    nearest = round(bits)
    # Exact powers of two must not round up through floating error.
    if abs(bits - nearest) < 1e-9 and 2.0 ** (-nearest) <= eps_cor:
        return int(nearest)
    return int(math.ceil(bits))


def key_length(hmin_bound: float, leak_ec: float, l_ev: int, eps_s: float, eps_ea: float, eps_sec: float) -> int:
    """Largest ``l >= 0`` allowed by the leftover hash lemma, or 0.

    Requires ``2^{-(hmin - leak - l_ev - l + 2)/2} + 2 eps_s <= eps_sec`` and
    ``eps_ea <= eps_sec``.
    """
    _check_unit("eps_sec", eps_sec)
    if eps_s < 0 or eps_ea < 0:
        raise ValueError("epsilons must be nonnegative")
    if eps_ea > eps_sec or 2.0 * eps_s >= eps_sec:
        return 0
    room = eps_sec - 2.0 * eps_s
    ell = math.floor(hmin_bound - leak_ec - l_ev + 2.0 + 2.0 * math.log2(room))
    return max(int(ell), 0)


def golden_section_max(fn, lo: float, hi: float, tol: float, max_iter: int = 200) -> tuple[float, float]:
    """Golden-section search for the maximum of a unimodal ``fn`` on ``[lo, hi]``.

    Returns ``(argmax, max)`` over every point evaluated, endpoints included.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    seen = {lo: fn(lo), hi: fn(hi)}
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = fn(c), fn(d)
    seen[c], seen[d] = fc, fd
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = fn(c)
            seen[c] = fc
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = fn(d)
            seen[d] = fd
    best = max(seen, key=lambda x: (seen[x], -x))
    return best, seen[best]


def optimise_beta(f: AffineScoreFunction, h: float, n: float, d_z: int, eps_s: float, eps_ea: float, tol: float = 1e-3) -> tuple[float, float]:
    """``(beta, bound)`` maximising the GEAT bound; golden section on ``log beta``."""
    lo = math.log(BETA_RANGE[0])
    hi = math.log(BETA_RANGE[1] * (1.0 - 1e-9))

    def objective(log_beta: float) -> float:
        return geat_bound(f, h, n, math.exp(log_beta), d_z, eps_s, eps_ea)

    x, val = golden_section_max(objective, lo, hi, tol)
    return math.exp(x), val


# ----------------------------------------------------------------------------
# Report


CSV_COLUMNS = (
    "loss_db", "N", "alpha", "beta", "nu_c", "nu_L", "nu_U", "chi_dual",
    "h", "V", "Kbeta", "leak_ec", "l_ev", "key_len", "rate", "status",
)


@dataclass(frozen=True)
class KeyRateReport:
    """Every term entering one key length.

    ``hmin`` is the GEAT bound; ``second_order``, ``third_order`` and
    ``epsilon_term`` are the pieces subtracted from ``N h``. ``rate`` is
    ``key_length / N`` (the asymptotic rate for ``N = inf``).
    """

    N: float
    key_length: int
    rate: float
    h: float
    V: float
    K_beta: float
    beta: float
    second_order: float
    third_order: float
    epsilon_term: float
    hmin: float
    leak_ec: float
    l_ev: int
    eps_s: float
    eps_ea: float
    eps_sec: float
    d_z: int
    corrections: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    status: str = ""

    def __post_init__(self) -> None:
        if self.key_length < 0:
            raise ValueError("key length must be nonnegative")
        for name in ("rate", "h", "V", "K_beta", "beta", "second_order", "third_order", "epsilon_term", "hmin", "leak_ec"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.rate > math.log2(self.d_z) + 1e-12:
            raise ValueError("rate cannot exceed log2(d_z)")
        if not self.status:
            object.__setattr__(self, "status", "positive" if self.rate > 0 else "zero")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, default=float)

    def csv_row(self) -> dict:
        s = self.settings
        row = {
            "loss_db": s.get("loss_db", ""),
            "N": self.N,
            "alpha": s.get("alpha", ""),
            "beta": self.beta,
            "nu_c": self.corrections.get("nu_c", ""),
            "nu_L": self.corrections.get("nu_L", ""),
            "nu_U": self.corrections.get("nu_U", ""),
            "chi_dual": s.get("chi_dual", ""),
            "h": self.h,
            "V": self.V,
            "Kbeta": self.K_beta,
            "leak_ec": self.leak_ec,
            "l_ev": self.l_ev,
            "key_len": self.key_length,
            "rate": self.rate,
            "status": self.status,
        }
        return {k: _fmt(v) for k, v in row.items()}

    def csv_line(self) -> str:
        buf = io.StringIO()
        csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n").writerow(self.csv_row())
        return buf.getvalue().rstrip("\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def finite_key(
    f: AffineScoreFunction,
    acceptance: AcceptanceSet,
    n: float,
    leak_ec: float,
    eps_cor: float,
    eps_s: float,
    eps_ea: float,
    eps_sec: float,
    d_z: int,
    corrections: dict | None = None,
    settings: dict | None = None,
) -> KeyRateReport:
    """Key length for ``n`` rounds: floor over the acceptance set, best ``beta``, hashing."""
    h = floor_over_acceptance(f, acceptance)
    beta, _ = optimise_beta(f, h, n, d_z, eps_s, eps_ea)
    terms = geat_terms(f, h, n, beta, d_z, eps_s, eps_ea)
    l_ev = ev_hash_length(eps_cor)
    ell = key_length(terms.total, leak_ec, l_ev, eps_s, eps_ea, eps_sec)
    return KeyRateReport(
        N=float(n), key_length=ell, rate=ell / n, h=h, V=terms.v, K_beta=terms.k_beta, beta=beta,
        second_order=terms.second_order, third_order=terms.third_order, epsilon_term=terms.epsilon_term,
        hmin=terms.total, leak_ec=leak_ec, l_ev=l_ev, eps_s=eps_s, eps_ea=eps_ea, eps_sec=eps_sec, d_z=d_z,
        corrections=dict(corrections or {}), settings=dict(settings or {}),
    )
