"""Honest lossy, noisy Gaussian channel: score statistics and a round sampler."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .protocol import (
    KEY_EMPTY,
    QUADRANT,
    TEST_SCORES,
    TWO_PI,
    ProtocolParams,
    Score,
    discretize_key,
    discretize_test,
    discretize_key_array,
    score,
    test_score_index_array,
)

_QUAD_TOL = 1e-13


@dataclass(frozen=True)
class ChannelParams:
    """Transmittance ``eta``, excess noise ``chi`` and the trial noise ``chi_dual``."""

    eta: float = 1.0
    chi: float = 0.0
    chi_dual: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.chi < 0 or self.chi_dual < 0:
            raise ValueError("excess noise must be nonnegative")

    @classmethod
    def from_loss_db(cls, loss_db: float, chi: float = 0.0, chi_dual: float = 0.0) -> "ChannelParams":
        if loss_db < 0:
            raise ValueError("loss in dB must be nonnegative")
        return cls(10.0 ** (-loss_db / 10.0), chi, chi_dual)

    def variance(self, chi: float | None = None) -> float:
        """Outcome variance per complex unit, ``1 + eta chi / 2``."""
        return 1.0 + self.eta * (self.chi if chi is None else chi) / 2.0

    def dual(self) -> "ChannelParams":
        """The same channel with the trial noise promoted to the true noise."""
        return ChannelParams(self.eta, self.chi_dual, self.chi_dual)


def signal_mean(x: int | np.ndarray, alpha: float, eta: float):
    """Mean heterodyne outcome for Alice's symbol ``x``."""
    return math.sqrt(eta) * alpha * np.exp(1j * (2 * np.asarray(x) + 1) * math.pi / 4.0)


def outcome_density(y: complex, x: int, alpha: float, channel: ChannelParams) -> float:
    """Density of the outcome ``y`` in the complex plane (w.r.t. d Re y d Im y)."""
    v = channel.variance()
    mu = signal_mean(x, alpha, channel.eta)
    return math.exp(-abs(y - mu) ** 2 / v) / (math.pi * v)


def _radial_integral(c: float, phi: float, b_lo: float, b_hi: float) -> float:
    """``(1/pi) int_{b_lo}^{b_hi} b exp(-b^2 + 2 c b - phi^2) db`` in closed form."""
    scale = math.exp(c * c - phi * phi)
    u_lo = b_lo - c
    if math.isinf(b_hi):
        gauss = math.exp(-u_lo * u_lo)
        tail = special.erfc(u_lo)
    else:
        u_hi = b_hi - c
        gauss = math.exp(-u_lo * u_lo) - math.exp(-u_hi * u_hi)
        if u_lo > 0:
            tail = special.erfc(u_lo) - special.erfc(u_hi)
        else:
            tail = special.erf(u_hi) - special.erf(u_lo)
    return scale * (0.5 * gauss + 0.5 * math.sqrt(math.pi) * c * tail) / math.pi


def region_probability(
    x: int,
    w_lo: float,
    w_hi: float,
    theta_lo: float,
    theta_hi: float,
    channel: ChannelParams,
    alpha: float,
) -> float:
    """Probability that the outcome lands in an annular sector.

    The sector is ``w_lo <= |y|^2 < w_hi``, ``theta_lo <= arg y < theta_hi``.
    The radial integral is exact; the angular one uses adaptive quadrature.
    """
    if not (0.0 <= w_lo < w_hi) or not theta_lo < theta_hi:
        raise ValueError("degenerate region")
    v = channel.variance()
    phi = math.sqrt(channel.eta * alpha**2 / v)
    b_lo = math.sqrt(w_lo / v)
    b_hi = math.inf if math.isinf(w_hi) else math.sqrt(w_hi / v)
    centre = (2 * x + 1) * math.pi / 4.0

    def integrand(theta: float) -> float:
        return _radial_integral(phi * math.cos(theta - centre), phi, b_lo, b_hi)

    if phi == 0.0:
        return (theta_hi - theta_lo) * integrand(theta_lo)
    val, _ = integrate.quad(integrand, theta_lo, theta_hi, epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200)
    return float(val)


def angular_probability_analytic(x: int, z: int, channel: ChannelParams, alpha: float) -> float:
    """Probability of the full-radius quadrant ``z`` from the closed angular form.

    Integrand ``exp(-phi^2) {1 + sqrt(pi) phi f e^{phi^2 f^2} (1 + erf(phi f))} / (2 pi)``
    with ``f = cos(theta - (2x+1) pi/4)``, evaluated through ``erfcx`` for stability.
    """
    v = channel.variance()
    phi = math.sqrt(channel.eta * alpha**2 / v)
    centre = (2 * x + 1) * math.pi / 4.0

    def integrand(theta: float) -> float:
        c = phi * math.cos(theta - centre)
        return (math.exp(-phi * phi) + math.sqrt(math.pi) * c * math.exp(-phi * phi + c * c) * special.erfc(-c)) / TWO_PI

    val, _ = integrate.quad(integrand, z * QUADRANT, (z + 1) * QUADRANT, epsabs=_QUAD_TOL, epsrel=_QUAD_TOL)
    return float(val)


def _test_region(c: Score, x: int, params: ProtocolParams) -> tuple[float, float, float, float]:
    if c.kind == "top":
        return params.tau_max, math.inf, 0.0, TWO_PI
    quad = (x + c.k) % 4
    lo, hi = (params.tau_min, params.tau_max) if c.kind == "band" else (0.0, params.tau_min)
    return lo, hi, quad * QUADRANT, (quad + 1) * QUADRANT


def _key_region(z: int | None, params: ProtocolParams) -> tuple[float, float, float, float]:
    if z is KEY_EMPTY:
        return 0.0, params.tau_min_key, 0.0, TWO_PI
    return params.tau_min_key, math.inf, z * QUADRANT, (z + 1) * QUADRANT


def test_distribution(params: ProtocolParams, channel: ChannelParams) -> np.ndarray:
    """Test-round score distribution over ``TEST_SCORES``."""
    q = np.zeros(len(TEST_SCORES))
    for i, c in enumerate(TEST_SCORES):
        for x in range(4):
            q[i] += 0.25 * region_probability(x, *_test_region(c, x, params), channel, params.alpha)
    return q


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


@dataclass(frozen=True)
class HonestStatistics:
    """Honest test-score distribution and key-round table.

    ``key_table[x, j]`` is ``P[X = x, Z = z_j | T = 0]`` with columns
    ``z_j`` in the order ``0, 1, 2, 3, discarded``.
    """

    q: np.ndarray
    key_table: np.ndarray

    def __post_init__(self) -> None:
        if abs(self.q.sum() - 1.0) > 1e-8 or np.any(self.q < -1e-15):
            raise ValueError("q must be a probability vector")
        if abs(self.key_table.sum() - 1.0) > 1e-8 or np.any(self.key_table < -1e-15):
            raise ValueError("key table must be a probability table")

    @property
    def q_top(self) -> float:
        return float(self.q[-1])

    @property
    def pass_probability(self) -> float:
        return float(self.key_table[:, :4].sum())

    def _passed(self) -> np.ndarray:
        kept = self.key_table[:, :4]
        return kept / kept.sum()

    @property
    def h_x_given_z(self) -> float:
        """H(X | Z, pass) in bits."""
        joint = self._passed()
        return _entropy_bits(joint.ravel()) - _entropy_bits(joint.sum(axis=0))

    @property
    def h_z_given_x(self) -> float:
        """H(Z | X, pass) in bits."""
        joint = self._passed()
        return _entropy_bits(joint.ravel()) - _entropy_bits(joint.sum(axis=1))

    def full_distribution(self, gamma: float) -> np.ndarray:
        """Distribution over ``ALL_SCORES`` (generation label first)."""
        return np.concatenate(([1.0 - gamma], gamma * self.q))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["score", "probability"])
            for c, p in zip(TEST_SCORES, self.q):
                writer.writerow([c.label, repr(float(p))])
            labels = ["0", "1", "2", "3", "discarded"]
            for x in range(4):
                for j, lab in enumerate(labels):
                    writer.writerow([f"key_x{x}_z{lab}", repr(float(self.key_table[x, j]))])


def honest_statistics(params: ProtocolParams, channel: ChannelParams) -> HonestStatistics:
    """Honest statistics at the channel's true excess noise."""
    q = test_distribution(params, channel)
    table = np.zeros((4, 5))
    for x in range(4):
        for j, z in enumerate((0, 1, 2, 3, KEY_EMPTY)):
            table[x, j] = 0.25 * region_probability(x, *_key_region(z, params), channel, params.alpha)
    return HonestStatistics(q, table)


# ----------------------------------------------------------------------------
# Sampling


def sample_outcomes(x: np.ndarray, params: ProtocolParams, channel: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """Heterodyne outcomes for the symbols ``x``."""
    x = np.asarray(x)
    sd = math.sqrt(channel.variance() / 2.0)
    noise = rng.normal(0.0, sd, size=(2,) + x.shape)
    return signal_mean(x, params.alpha, channel.eta) + noise[0] + 1j * noise[1]


def sample_round(params: ProtocolParams, channel: ChannelParams, rng: np.random.Generator):
    """One protocol round ``(x, t, y, z, score)``.

    Alice's symbol is drawn in every round and announced only in test rounds.
    """
    x = int(rng.integers(0, 4))
    t = int(rng.random() < params.gamma)
    y = complex(sample_outcomes(np.array(x), params, channel, rng))
    if t == 0:
        z = discretize_key(y, params)
        return x, t, y, z, score(0, None, z)
    z = discretize_test(y, params)
    return x, t, y, z, score(1, x, z)


def sample_test_scores(n: int, params: ProtocolParams, channel: ChannelParams, rng: np.random.Generator, chunk: int = 1_000_000) -> np.ndarray:
    """Counts over ``TEST_SCORES`` from ``n`` simulated test rounds."""
    counts = np.zeros(len(TEST_SCORES), dtype=np.int64)
    done = 0
    while done < n:
        size = min(chunk, n - done)
        x = rng.integers(0, 4, size=size)
        y = sample_outcomes(x, params, channel, rng)
        counts += np.bincount(test_score_index_array(y, x, params), minlength=len(TEST_SCORES))
        done += size
    return counts


def sample_key_table(n: int, params: ProtocolParams, channel: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """Empirical ``P[X, Z | T = 0]`` from ``n`` simulated generation rounds."""
    x = rng.integers(0, 4, size=n)
    z = discretize_key_array(sample_outcomes(x, params, channel, rng), params.tau_min_key)
    col = np.where(z < 0, 4, z)
    table = np.zeros((4, 5))
    np.add.at(table, (x, col), 1.0)
    return table / n
