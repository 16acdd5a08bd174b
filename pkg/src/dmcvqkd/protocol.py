"""QPSK protocol configuration, discretisation maps, scores and truncated operators."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from .special import regularized_upper_gamma, upper_incomplete_gamma

QUADRANT = math.pi / 2.0
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class EpsilonBudget:
    """Security and completeness parameters.

    ``eps_s`` and ``eps_ea`` default to ``eps_sec / 8`` and ``eps_sec / 2``.
    ``eps_com_ec`` may be zero, which models an error-correction code that
    never fails.
    """

    eps_cor: float = 1e-15
    eps_sec: float = 1e-6
    eps_s: float | None = None
    eps_ea: float | None = None
    eps_com_pe: float = 1e-10
    eps_com_ec: float = 0.0

    def __post_init__(self) -> None:
        if self.eps_s is None:
            object.__setattr__(self, "eps_s", self.eps_sec / 8.0)
        if self.eps_ea is None:
            object.__setattr__(self, "eps_ea", self.eps_sec / 2.0)
        for name in ("eps_cor", "eps_sec", "eps_s", "eps_ea", "eps_com_pe"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if not 0.0 <= self.eps_com_ec < 1.0:
            raise ValueError(f"eps_com_ec must lie in [0, 1), got {self.eps_com_ec}")
        if not self.eps_ea < self.eps_sec:
            raise ValueError("eps_ea must be smaller than eps_sec")
        if not 2.0 * self.eps_s < self.eps_sec:
            raise ValueError("2 * eps_s must be smaller than eps_sec")


@dataclass(frozen=True)
class ProtocolParams:
    """Protocol and proof parameters.

    Thresholds are intensities, i.e. bounds on ``|y|**2`` for a heterodyne
    outcome ``y``.
    """

    N: float = 1e15
    alpha: float = 0.7
    gamma: float = 0.05
    tau_min_key: float = 0.6
    tau_min: float = 1.5
    tau_max: float = 20.0
    n_max: int = 12
    m: int = 4
    d_z: int = 5
    eps: EpsilonBudget = field(default_factory=EpsilonBudget)

    def __post_init__(self) -> None:
        if not self.N >= 1:
            raise ValueError(f"N must be at least 1, got {self.N}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.tau_min_key > 0:
            raise ValueError("tau_min_key must be positive")
        if not 0.0 <= self.tau_min < self.tau_max:
            raise ValueError("thresholds must satisfy 0 <= tau_min < tau_max")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError("n_max must be an integer >= 1")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be an integer >= 1")
        if int(self.d_z) != self.d_z or self.d_z < 1:
            raise ValueError("d_z must be an integer >= 1")

    @property
    def dim_b(self) -> int:
        return int(self.n_max) + 1

    @property
    def dim_ab(self) -> int:
        return 4 * self.dim_b

    def with_updates(self, **kwargs) -> "ProtocolParams":
        eps_keys = {f.name for f in fields(EpsilonBudget)}
        eps_kw = {k: kwargs.pop(k) for k in list(kwargs) if k in eps_keys}
        out = replace(self, **kwargs)
        if eps_kw:
            out = replace(out, eps=replace(out.eps, **eps_kw))
        return out


# ----------------------------------------------------------------------------
# Scores


@dataclass(frozen=True, order=True)
class Score:
    """Round score.

    ``kind`` is one of ``"bot"`` (generation round), ``"top"`` (energy
    flag), ``"band"`` (rotation class ``k``) or ``"inner"`` (the ``(empty, k)``
    labels).
    """

    kind: str
    k: int = -1

    def __post_init__(self) -> None:
        if self.kind in ("bot", "top"):
            if self.k != -1:
                raise ValueError(f"score {self.kind} carries no index")
        elif self.kind in ("band", "inner"):
            if self.k not in (0, 1, 2, 3):
                raise ValueError(f"score index must be in 0..3, got {self.k}")
        else:
            raise ValueError(f"unknown score kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "bot":
            return "bot"
        if self.kind == "top":
            return "top"
        if self.kind == "band":
            return str(self.k)
        return f"empty{self.k}"

    @classmethod
    def from_label(cls, label: str) -> "Score":
        if label in ("bot", "top"):
            return cls(label)
        if label.startswith("empty"):
            return cls("inner", int(label[5:]))
        return cls("band", int(label))

    def __str__(self) -> str:
        return self.label


BOT = Score("bot")
TOP = Score("top")
TEST_SCORES: tuple[Score, ...] = (
    *(Score("band", k) for k in range(4)),
    *(Score("inner", k) for k in range(4)),
    TOP,
)
ALL_SCORES: tuple[Score, ...] = (BOT, *TEST_SCORES)
TEST_INDEX = {s: i for i, s in enumerate(TEST_SCORES)}
TOP_INDEX = TEST_INDEX[TOP]

KEY_EMPTY = None


def _quadrant(y: complex) -> int:
    theta = math.atan2(y.imag, y.real) % TWO_PI
    return min(int(theta // QUADRANT), 3)


def discretize_key(y: complex, params: ProtocolParams) -> int | None:
    """Key-round map: ``None`` (discarded) below ``tau_min_key``, else the quadrant."""
    y = complex(y)
    if abs(y) ** 2 < params.tau_min_key:
        return KEY_EMPTY
    return _quadrant(y)


def discretize_test(y: complex, params: ProtocolParams) -> Score:
    """Test-round map in Bob's absolute frame.

    Returns ``TOP`` above ``tau_max``, ``Score("band", quadrant)`` inside the
    band and ``Score("inner", quadrant)`` below ``tau_min``.
    """
    y = complex(y)
    w = abs(y) ** 2
    if w > params.tau_max:
        return TOP
    if w >= params.tau_min:
        return Score("band", _quadrant(y))
    return Score("inner", _quadrant(y))


def score(t: int, x: int | None, z) -> Score:
    """Public score of a round from the test flag, Alice's symbol and Bob's outcome."""
    if t == 0:
        if x is not None:
            raise ValueError("Alice's symbol is not announced in generation rounds")
        return BOT
    if t != 1:
        raise ValueError(f"test flag must be 0 or 1, got {t}")
    if x not in (0, 1, 2, 3):
        raise ValueError(f"test rounds need Alice's symbol in 0..3, got {x}")
    if not isinstance(z, Score) or z.kind == "bot":
        raise ValueError(f"test rounds need a test outcome, got {z!r}")
    if z.kind == "top":
        return TOP
    return Score(z.kind, (z.k - x) % 4)


def discretize_key_array(y: np.ndarray, tau_min_key: float) -> np.ndarray:
    """Vectorised key map; -1 encodes the discarded outcome."""
    w = np.abs(y) ** 2
    quad = np.minimum((np.mod(np.angle(y), TWO_PI) // QUADRANT).astype(int), 3)
    return np.where(w < tau_min_key, -1, quad)


def test_score_index_array(y: np.ndarray, x: np.ndarray, params: ProtocolParams) -> np.ndarray:
    """Vectorised score index into ``TEST_SCORES`` for test rounds."""
    w = np.abs(y) ** 2
    quad = np.minimum((np.mod(np.angle(y), TWO_PI) // QUADRANT).astype(int), 3)
    rel = np.mod(quad - x, 4)
    idx = np.where(w >= params.tau_min, rel, 4 + rel)
    return np.where(w > params.tau_max, TOP_INDEX, idx)


# ----------------------------------------------------------------------------
# Operators


def kappa(n_max: int, tau_max: float) -> float:
    """Operator-inequality constant Gamma(n_max+2, 0) / Gamma(n_max+2, tau_max)."""
    if n_max < 1 or not tau_max >= 0:
        raise ValueError("kappa requires n_max >= 1 and tau_max >= 0")
    return 1.0 / regularized_upper_gamma(n_max + 2, tau_max)


def alice_marginal(alpha: float) -> np.ndarray:
    """Reduced state of Alice's register in the source-replacement picture."""
    x = np.arange(4)
    diff = x[:, None] - x[None, :]
    return 0.25 * np.exp(-(alpha**2) * (1.0 - 1j ** diff))


@lru_cache(maxsize=256)
def _radial_table(n_max: int, w_lo: float, w_hi: float) -> np.ndarray:
    """``0.5 * (Gamma(s, w_lo) - Gamma(s, w_hi)) / sqrt(n! n'!)`` with s=(n+n')/2+1."""
    dim = n_max + 1
    table = np.zeros((dim, dim))
    for n in range(dim):
        for k in range(n, dim):
            s = 0.5 * (n + k) + 1.0
            norm = math.exp(0.5 * (math.lgamma(n + 1) + math.lgamma(k + 1)))
            lo = upper_incomplete_gamma(s, w_lo)
            hi = 0.0 if math.isinf(w_hi) else upper_incomplete_gamma(s, w_hi)
            table[n, k] = table[k, n] = 0.5 * (lo - hi) / norm
    return table


def _angular_table(n_max: int, theta_lo: float, theta_hi: float) -> np.ndarray:
    n = np.arange(n_max + 1)
    k = n[:, None] - n[None, :]
    out = np.empty(k.shape, dtype=complex)
    zero = k == 0
    out[zero] = theta_hi - theta_lo
    kk = k[~zero]
    out[~zero] = (np.exp(1j * kk * theta_hi) - np.exp(1j * kk * theta_lo)) / (1j * kk)
    return out


def region_operator(n_max: int, w_lo: float, w_hi: float, theta_lo: float, theta_hi: float) -> np.ndarray:
    """Truncated heterodyne POVM element of an annular sector.

    The sector is ``w_lo <= |y|^2 < w_hi`` and ``theta_lo <= arg y < theta_hi``.
    """
    if not (0.0 <= w_lo < w_hi) or not theta_lo < theta_hi:
        raise ValueError("degenerate phase-space region")
    radial = _radial_table(int(n_max), float(w_lo), float(w_hi))
    return radial * _angular_table(int(n_max), theta_lo, theta_hi) / math.pi


def quadrant_operator(n_max: int, quadrant: int, w_lo: float, w_hi: float) -> np.ndarray:
    return region_operator(n_max, w_lo, w_hi, quadrant * QUADRANT, (quadrant + 1) * QUADRANT)


def keygen_povm(z: int | None, params: ProtocolParams) -> np.ndarray:
    """Bob's key-round POVM element on the truncated Fock space."""
    if z is KEY_EMPTY:
        return region_operator(params.n_max, 0.0, params.tau_min_key, 0.0, TWO_PI)
    if z not in (0, 1, 2, 3):
        raise ValueError(f"key outcome must be None or 0..3, got {z!r}")
    return quadrant_operator(params.n_max, z, params.tau_min_key, math.inf)


def _bob_test_element(quadrant: int, kind: str, params: ProtocolParams) -> np.ndarray:
    if kind == "band":
        return quadrant_operator(params.n_max, quadrant, params.tau_min, params.tau_max)
    return quadrant_operator(params.n_max, quadrant, 0.0, params.tau_min)


def truncated_test_povm(c: Score, params: ProtocolParams) -> np.ndarray:
    """Truncated test-round POVM element for score ``c`` on Alice (x) Bob."""
    if c.kind == "bot":
        raise ValueError("the generation-round score has no test POVM")
    dim_b = params.dim_b
    out = np.zeros((4 * dim_b, 4 * dim_b), dtype=complex)
    if c.kind == "top":
        top = region_operator(params.n_max, params.tau_max, math.inf, 0.0, TWO_PI)
        for a in range(4):
            out[a * dim_b:(a + 1) * dim_b, a * dim_b:(a + 1) * dim_b] = top
        return out
    for a in range(4):
        block = _bob_test_element((a + c.k) % 4, c.kind, params)
        out[a * dim_b:(a + 1) * dim_b, a * dim_b:(a + 1) * dim_b] = block
    return out


def phase_rotation(n_max: int) -> np.ndarray:
    """Fock-space rotation by a quarter turn, diag(i**n)."""
    return np.diag(1j ** np.arange(n_max + 1))


def symmetry_unitary(n_max: int) -> np.ndarray:
    """Joint QPSK symmetry: cyclic shift on Alice with a quarter turn on Bob."""
    shift = np.roll(np.eye(4), 1, axis=0)
    return np.kron(shift, phase_rotation(n_max))


@dataclass(frozen=True)
class TruncatedOperators:
    """Finite-dimensional operators entering the entropy SDP."""

    n_max: int
    test_povms: tuple[np.ndarray, ...]
    key_povms: tuple[np.ndarray, ...]
    key_empty: np.ndarray
    p_ps: np.ndarray
    rho_a: np.ndarray
    kappa: float

    @property
    def dim_b(self) -> int:
        return self.n_max + 1

    @property
    def dim(self) -> int:
        return 4 * self.dim_b

    def key_povm_ab(self, z: int) -> np.ndarray:
        return np.kron(np.eye(4), self.key_povms[z])


def build_operators(params: ProtocolParams) -> TruncatedOperators:
    key = tuple(keygen_povm(z, params) for z in range(4))
    p_ps = np.kron(np.eye(4), sum(key))
    return TruncatedOperators(
        n_max=int(params.n_max),
        test_povms=tuple(truncated_test_povm(c, params) for c in TEST_SCORES),
        key_povms=key,
        key_empty=keygen_povm(KEY_EMPTY, params),
        p_ps=p_ps,
        rho_a=alice_marginal(params.alpha),
        kappa=kappa(params.n_max, params.tau_max),
    )


# ----------------------------------------------------------------------------
# Configuration and export

_PROTOCOL_KEYS = {
    "N": float, "alpha": float, "gamma": float, "tau_min_key": float, "tau_min": float,
    "tau_max": float, "n_max": int, "m": int, "d_z": int,
}


def _parse_value(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text.strip()


def read_config(path: str | Path) -> dict[str, dict[str, object]]:
    """Read an INI-style file into ``{section: {key: value}}``.

    Dotted section names such as ``[sweep.optimise]`` become nested mappings.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    out: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        target = out
        parts = section.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        leaf = target.setdefault(parts[-1], {})
        for key, value in parser.items(section):
            leaf[key] = _parse_value(value)
    return out


def params_from_config(cfg: Mapping[str, Mapping[str, object]], base: ProtocolParams | None = None) -> ProtocolParams:
    base = base or ProtocolParams()
    kwargs = {}
    for key, value in cfg.get("protocol", {}).items():
        if key not in _PROTOCOL_KEYS:
            raise ValueError(f"unknown protocol key {key!r}")
        kwargs[key] = _PROTOCOL_KEYS[key](value)
    eps_fields = {f.name for f in fields(EpsilonBudget)}
    for key, value in cfg.get("epsilon", {}).items():
        if key not in eps_fields:
            raise ValueError(f"unknown epsilon key {key!r}")
        kwargs[key] = float(value)
    return base.with_updates(**kwargs)


def export_operators(ops: TruncatedOperators, path: str | Path) -> None:
    """Write every operator as a text header followed by little-endian f64 data.

    Each record is a header line ``label=<name> rows=<d> cols=<d> layout=re,im``
    and then ``2 d^2`` doubles in row-major order with real and imaginary parts
    interleaved.
    """
    records = [(s.label, m) for s, m in zip(TEST_SCORES, ops.test_povms)]
    records += [(f"key{z}", m) for z, m in enumerate(ops.key_povms)]
    records += [("key_empty", ops.key_empty), ("p_ps", ops.p_ps), ("rho_a", ops.rho_a)]
    with open(path, "wb") as fh:
        fh.write(f"# truncated operators n_max={ops.n_max} kappa={ops.kappa!r} count={len(records)}\n".encode())
        for label, mat in records:
            mat = np.ascontiguousarray(mat, dtype=np.complex128)
            rows, cols = mat.shape
            fh.write(f"label={label} rows={rows} cols={cols} layout=re,im\n".encode())
            fh.write(mat.view(np.float64).astype("<f8").tobytes())


def load_operators(path: str | Path) -> dict[str, np.ndarray]:
    """Inverse of :func:`export_operators`."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        fh.readline()
        while True:
            header = fh.readline()
            if not header:
                break
            meta = dict(item.split("=", 1) for item in header.decode().split())
            rows, cols = int(meta["rows"]), int(meta["cols"])
            raw = np.frombuffer(fh.read(16 * rows * cols), dtype="<f8")
            out[meta["label"]] = raw.view(np.complex128).reshape(rows, cols).copy()
    return out
