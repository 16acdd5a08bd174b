"""Parameter optimisation, loss and block-length sweeps, completeness simulation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .channel import ChannelParams, honest_statistics, test_distribution
from .dimred import CorrectionSet, LinearisationPoints
from .entropy import (
    AffineScoreFunction,
    DualCertificate,
    SdpSolveError,
    SolveOptions,
    assemble_g,
    build_problem,
    min_tradeoff,
    solve,
)
from .finite_size import (
    CSV_COLUMNS,
    AcceptanceSet,
    KeyRateReport,
    finite_key,
    golden_section_max,
    split_budget,
)
from .protocol import ALL_SCORES, ProtocolParams, TruncatedOperators, alice_marginal, build_operators
from .special import gauss_radau

OPTIMISABLE = ("alpha", "chi_dual", "nu_c", "nu_L", "nu_U", "eps_split")
# Search ranges; the nu entries are log10 multipliers of the trial q_top.
RANGES = {
    "alpha": (0.3, 1.3),
    "chi_dual": (0.0, 0.05),
    "nu_c": (-2.0, 2.0),
    "nu_L": (-2.0, 2.0),
    "nu_U": (-2.0, 2.0),
    "eps_split": (0.01, 0.9),
}
TOLERANCES = {"alpha": 0.01, "chi_dual": 0.002, "nu_c": 0.05, "nu_L": 0.05, "nu_U": 0.05, "eps_split": 0.02}
LEAKAGE_MODES = ("h_x_given_z", "h_z_given_x")


@dataclass(frozen=True)
class Ablation:
    """Which truncation corrections enter the analysis."""

    continuity: bool = True
    statistics: bool = True
    truncation_slack: bool = True

    PRESETS = ("full", "no_continuity", "no_corrections")

    @classmethod
    def preset(cls, name: str) -> "Ablation":
        if name == "full":
            return cls()
        if name == "no_continuity":
            return cls(continuity=False)
        if name == "no_corrections":
            return cls(False, False, False)
        raise ValueError(f"unknown ablation {name!r}; choose from {cls.PRESETS}")

    @property
    def label(self) -> str:
        for name in self.PRESETS:
            if Ablation.preset(name) == self:
                return name
        flags = [k for k, v in asdict(self).items() if not v]
        return "no_" + "_".join(flags)


@dataclass(frozen=True)
class SweepSpec:
    """Grid, optimisation toggles and analysis switches of a sweep.

    ``n_values`` lists block lengths for ``mode="finite"``; the asymptotic
    rate is always added per loss when ``with_asymptotic`` is set.
    """

    losses_db: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    n_values: tuple[float, ...] = ()
    mode: str = "asymptotic"
    optimise: tuple[str, ...] = ("alpha",)
    ablation: Ablation = field(default_factory=Ablation)
    chi: float = 0.0
    chi_dual: float = 0.0
    rounds: int = 3
    leakage: str = "h_x_given_z"
    scale_leakage: bool = True
    with_asymptotic: bool = False
    solver: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "losses_db", tuple(float(x) for x in self.losses_db))
        object.__setattr__(self, "n_values", tuple(float(x) for x in self.n_values))
        object.__setattr__(self, "optimise", tuple(self.optimise))
        if not self.losses_db:
            raise ValueError("loss grid must be nonempty")
        if any(x < 0 for x in self.losses_db):
            raise ValueError("losses in dB must be nonnegative")
        if self.mode not in ("asymptotic", "finite"):
            raise ValueError("mode must be 'asymptotic' or 'finite'")
        if self.mode == "finite" and not self.n_values:
            raise ValueError("finite mode needs at least one block length")
        if any(not (n >= 1 and math.isfinite(n)) for n in self.n_values):
            raise ValueError("block lengths must be finite and at least 1")
        unknown = set(self.optimise) - set(OPTIMISABLE)
        if unknown:
            raise ValueError(f"cannot optimise {sorted(unknown)}; choose from {OPTIMISABLE}")
        if self.leakage not in LEAKAGE_MODES:
            raise ValueError(f"leakage must be one of {LEAKAGE_MODES}")
        if self.rounds < 1:
            raise ValueError("rounds must be positive")
        if self.chi < 0 or self.chi_dual < 0:
            raise ValueError("excess noise must be nonnegative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablation"] = self.ablation.label
        return out


@dataclass
class _Certified:
    cert: DualCertificate
    g: AffineScoreFunction
    f: AffineScoreFunction
    corrections: CorrectionSet
    points: LinearisationPoints


class PointEvaluator:
    """Evaluates key rates at one loss with a cache of certified SDP solves.

    The cache key is ``(alpha, chi_dual, nu multipliers)``; every block
    length and the asymptotic limit reuse the same certificates.
    """

    def __init__(
        self,
        params: ProtocolParams,
        loss_db: float,
        spec: SweepSpec,
        ops: TruncatedOperators | None = None,
    ) -> None:
        self.params = params
        self.loss_db = float(loss_db)
        self.spec = spec
        self.channel = ChannelParams.from_loss_db(loss_db, spec.chi, spec.chi_dual)
        self.ops = ops if ops is not None else build_operators(params)
        self.rule = gauss_radau(params.m)
        self.options = SolveOptions() if spec.solver is None else SolveOptions(solver=spec.solver)
        self.cache: dict[tuple, _Certified | SdpSolveError] = {}
        self._honest: dict[float, tuple] = {}

    # -- settings ----------------------------------------------------------

    def initial_settings(self) -> dict:
        return {
            "alpha": self.params.alpha,
            "chi_dual": self.spec.chi_dual,
            "nu_c": 0.0,
            "nu_L": 0.0,
            "nu_U": 0.0,
            "eps_split": None,
        }

    @staticmethod
    def _key(x: dict) -> tuple:
        return tuple(round(float(x[k]), 12) for k in ("alpha", "chi_dual", "nu_c", "nu_L", "nu_U"))

    # -- model pieces ------------------------------------------------------

    def honest(self, alpha: float):
        """``(q, full distribution, leakage per round)`` at the true channel."""
        if alpha not in self._honest:
            p = self.params.with_updates(alpha=alpha)
            st = honest_statistics(p, ChannelParams(self.channel.eta, self.spec.chi, self.spec.chi))
            h_cond = st.h_x_given_z if self.spec.leakage == "h_x_given_z" else st.h_z_given_x
            scale = (1.0 - p.gamma) * st.pass_probability if self.spec.scale_leakage else 1.0
            self._honest[alpha] = (st.q, st.full_distribution(p.gamma), scale * h_cond)
        return self._honest[alpha]

    def certified(self, x: dict) -> _Certified:
        key = self._key(x)
        if key not in self.cache:
            try:
                self.cache[key] = self._certify(x)
            except SdpSolveError as exc:
                self.cache[key] = exc
        entry = self.cache[key]
        if isinstance(entry, SdpSolveError):
            raise entry
        return entry

    def problem(self, x: dict):
        """``(problem, corrections, points)`` for the trial statistics at ``x``."""
        params = self.params.with_updates(alpha=float(x["alpha"]))
        ops = replace(self.ops, rho_a=alice_marginal(params.alpha))
        chi_dual = float(x["chi_dual"])
        q_dual = test_distribution(params, ChannelParams(self.channel.eta, chi_dual, chi_dual))
        kappa = ops.kappa
        q_top = float(q_dual[-1])
        points = LinearisationPoints(
            LinearisationPoints.at(q_top * 10.0 ** x["nu_c"], kappa).nu_c,
            LinearisationPoints.at(q_top * 10.0 ** x["nu_L"], kappa).nu_L,
            LinearisationPoints.at(q_top * 10.0 ** x["nu_U"], kappa).nu_U,
        )
        abl = self.spec.ablation
        cor = CorrectionSet.build(points, kappa, params.d_z, continuity=abl.continuity, statistics=abl.statistics)
        problem = build_problem(ops, self.rule, q_dual, cor, params.gamma, truncation_slack=abl.truncation_slack)
        return problem, cor, points

    def _certify(self, x: dict) -> _Certified:
        problem, cor, points = self.problem(x)
        cert = solve(problem, self.options)
        g = assemble_g(problem, cert)
        return _Certified(cert, g, min_tradeoff(g, self.params.gamma), cor, points)

    # -- rates -------------------------------------------------------------

    def asymptotic(self, x: dict) -> float:
        """``g(q) - leakage`` per round: the limit of the finite analysis."""
        entry = self.certified(x)
        q, _, leak = self.honest(float(x["alpha"]))
        return entry.g(q) - leak

    def finite(self, x: dict, n: float) -> KeyRateReport:
        entry = self.certified(x)
        params = self.params.with_updates(alpha=float(x["alpha"]))
        _, p_full, leak = self.honest(params.alpha)
        eps = params.eps
        budgets = split_budget(eps.eps_com_pe, len(ALL_SCORES), x.get("eps_split"))
        acceptance = AcceptanceSet.build(p_full, int(n), budgets)
        return finite_key(
            entry.f, acceptance, n, n * leak, eps.eps_cor, eps.eps_s, eps.eps_ea, eps.eps_sec, params.d_z,
            corrections=self._correction_record(entry),
            settings=self._settings_record(x),
        )

    def asymptotic_report(self, x: dict) -> KeyRateReport:
        entry = self.certified(x)
        params = self.params.with_updates(alpha=float(x["alpha"]))
        q, _, leak = self.honest(params.alpha)
        h = entry.g(q)
        f = entry.f
        return KeyRateReport(
            N=math.inf, key_length=0, rate=max(h - leak, 0.0), h=h, V=0.0, K_beta=0.0, beta=0.0,
            second_order=0.0, third_order=0.0, epsilon_term=0.0, hmin=h, leak_ec=leak, l_ev=0,
            eps_s=params.eps.eps_s, eps_ea=params.eps.eps_ea, eps_sec=params.eps.eps_sec, d_z=params.d_z,
            corrections=self._correction_record(entry),
            settings={**self._settings_record(x), "f_max": f.max_value, "raw_rate": h - leak},
            status="positive" if h - leak > 0 else "zero",
        )

    def rate(self, x: dict, n: float | None) -> float:
        """Objective for the optimiser; failed solves score ``-inf``."""
        try:
            return self.asymptotic(x) if n is None else self.finite(x, n).rate
        except SdpSolveError:
            return -math.inf

    def _correction_record(self, entry: _Certified) -> dict:
        c = entry.corrections
        return {
            "nu_c": entry.points.nu_c, "nu_L": entry.points.nu_L, "nu_U": entry.points.nu_U,
            "m_corr": c.m_corr, "c_corr": c.c_corr, "m_L": c.m_L, "c_L": c.c_L, "m_U": c.m_U, "c_U": c.c_U,
            "certified_bound": entry.cert.dual_value, "primal_value": entry.cert.primal_value,
        }

    def _settings_record(self, x: dict) -> dict:
        return {
            "loss_db": self.loss_db, "alpha": float(x["alpha"]), "chi_dual": float(x["chi_dual"]),
            "eps_split": x.get("eps_split"), "ablation": self.spec.ablation.label,
        }

    # -- optimisation ------------------------------------------------------

    def optimise(self, n: float | None, start: dict | None = None) -> dict:
        """Coordinate descent with golden-section line searches."""
        x = dict(start or self.initial_settings())
        if "eps_split" in self.spec.optimise and x["eps_split"] is None:
            x["eps_split"] = 1.0 / len(ALL_SCORES)
        best = self.rate(x, n)
        for _ in range(self.spec.rounds):
            before = best
            for name in self.spec.optimise:
                lo, hi = RANGES[name]

                def objective(v, name=name):
                    return self.rate({**x, name: v}, n)

                v, val = golden_section_max(objective, lo, hi, TOLERANCES[name])
                if val > best:
                    x[name], best = v, val
            if best - before <= 1e-7:
                break
        return x

    def polish(self, x: dict, n: float | None) -> dict:
        """Best cached setting for this block length (no new solves)."""
        best_x, best = x, self.rate(x, n)
        for key, entry in sorted(self.cache.items()):
            if isinstance(entry, SdpSolveError):
                continue
            cand = {**x, **dict(zip(("alpha", "chi_dual", "nu_c", "nu_L", "nu_U"), key))}
            val = self.rate(cand, n)
            if val > best:
                best_x, best = cand, val
        return best_x


def _report_for(ev: PointEvaluator, x: dict, n: float | None) -> KeyRateReport:
    try:
        return ev.asymptotic_report(x) if n is None else ev.finite(x, n)
    except SdpSolveError as exc:
        return failed_report(ev, x, n, exc)


def failed_report(ev: PointEvaluator, x: dict, n: float | None, exc: Exception) -> KeyRateReport:
    p = ev.params
    return KeyRateReport(
        N=math.inf if n is None else float(n), key_length=0, rate=0.0, h=0.0, V=0.0, K_beta=0.0, beta=0.0,
        second_order=0.0, third_order=0.0, epsilon_term=0.0, hmin=0.0, leak_ec=0.0, l_ev=0,
        eps_s=p.eps.eps_s, eps_ea=p.eps.eps_ea, eps_sec=p.eps.eps_sec, d_z=p.d_z,
        settings={**ev._settings_record(x), "error": str(exc), "group": getattr(exc, "group", "")},
        status="failed",
    )


def evaluate_loss(params: ProtocolParams, loss_db: float, spec: SweepSpec, ops: TruncatedOperators | None = None) -> list[KeyRateReport]:
    """Every block length of one loss, sharing one certificate cache.

    Points are optimised in increasing ``N`` and then re-polished over the
    full cache, so rates at one loss are all maxima over the same settings.
    """
    ev = PointEvaluator(params, loss_db, spec, ops)
    targets: list[float | None] = sorted(spec.n_values) if spec.mode == "finite" else []
    if spec.mode == "asymptotic" or spec.with_asymptotic:
        targets.append(None)
    start = ev.initial_settings()
    chosen = []
    for n in targets:
        start = ev.optimise(n, start)
        chosen.append(start)
    return [_report_for(ev, ev.polish(x, n), n) for x, n in zip(chosen, targets)]


def keyrate_point(params: ProtocolParams, loss_db: float, n: float, spec: SweepSpec | None = None) -> KeyRateReport:
    """Optimised finite-size key rate at one loss and block length."""
    spec = replace(spec or SweepSpec(), mode="finite", n_values=(n,), with_asymptotic=False)
    return evaluate_loss(params, loss_db, spec)[0]


def asymptotic_rate(params: ProtocolParams, loss_db: float, spec: SweepSpec | None = None) -> KeyRateReport:
    """Optimised asymptotic rate at one loss (second-order terms dropped)."""
    spec = replace(spec or SweepSpec(), mode="asymptotic", n_values=())
    return evaluate_loss(params, loss_db, spec)[0]


def _sweep_task(args):
    params, loss, spec = args
    return evaluate_loss(params, loss, spec)


def sweep(params: ProtocolParams, spec: SweepSpec, workers: int = 1) -> list[KeyRateReport]:
    """Evaluate the grid; results are in grid order whatever the completion order."""
    tasks = [(params, loss, spec) for loss in spec.losses_db]
    if workers <= 1 or len(tasks) == 1:
        groups = [_sweep_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(_sweep_task, tasks))
    return [r for group in groups for r in group]


def write_sweep(reports: list[KeyRateReport], path: str | Path, config: dict) -> tuple[Path, Path]:
    """Write the CSV table and its JSON sidecar (``<path>.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.csv_row())
    sidecar = path.with_suffix(path.suffix + ".json")
    payload = {"config": config, "reports": [r.to_dict() for r in reports]}
    sidecar.write_text(json.dumps(payload, indent=1, default=_json_default, sort_keys=True), encoding="utf-8")
    return path, sidecar


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


# ----------------------------------------------------------------------------
# Completeness simulation


@dataclass(frozen=True)
class CompletenessResult:
    aborts: int
    trials: int
    rate: float
    low: float
    high: float

    @property
    def width(self) -> float:
        return self.high - self.low


def simulate_completeness(p, acceptance: AcceptanceSet, n: int, trials: int, rng: np.random.Generator) -> CompletenessResult:
    """Abort fraction over ``trials`` multinomial draws of ``n`` rounds.

    Frequencies are drawn in one multinomial call per trial batch and tested
    against the acceptance box. The interval is the 95% Wilson interval.
    """
    p = np.asarray(p, dtype=float)
    if trials < 1 or n < 1:
        raise ValueError("trials and n must be positive")
    p = p / p.sum()
    counts = rng.multinomial(int(n), p, size=int(trials))
    freq = counts / float(n)
    ok = np.all((freq >= acceptance.lower) & (freq <= acceptance.upper), axis=1)
    aborts = int((~ok).sum())
    ci = stats.binomtest(aborts, int(trials)).proportion_ci(confidence_level=0.95, method="wilson")
    return CompletenessResult(aborts, int(trials), aborts / trials, float(ci.low), float(ci.high))
