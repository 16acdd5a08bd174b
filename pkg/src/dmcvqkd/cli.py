"""Command line: rates, sweeps, completeness simulation and operator dumps.

Examples
--------
    dmcvqkd asymptotic --loss 1
    dmcvqkd keyrate --loss 0.5 --n 1e15 --optimise alpha
    dmcvqkd sweep --losses 0 1 2 3 --ablation no_continuity --output out/abl.csv
    dmcvqkd sweep --losses 0.5 --mode finite --n 1e14 1e15 1e16 --with-asymptotic
    dmcvqkd simulate --loss 1 --n 1e6 --trials 10000 --budget 0.1 --seed 7
    dmcvqkd dump-operators --output ops.bin --certificate cert.json --loss 2
    dmcvqkd selftest

Every command reads optional ``[protocol]``, ``[epsilon]``, ``[channel]``,
``[sweep]`` and ``[simulate]`` sections from ``--config``; flags override
the file. Failures print one JSON record on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from dataclasses import asdict, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .entropy import SOLVERS, certificate_to_text, problem_to_text, solve
from .finite_size import CSV_COLUMNS, AcceptanceSet, ev_hash_length, split_budget
from .channel import ChannelParams, honest_statistics
from .pipeline import OPTIMISABLE, Ablation, PointEvaluator, SweepSpec, simulate_completeness, sweep, write_sweep
from .protocol import ALL_SCORES, ProtocolParams, build_operators, export_operators, params_from_config, read_config
from .report import render


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with protocol/epsilon/channel/sweep sections")
    p.add_argument("--output", type=Path, help="output file (CSV for rate commands)")
    p.add_argument("--seed", type=int, default=None, help="64-bit root seed")
    p.add_argument("--workers", type=int, default=None, help="worker processes for sweeps")
    p.add_argument("--solver", choices=SOLVERS, default=None, help="conic backend for the multiplier SDP")
    p.add_argument("--n-max", type=int, default=None, help="photon-number cutoff")
    p.add_argument("--alpha", type=float, default=None, help="coherent-state amplitude")
    p.add_argument("--chi", type=float, default=None, help="excess noise of the honest channel")
    p.add_argument("--chi-dual", type=float, default=None, help="trial excess noise for the dual statistics")
    p.add_argument("--ablation", choices=Ablation.PRESETS, default=None, help="correction preset")
    p.add_argument("--no-continuity", action="store_true", help="drop the continuity penalty")
    p.add_argument("--no-statistics", action="store_true", help="drop the statistics corrections")
    p.add_argument("--no-truncation-slack", action="store_true", help="drop the trace and marginal slack")
    p.add_argument("--optimise", nargs="*", choices=OPTIMISABLE, default=None, help="scalars to optimise")
    p.add_argument("--leakage", choices=("h_x_given_z", "h_z_given_x"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmcvqkd", description="Key rates for four-state CV-QKD with photon-number truncation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("asymptotic", help="asymptotic key rate at one loss")
    _add_common(p)
    p.add_argument("--loss", type=float, default=None, help="channel loss in dB")

    p = sub.add_parser("keyrate", help="finite-size key rate at one loss and block length")
    _add_common(p)
    p.add_argument("--loss", type=float, default=None)
    p.add_argument("--n", type=_positive_float, default=None, help="number of rounds N")

    p = sub.add_parser("sweep", help="grid over loss and block length; writes CSV, JSON and figures")
    _add_common(p)
    p.add_argument("--losses", type=float, nargs="+", default=None)
    p.add_argument("--n", type=_positive_float, nargs="*", default=None)
    p.add_argument("--mode", choices=("asymptotic", "finite"), default=None)
    p.add_argument("--with-asymptotic", action="store_true", help="add the asymptotic row per loss")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("simulate", help="Monte Carlo abort rate of the acceptance test")
    _add_common(p)
    p.add_argument("--loss", type=float, default=None)
    p.add_argument("--n", type=_positive_float, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--budget", type=float, default=None, help="total completeness budget split over scores")

    p = sub.add_parser("dump-operators", help="write truncated operators, optionally a problem and certificate")
    _add_common(p)
    p.add_argument("--loss", type=float, default=None)
    p.add_argument("--problem", type=Path, default=None, help="write the SDP data as JSON")
    p.add_argument("--certificate", type=Path, default=None, help="solve and write the certificate as JSON")

    p = sub.add_parser("selftest", help="fast numerical self-checks")
    _add_common(p)
    return parser


# ----------------------------------------------------------------------------
# Settings resolution


def _settings(args) -> tuple[ProtocolParams, dict, dict]:
    cfg = read_config(args.config) if args.config else {}
    params = params_from_config(cfg)
    updates = {}
    if args.n_max is not None:
        updates["n_max"] = args.n_max
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if updates:
        params = params.with_updates(**updates)
    channel = dict(cfg.get("channel", {}))
    for key in ("chi", "chi_dual"):
        if getattr(args, key) is not None:
            channel[key] = getattr(args, key)
    if getattr(args, "loss", None) is not None:
        channel["loss_db"] = args.loss
    return params, channel, cfg


def _ablation(args, cfg_sweep: dict) -> Ablation:
    name = args.ablation or cfg_sweep.get("ablation", "full")
    abl = Ablation.preset(str(name))
    return replace(
        abl,
        continuity=abl.continuity and not args.no_continuity and bool(cfg_sweep.get("continuity", True)),
        statistics=abl.statistics and not args.no_statistics and bool(cfg_sweep.get("statistics", True)),
        truncation_slack=abl.truncation_slack and not args.no_truncation_slack and bool(cfg_sweep.get("truncation_slack", True)),
    )


def _as_tuple(value) -> tuple:
    if value is None or value == "":
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


def _spec(args, cfg: dict, channel: dict, **overrides) -> SweepSpec:
    s = dict(cfg.get("sweep", {}))
    optimise = args.optimise if args.optimise is not None else _as_tuple(s.get("optimise", ("alpha",)))
    kwargs = dict(
        losses_db=_as_tuple(s.get("losses_db", channel.get("loss_db", 0.0))),
        n_values=_as_tuple(s.get("n_values", ())),
        mode=str(s.get("mode", "asymptotic")),
        optimise=tuple(optimise),
        ablation=_ablation(args, s),
        chi=float(channel.get("chi", 0.0)),
        chi_dual=float(channel.get("chi_dual", 0.0)),
        rounds=int(s.get("rounds", 3)),
        leakage=args.leakage or str(s.get("leakage", "h_x_given_z")),
        with_asymptotic=bool(s.get("with_asymptotic", False)),
        solver=args.solver or s.get("solver"),
    )
    kwargs.update(overrides)
    return SweepSpec(**kwargs)


def _workers(args, cfg: dict) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    return max(1, int(cfg.get("sweep", {}).get("workers", 1)))


def _config_record(args, params: ProtocolParams, spec: SweepSpec | None) -> dict:
    return {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "config_file": str(args.config) if args.config else None,
        "params": _jsonable(params),
        "sweep": spec.to_dict() if spec else None,
    }


def _jsonable(obj):
    return asdict(obj) if is_dataclass(obj) else obj


def _emit(reports, args, params, spec, plots: bool) -> None:
    header = ",".join(CSV_COLUMNS)
    print(header)
    for r in reports:
        print(r.csv_line())
    if args.output:
        csv_path, sidecar = write_sweep(reports, args.output, _config_record(args, params, spec))
        written = [csv_path, sidecar]
        if plots:
            written += render(reports, csv_path)
        for path in written:
            print(f"wrote {path}", file=sys.stderr)
    failed = [r for r in reports if r.status == "failed"]
    if failed:
        raise RuntimeError(f"{len(failed)} point(s) failed: {failed[0].settings.get('error', '')}")


# ----------------------------------------------------------------------------
# Commands


def cmd_asymptotic(args) -> None:
    params, channel, cfg = _settings(args)
    spec = _spec(args, cfg, channel, losses_db=(float(channel.get("loss_db", 0.0)),), mode="asymptotic", n_values=())
    _emit(sweep(params, spec), args, params, spec, plots=False)


def cmd_keyrate(args) -> None:
    params, channel, cfg = _settings(args)
    n = args.n or float(cfg.get("sweep", {}).get("n", 1e15))
    spec = _spec(args, cfg, channel, losses_db=(float(channel.get("loss_db", 0.0)),), mode="finite", n_values=(n,), with_asymptotic=False)
    _emit(sweep(params, spec), args, params, spec, plots=False)


def cmd_sweep(args) -> None:
    params, channel, cfg = _settings(args)
    overrides = {}
    if args.losses is not None:
        overrides["losses_db"] = tuple(args.losses)
    if args.n:
        overrides["n_values"] = tuple(args.n)
        overrides["mode"] = "finite"
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.with_asymptotic:
        overrides["with_asymptotic"] = True
    spec = _spec(args, cfg, channel, **overrides)
    if args.output is None:
        args.output = Path("sweep.csv")
    _emit(sweep(params, spec, workers=_workers(args, cfg)), args, params, spec, plots=not args.no_plots)


def cmd_simulate(args) -> None:
    params, channel, cfg = _settings(args)
    s = cfg.get("simulate", {})
    n = int(args.n or s.get("n", 1e6))
    trials = int(args.trials or s.get("trials", 10_000))
    budget = float(args.budget or s.get("budget", 0.1))
    seed = args.seed if args.seed is not None else int(s.get("seed", 0))
    ch = ChannelParams.from_loss_db(float(channel.get("loss_db", 0.0)), float(channel.get("chi", 0.0)))
    p = honest_statistics(params, ch).full_distribution(params.gamma)
    acceptance = AcceptanceSet.build(p, n, split_budget(budget, len(ALL_SCORES)))
    res = simulate_completeness(p, acceptance, n, trials, np.random.default_rng(seed))
    record = {
        "n": n, "trials": trials, "budget": budget, "seed": seed, "aborts": res.aborts,
        "abort_rate": res.rate, "wilson_low": res.low, "wilson_high": res.high,
        "within_budget": res.rate <= budget + 3 * res.width,
    }
    text = json.dumps(record, indent=1)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")


def cmd_dump_operators(args) -> None:
    params, channel, cfg = _settings(args)
    ops = build_operators(params)
    out = args.output or Path("operators.bin")
    export_operators(ops, out)
    print(f"wrote {out}", file=sys.stderr)
    if args.problem or args.certificate:
        spec = _spec(args, cfg, channel, losses_db=(float(channel.get("loss_db", 0.0)),))
        ev = PointEvaluator(params, spec.losses_db[0], spec, ops)
        problem, _, _ = ev.problem(ev.initial_settings())
        if args.problem:
            args.problem.write_text(problem_to_text(problem), encoding="utf-8")
            print(f"wrote {args.problem}", file=sys.stderr)
        if args.certificate:
            args.certificate.write_text(certificate_to_text(solve(problem, ev.options)), encoding="utf-8")
            print(f"wrote {args.certificate}", file=sys.stderr)


def cmd_selftest(args) -> None:
    from scipy import stats

    from .special import binomial_bound_F, gauss_radau

    checks = []
    rule = gauss_radau(4)
    checks.append(("quadrature", abs(rule.integrate(lambda t: t**6) - 1 / 7) < 1e-12 and rule.nodes[-1] == 1.0))
    ok = True
    for n in (10, 100):
        for p in (0.1, 0.5):
            for k in range(n):
                exact = stats.binom.cdf(k, n, p)
                ok &= binomial_bound_F(n, p, k) <= exact + 1e-15 <= binomial_bound_F(n, p, k + 1) + 2e-15
    checks.append(("binomial sandwich", bool(ok)))
    checks.append(("hash length", ev_hash_length(1e-15) == 50))
    t0 = time.perf_counter()
    small = (args.n_max or 4)
    spec = SweepSpec(losses_db=(1.0,), optimise=(), solver=args.solver)
    ev = PointEvaluator(params_from_config({}).with_updates(n_max=small), 1.0, spec)
    cert = ev.certified(ev.initial_settings()).cert
    checks.append((f"certified solve n_max={small} ({time.perf_counter() - t0:.1f}s)", cert.relative_gap < 1e-5))
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}")
    if not all(p for _, p in checks):
        raise RuntimeError("self-test failed")


COMMANDS = {
    "asymptotic": cmd_asymptotic,
    "keyrate": cmd_keyrate,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "dump-operators": cmd_dump_operators,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    warnings.simplefilter("ignore", UserWarning)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        group = getattr(exc, "group", None)
        if group:
            record["group"] = group
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
