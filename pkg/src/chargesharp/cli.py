"""``chargesharp`` command line: run, percolation, hydro, fit, oracle.

Defaults may come from an INI file (``--config``) with one section per
subcommand; keys use the long flag names without dashes.  Flags given on the
command line win.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, experiment
from .circuit import MODES, SpecError
from .filter import DegenerateStateError
from .hydro import HydroInstability
from .oracles import OracleSizeError
from .percolation import RULES

log = logging.getLogger("chargesharp")


def parse_grid(text: str) -> list[float]:
    """``a:b:step`` (inclusive of b) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"grid {text!r} is not of the form a:b:step")
        a, b, step = (float(s) for s in parts)
        if step <= 0 or b < a:
            raise argparse.ArgumentTypeError(f"grid {text!r} needs step > 0 and b >= a")
        n = int(round((b - a) / step)) + 1
        return [round(a + k * step, 10) for k in range(n)]
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse grid {text!r}") from None


def parse_ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse integer list {text!r}") from None


def parse_window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(s) for s in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window {text!r} is not of the form lo:hi") from None
    return lo, hi


def _common(sp, out_default):
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--workers", type=int, default=1,
                    help=f"process count (overridden by ${experiment.WORKERS_ENV})")
    sp.add_argument("--out", type=Path, default=Path(out_default))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chargesharp",
                                 description="Charge-sharpening simulations: run, percolation, hydro, fit, oracle.")
    ap.add_argument("--config", type=Path, help="INI file with per-command defaults")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="steady-state trajectory sweep")
    run.add_argument("--L", type=int)
    run.add_argument("--Ls", type=parse_ints)
    run.add_argument("--p", type=float)
    run.add_argument("--pGrid", type=parse_grid)
    run.add_argument("--trajectories", type=int, default=100)
    run.add_argument("--mode", choices=MODES, default="projective")
    run.add_argument("--gamma", type=float, default=0.0)
    run.add_argument("--dt", type=float, default=0.0)
    run.add_argument("--burnIn", type=int, help="steps before the first snapshot (default 4L)")
    run.add_argument("--snapshotEvery", type=int, help="steps between snapshots (default L)")
    run.add_argument("--snapshots", type=int, default=10)
    run.add_argument("--batches", type=int, default=20, help="trajectory batches for the bootstrap")
    _common(run, "out/run")

    perc = sub.add_parser("percolation", help="wrapping probabilities and scaling collapse")
    perc.add_argument("--L", type=int)
    perc.add_argument("--Ls", type=parse_ints)
    perc.add_argument("--p", type=float)
    perc.add_argument("--pGrid", type=parse_grid)
    perc.add_argument("--realizations", type=int, default=2000)
    perc.add_argument("--depth", type=int, help="full steps (default 2L)")
    perc.add_argument("--rule", action="append", choices=RULES,
                      help="repeatable; default: outcome and measured")
    _common(perc, "out/percolation")

    hyd = sub.add_parser("hydro", help="structure-factor steady states")
    hyd.add_argument("--p", type=float)
    hyd.add_argument("--pGrid", type=parse_grid)
    hyd.add_argument("--kMin", type=float, default=1e-3)
    hyd.add_argument("--kMax", type=float, default=1e-2)
    hyd.add_argument("--nk", type=int, default=20, help="log-spaced k points")
    hyd.add_argument("--B", type=float, default=1.0)
    hyd.add_argument("--D", type=float, default=1.0)
    hyd.add_argument("--kappa", type=float, default=1.0)
    hyd.add_argument("--out", type=Path, default=Path("out/hydro"))

    fit = sub.add_parser("fit", help="fit run results: exponents, stiffness, threshold")
    fit.add_argument("inputs", nargs="*", type=Path, help="result files or directories")
    fit.add_argument("--window", type=parse_window, help="lo:hi (default 2:L/4)")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", type=Path, help="write the JSON report here")

    orc = sub.add_parser("oracle", help="Monte Carlo against exact enumeration")
    orc.add_argument("--L", type=int, default=4)
    orc.add_argument("--depth", type=int, default=2)
    orc.add_argument("--p", type=float, default=0.5)
    orc.add_argument("--trajectories", type=int, default=10000)
    _common(orc, "out/oracle")
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, rest = pre.parse_known_args(argv)
    if known.config is None:
        return
    cfg = configparser.ConfigParser()
    cfg.optionxform = str
    if not cfg.read(known.config, encoding="utf-8"):
        raise ValueError(f"cannot read config file {known.config}")
    sub = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub.choices.items():
        if not cfg.has_section(name):
            continue
        actions = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, raw in cfg.items(name):
            if key not in actions:
                raise ValueError(f"config [{name}]: unknown key {key!r}")
            act = actions[key]
            conv = act.type or str
            if isinstance(act, argparse._AppendAction):
                defaults[key] = [conv(v.strip()) for v in raw.split(",")]
            else:
                defaults[key] = conv(raw)
        sp.set_defaults(**defaults)


def _sizes(args) -> list[int]:
    Ls = args.Ls or ([args.L] if args.L is not None else None)
    if not Ls:
        raise ValueError("give --L or --Ls")
    return Ls


def _probs(args) -> list[float]:
    ps = args.pGrid or ([args.p] if args.p is not None else None)
    if not ps:
        raise ValueError("give --p or --pGrid")
    return ps


def cmd_run(args) -> int:
    workers = experiment.resolve_workers(args.workers)
    paths = experiment.run_sweep(_sizes(args), _probs(args), args.out, workers,
                                 trajectories=args.trajectories, seed=args.seed, mode=args.mode,
                                 gamma=args.gamma, dt=args.dt, burn_in=args.burnIn,
                                 snapshot_every=args.snapshotEvery, snapshots=args.snapshots,
                                 batches=args.batches)
    for p in paths:
        print(p.with_suffix(".csv"))
    return 0


def cmd_percolation(args) -> int:
    workers = experiment.resolve_workers(args.workers)
    if args.realizations < 1:
        raise ValueError("--realizations must be >= 1")
    rules = tuple(args.rule or ("outcome", "measured"))
    res = experiment.percolation_sweep(_sizes(args), _probs(args), args.out, args.realizations,
                                       args.seed, rules, args.depth, workers)
    for rule, r in res.items():
        rep = r["report"]
        line = f"{rule}: crossing_mean={rep['crossing_mean']}"
        if "argmin" in rep:
            line += f" collapse p_c={rep['argmin']['p_c']:.4f} nu={rep['argmin']['nu']:.3f}"
        print(line)
        print(args.out / f"wrap_{rule}.csv")
    return 0


def cmd_hydro(args) -> int:
    if args.nk < 2 or not 0 < args.kMin < args.kMax:
        raise ValueError("need 0 < kMin < kMax and nk >= 2")
    k = np.geomspace(args.kMin, args.kMax, args.nk)
    path = experiment.write_hydro(args.out, _probs(args), k.tolist(), B=args.B, D=args.D, kappa=args.kappa)
    print(path)
    return 0


def cmd_fit(args) -> int:
    points = experiment.collect_points(args.inputs)
    report = experiment.fit_sweep(points, args.window, seed=args.seed)
    print(f"{'L':>4} {'p':>7} {'alpha':>8} {'rho_varq':>10} {'rho_cw':>10} {'rho':>10} agree")
    for r in report["points"]:
        print(f"{r['L']:>4} {r['p']:>7.4f} {r['alpha']:>8.3f} {r['rho_varq']:>10.4f} "
              f"{r['rho_cw']:>10.4f} {r['rho']:>10.4f} {r['methods_agree_2sigma']}")
    for L, th in report["thresholds"].items():
        if "p_sharp" in th:
            print(f"L={L}: p_sharp = {th['p_sharp']:.4f} +/- {th['p_sharp_err']:.4f}")
        else:
            print(f"L={L}: {th['error']}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_oracle(args) -> int:
    workers = experiment.resolve_workers(args.workers)
    res = experiment.oracle_compare(args.L, args.depth, args.p, args.trajectories, args.seed, workers)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"oracle_L{args.L}_d{args.depth}_p{args.p:.4f}.json"
    path.write_text(json.dumps(res, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"{res['branches']} branches, {res['trajectories']} trajectories")
    for r in res["rows"]:
        print(f"{r['observable']:<12} exact={r['exact']:+.6f} mc={r['monte_carlo']:+.6f} "
              f"+/- {r['stderr']:.6f} z={r['z']:+.2f}")
    return 0 if all(r["within_3sigma"] for r in res["rows"]) else 3


COMMANDS = {"run": cmd_run, "percolation": cmd_percolation, "hydro": cmd_hydro,
            "fit": cmd_fit, "oracle": cmd_oracle}

_EXPECTED = (experiment.ExperimentError, SpecError, analysis.WindowError, analysis.ThresholdError,
             DegenerateStateError, HydroInstability, OracleSizeError, ValueError, OSError)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        _apply_config(ap, argv)
    except (ValueError, configparser.Error) as exc:
        print(f"chargesharp: error: {exc}", file=sys.stderr)
        return 2
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _EXPECTED as exc:
        print(f"chargesharp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
