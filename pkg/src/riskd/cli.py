"""Command line entry point ``riskd``.

Exit codes: 0 success, 2 invalid configuration (including inputs that break
ergodicity or the contraction condition without ``--override``), 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, ContractionError, EnumerationLimitError, ErgodicityError, SolverError
from .harness import load_experiment, run_experiment
from .markov import load_chain, stationary_distribution
from .projected import load_features, solve_multistep, solve_single_step
from .risk import RiskMapping, distortion_coefficient
from .td import StepsizeSchedule, validate_schedule

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def cmd_run(args):
    cfg = load_experiment(args.config)
    out = args.out or cfg.output or "results"
    summary, failed = run_experiment(cfg, out, master_seed=args.seed, parallel=args.parallel, svg=args.svg)
    print(f"wrote {len(summary['cells'])} result file(s) and summary.json to {out}")
    for err in summary["errors"]:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_solve(args):
    chain = load_chain(_read_json(args.mdp))
    stat = stationary_distribution(chain)
    fm = load_features(_read_json(args.features), stat)
    try:
        risk = RiskMapping.from_dict(_read_json(args.risk))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{args.risk}: {exc!r}") from None
    report = distortion_coefficient(risk, chain.P, chain.alpha)
    if args.lam is None or args.lam == 0:
        sol = solve_single_step(fm, chain, risk, override=args.override, report=report)
    else:
        if not 0 < args.lam <= 1:
            raise ConfigError(f"--lambda must lie in [0, 1], got {args.lam}")
        sol = solve_multistep(fm, chain, risk, args.lam, override=args.override, report=report)
    doc = sol.to_dict()
    doc["stationary_distribution"] = stat.q.tolist()
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_check_schedule(args):
    doc = _read_json(args.schedule)
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.schedule}: expected an object with keys a, b, p")
    if args.horizon < 1000:
        raise ConfigError("--horizon must be at least 1000")
    try:
        sched = StepsizeSchedule.from_dict(doc)
        admissible = True
    except ConfigError:
        # still worth diagnosing: report which conditions a learner-rejected schedule breaks
        a, b, p = (float(doc.get(k, d)) for k, d in (("a", 1.0), ("b", 100.0), ("p", 1.0)))
        if set(doc) - {"a", "b", "p"} or not (a > 0 and b >= 1 and p > 0):
            raise
        sched = lambda t: a / (b + t) ** p  # noqa: E731
        admissible = False
    out = validate_schedule(sched, args.horizon).to_dict()
    out["admissible_for_learners"] = admissible
    print(json.dumps(out, indent=2))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="riskd", description="Risk-averse TD learning experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: config 'output' or ./results)")
    r.add_argument("--seed", type=int, help="override the master seed")
    r.add_argument("--parallel", type=int, default=1, help="worker processes")
    r.add_argument("--svg", action="store_true", help="also write minimal SVG line charts")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("solve", help="print the projected solution for a chain, features and risk mapping")
    s.add_argument("mdp")
    s.add_argument("features")
    s.add_argument("risk")
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.add_argument("--override", action="store_true", help="solve even if the contraction condition fails")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("check-schedule", help="spot-check the stepsize conditions")
    c.add_argument("schedule")
    c.add_argument("--horizon", type=int, required=True)
    c.set_defaults(func=cmd_check_schedule)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ErgodicityError, ContractionError, EnumerationLimitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
