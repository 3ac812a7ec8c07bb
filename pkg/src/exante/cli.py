"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 a run that
violated an invariant (reported as FAILED).
"""
from __future__ import annotations

import argparse
import csv
import math
import sys

from .distributions import DistributionError
from .harness import (
    ConfigError,
    ExperimentConfig,
    confidence_z,
    emit_report,
    format_float,
    hardness_experiment,
    load_prophet,
    magician_trace,
    prophet_trials,
    read_probs,
    run_trials,
)
from .magician import ConfigurationError, WandBudgetExceeded, gamma_lower_bound, hardness_upper_bound
from .multi_buyer import MarketError
from .single_buyer import MechanismError
from .solver import SolverError

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline=""), True


def cmd_auction(args) -> int:
    cfg = ExperimentConfig(args.config, args.mechanism, args.trials, args.seed,
                           confidence=args.confidence, trace=args.trace)
    report = run_trials(cfg)
    emit_report(report, args.out, args.format)
    print(f"{report.status}: mean {format_float(report.mean)} "
          f"[{format_float(report.ci_lo)}, {format_float(report.ci_hi)}], "
          f"opt_bar {format_float(report.opt_bar_value)}, "
          f"violations {report.violations}, runtime {report.runtime:.2f}s", file=sys.stderr)
    return EXIT_FAILED if report.failed else EXIT_OK


def cmd_hardness(args) -> int:
    mean, half, bound = hardness_experiment(args.k, args.n, args.trials, args.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["k", "n", "trials", "empirical_ratio", "ci_halfwidth", "hardness_bound"])
    w.writerow([args.k, args.n, args.trials, format_float(mean), format_float(half), format_float(bound)])
    return EXIT_OK


def cmd_magician_trace(args) -> int:
    probs = read_probs(args.probs)
    fh, close = _out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "theta", "s"] + [f"phi_{w_}" for w_ in range(args.wands + 1)])
        for row in magician_trace(args.gamma, args.wands, probs):
            w.writerow([row[0], row[1]] + [format_float(x) for x in row[2:]])
    finally:
        if close:
            fh.close()
    return EXIT_OK


def cmd_gamma_table(args) -> int:
    if args.kmax < 1:
        raise ConfigError("kmax must be >= 1")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["k", "gamma_lower_bound", "hardness_upper_bound"])
    for k in range(1, args.kmax + 1):
        w.writerow([k, format_float(gamma_lower_bound(k)), format_float(hardness_upper_bound(k))])
    return EXIT_OK


def cmd_prophet(args) -> int:
    if args.trials < 1:
        raise ConfigError("trials must be >= 1")
    inst = load_prophet(args.config)
    gam, pro = prophet_trials(inst, args.trials, args.seed)
    fh, close = _out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "gambler_total", "prophet_total"])
        for t, (g, p) in enumerate(zip(gam, pro)):
            w.writerow([t, format_float(g), format_float(p)])
        ratio = gam.mean() / pro.mean() if pro.mean() > 0 else math.nan
        half = 0.0
        if args.trials > 1 and pro.mean() > 0:
            # delta method for a ratio of means
            resid = gam - ratio * pro
            half = confidence_z(0.999) * resid.std(ddof=1) / (pro.mean() * math.sqrt(args.trials))
        w.writerow(["mean", format_float(gam.mean()), format_float(pro.mean())])
        w.writerow(["ratio", format_float(ratio), format_float(half)])
    finally:
        if close:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="exante", description="Ex-ante relaxation auctions and magician experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("auction", help="simulate a rounding mechanism on a market")
    a.add_argument("--config", required=True)
    a.add_argument("--mechanism", choices=["pre", "post"], required=True)
    a.add_argument("--trials", type=int, default=100_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--format", choices=["csv", "json"], default="csv")
    a.add_argument("--confidence", type=float, default=0.999)
    a.add_argument("--trace", help="optional per-trial outcome CSV")
    a.set_defaults(func=cmd_auction)

    h = sub.add_parser("hardness", help="capacity-limited prize experiment")
    h.add_argument("--k", type=int, required=True)
    h.add_argument("--n", type=int, required=True)
    h.add_argument("--trials", type=int, required=True)
    h.add_argument("--seed", type=int, default=0)
    h.set_defaults(func=cmd_hardness)

    t = sub.add_parser("magician-trace", help="per-round magician state")
    t.add_argument("--gamma", type=float, required=True)
    t.add_argument("--wands", type=int, required=True)
    t.add_argument("--probs", required=True)
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_magician_trace)

    g = sub.add_parser("gamma-table", help="gamma lower bound and hardness bound per k")
    g.add_argument("--kmax", type=int, required=True)
    g.set_defaults(func=cmd_gamma_table)

    pr = sub.add_parser("prophet", help="k-choice prophet experiment")
    pr.add_argument("--config", required=True)
    pr.add_argument("--trials", type=int, default=100_000)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", default="-")
    pr.set_defaults(func=cmd_prophet)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except WandBudgetExceeded as exc:
        print(f"FAILED: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigError, ConfigurationError, MarketError, MechanismError,
            DistributionError, SolverError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
