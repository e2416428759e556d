"""Command-line entry point: ``entlab <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .fitlab import fit_prefix, read_curve
from .harness import (
    OUT_ENV,
    PLOT_KINDS,
    ConfigError,
    cov_report,
    emit_plot_data,
    fit_and_predict,
    resolve_config,
    run_experiment,
    steps_path,
    verify_dynamics,
)

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="entlab", description="Entropy dynamics of policy-gradient RL on tabular softmax policies.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log config overrides and progress")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train one configured run and write its outputs")
    run.add_argument("--config", help="flat key=value config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="run directory")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")

    ver = sub.add_parser("verify-dynamics", help="check first-order entropy dynamics on random bandits")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--instances", type=int, default=100)
    ver.add_argument("--fault", action="store_true", help="double every applied logit change (negative control)")

    fit = sub.add_parser("fit", help="fit R = -a exp(H) + b and print the result as JSON")
    fit.add_argument("source", help="run directory, steps.csv, or an entropy,val_reward CSV")
    fit.add_argument("--fraction", type=float, default=1.0, help="fit on this leading fraction of rows")

    pred = sub.add_parser("predict", help="fit on a run prefix, predict the rest, write predictions.csv")
    pred.add_argument("source", help="run directory or CSV")
    pred.add_argument("--fraction", type=float, default=0.15)
    pred.add_argument("--out", help="directory for predictions.csv and fit.json (default: beside the source)")

    plot = sub.add_parser("plot-data", help="write plot-ready TSV files")
    plot.add_argument("runs", nargs="+", help="run directories")
    plot.add_argument("--kind", action="append", choices=PLOT_KINDS, help="repeatable; default: all kinds")
    plot.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/plots or runs/plots)")

    cov = sub.add_parser("cov-report", help="print token-covariance quantile rows for a run")
    cov.add_argument("run", help="run directory")
    return ap


def _cmd_run(args) -> int:
    cfg, sources = resolve_config(args.config, args.set, seed=args.seed, out=args.out)
    out = run_experiment(cfg, sources)
    print(out)
    return EXIT_OK


def _cmd_verify(args) -> int:
    if args.instances < 1:
        raise ConfigError("--instances must be >= 1")
    report = verify_dynamics(args.seed, args.instances, args.fault)
    print(report.format())
    if not report.ok:
        print("FAILED: " + ", ".join(report.failed), file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _cmd_fit(args) -> int:
    src = steps_path(args.source)
    if not src.exists():
        raise FileNotFoundError(f"missing input: {src}")
    _, h, r = read_curve(src)
    fit, _, _ = fit_prefix(h, r, args.fraction)
    print(fit.to_json())
    return EXIT_OK


def _cmd_predict(args) -> int:
    fit, rmse = fit_and_predict(args.source, args.fraction, args.out)
    print(json.dumps({**json.loads(fit.to_json()), "heldout_rmse": rmse}))
    return EXIT_OK


def _cmd_plot(args) -> int:
    out = args.out or str(Path(os.environ.get(OUT_ENV, "runs")) / "plots")
    for kind in args.kind or PLOT_KINDS:
        print(emit_plot_data(args.runs, kind, out))
    return EXIT_OK


def _cmd_cov(args) -> int:
    rows = cov_report(args.run)
    for label, mean in rows:
        print(f"{label}\t{mean:.6g}")
    means = [m for _, m in rows]
    if any(a < b for a, b in zip(means, means[1:])):
        print("FAILED: quantile means are not non-increasing", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "verify-dynamics": _cmd_verify,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "plot-data": _cmd_plot,
    "cov-report": _cmd_cov,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"entlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
