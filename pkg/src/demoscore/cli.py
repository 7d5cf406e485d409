"""Command line entry point: ``demoscore run|ablate|calibrate|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .curator import DegenerateFilterError
from .envsim import CalibrationError, ConfigError
from .pipeline import (
    METHODS,
    ExperimentConfig,
    emit_report,
    episode_accounting,
    load_reports,
    pooled_table,
    run_ablation_suite,
    run_calibration,
    run_experiment,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3


def _load(path: str | None, out: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(path) if path else ExperimentConfig()
    if out:
        cfg = replace(cfg, output_dir=out)
    return cfg


def _print_table(reports) -> None:
    for variant, mixture, method, p, lo, hi in pooled_table(reports):
        print(f"{variant:14s} {mixture:22s} {method:15s} {p:6.3f}  [{lo:.3f}, {hi:.3f}]")


def cmd_run(args) -> int:
    cfg = _load(args.config, args.out)
    if args.method:
        cfg = replace(cfg, method=args.method)
    report = run_experiment(cfg)
    paths = emit_report([report], cfg.output_dir, figures=not args.no_figures)
    _print_table([report])
    for method, acct in episode_accounting(report).items():
        print(f"episodes[{method}]: {acct['curation_rollouts']} curation rollouts + {acct['eval']} eval = {acct['total']}")
    print(f"wrote {len(paths)} files to {cfg.output_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args.config, args.out)
    reports = run_ablation_suite(cfg, args.suite)
    emit_report(reports, cfg.output_dir, figures=not args.no_figures)
    _print_table(reports)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load(args.config)
    result = run_calibration(cfg, n_trials=args.trials, policy_check=not args.demos_only)
    print(json.dumps(result, indent=1))
    rates = result["demonstrators"]["success_rate"]
    ok = all(r >= 0.99 for r in rates.values())
    pol = result["policies"]
    if pol:
        n = len(cfg.seeds)
        narrow_ok = sum(r <= 0.5 for r in pol["NarrowB"]["success"]) > n / 2
        wide_ok = sum(r >= 0.9 for r in pol["WideA"]["success"]) > n / 2
        ok = ok and narrow_ok and wide_ok
    print("calibration", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else 1


def cmd_report(args) -> int:
    reports = load_reports(args.inp)
    out = args.out or args.inp
    emit_report(reports, out, figures=not args.no_figures)
    _print_table(reports)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demoscore", description="Demonstration curation from policy rollouts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one method (plus the base policy) over all replicate seeds")
    r.add_argument("--config")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--out")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run an ablation suite (table2, budget, classifier_size, all or a list)")
    a.add_argument("--config")
    a.add_argument("--suite", required=True)
    a.add_argument("--out")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("calibrate", help="check demonstrator and pure-strategy policy reliability")
    c.add_argument("--config")
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--demos-only", action="store_true")
    c.set_defaults(func=cmd_calibrate)

    rp = sub.add_parser("report", help="re-emit CSVs and figures from a report directory")
    rp.add_argument("--in", dest="inp", required=True)
    rp.add_argument("--out")
    rp.add_argument("--no-figures", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateFilterError as e:
        print(f"degenerate filter in stage {getattr(e, 'stage', '?')}: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except CalibrationError as e:
        print(f"calibration error in stage {getattr(e, 'stage', '?')}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
