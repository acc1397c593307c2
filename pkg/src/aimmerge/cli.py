"""Command line entry point: ``aimmerge run|report|selftest``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

from .exceptions import ConfigError, DivergenceError
from .harness import (
    ExperimentConfig, check_trajectory, emit_reports, read_metrics, read_trajectory, run_suite,
)
from .tasks import SequenceSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

log = logging.getLogger("aimmerge")


def _print_summary(rows, out=None):
    out = out or sys.stdout
    header = f"{'strategy':<20} {'runs':>4} {'OP':>8} {'BWT':>8} {'FWT':>8} {'merges':>7}"
    print(header, file=out)
    for r in rows:
        fwt = "" if r["FWT_mean"] is None else f"{r['FWT_mean']:8.4f}"
        print(f"{r['strategy']:<20} {r['n_runs']:>4} {r['OP_mean']:8.4f} {r['BWT_mean']:8.4f} "
              f"{fwt:>8} {r['merge_count_mean']:7.1f}", file=out)


def cmd_run(args):
    config = ExperimentConfig.load(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    if args.jobs is not None:
        config.n_jobs = args.jobs
    suite = run_suite(config, raise_on_error=False)
    emit_reports(suite.results, config.output_dir, config, errors=suite.errors)
    _print_summary(suite.summary)
    if suite.errors:
        for err in suite.errors:
            log.error("run diverged: %s", json.dumps(err, sort_keys=True))
        return EXIT_DIVERGENCE
    return EXIT_OK


def _summary_from_metrics(rows):
    by = {}
    for row in rows:
        by.setdefault(row["strategy"], []).append(row)
    out = []
    for strategy, runs in by.items():
        mean = lambda key: (sum(float(r[key]) for r in runs if r[key] != "") / len(runs)
                            if all(r[key] != "" for r in runs) else None)
        out.append({"strategy": strategy, "n_runs": len(runs), "OP_mean": mean("OP"),
                    "BWT_mean": mean("BWT"), "FWT_mean": mean("FWT"),
                    "merge_count_mean": mean("merge_count")})
    return out


def cmd_report(args):
    directory = Path(args.dir)
    try:
        rows = read_metrics(directory)
    except OSError as exc:
        print(f"cannot read {directory / 'metrics.csv'}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_summary(_summary_from_metrics(rows))
    return EXIT_OK


def selftest_config(output_dir):
    return ExperimentConfig(
        sequence=SequenceSpec(num_tasks=3, input_dim=8, classes_per_task=3, samples_per_task=120,
                              test_samples_per_task=60),
        hidden_dims=(16,), strategies=["aim", "fixed_interval(8)", "replay", "sequential"],
        epochs_per_task=2, memory_fraction=0.05, seeds=[0], output_dir=str(output_dir))


def cmd_selftest(args):
    with tempfile.TemporaryDirectory() as tmp:
        config = selftest_config(tmp)
        suite = run_suite(config)
        emit_reports(suite.results, tmp, config)
        for result in suite.results:
            records = read_trajectory(Path(tmp) / result.run_id / "trajectory.jsonl")
            merges = check_trajectory(records)
            assert merges == result.merge_count, f"{result.run_id}: merge count mismatch"
            if result.strategy in ("replay", "sequential"):
                assert merges == 0, f"{result.run_id} should never merge"
        first_task = [e for r in suite.results if r.strategy == "aim"
                      for e in r.merge_events if e.task_id == 1]
        assert all(e.alpha1 == 1.0 and e.alpha2 == 0.0 for e in first_task)
        _print_summary(suite.summary)
    print("selftest OK")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="aimmerge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the strategies and seeds listed in a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--output-dir", help="override output_dir from the config")
    run.add_argument("--jobs", type=int, help="parallel runs (overrides n_jobs)")
    run.set_defaults(func=cmd_run)
    report = sub.add_parser("report", help="summarise metrics.csv from a run directory")
    report.add_argument("--dir", required=True)
    report.set_defaults(func=cmd_report)
    selftest = sub.add_parser("selftest", help="quick end-to-end smoke test")
    selftest.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc} {json.dumps(exc.context, sort_keys=True)}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
