"""``safeope`` command-line entry point.

Exit codes: 0 success, 1 a verification check failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment
from .config import ConfigError, parse_assignment, resolve
from .synth import InconsistentProblemError, InfeasibleProblemError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path, JSON value); repeatable")
    common.add_argument("--output-dir", help="output directory")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--epsilon", type=float, help="safety slack")
    common.add_argument("--episodes", type=int, help="episodes per run")
    common.add_argument("--runs", type=int, help="runs per target policy")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--full", action="store_true",
                        help="full protocol: 30 target policies x 30 runs")

    p = argparse.ArgumentParser(prog="safeope", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="synthesize behavior policies")
    sub.add_parser("evaluate", parents=[common], help="run estimators and write curves")
    sub.add_parser("verify", parents=[common], help="oracle identity checks on small models")
    sub.add_parser("gen-offline", parents=[common], help="generate an offline dataset")
    sub.add_parser("fqe-synth", parents=[common], help="synthesize from offline data")
    return p


def _overrides(args) -> list:
    out = []
    for key, attr in (("output_dir", "output_dir"), ("seed", "seed"), ("epsilon", "epsilon"),
                      ("episodes", "episodes"), ("runs", "runs"), ("workers", "workers")):
        val = getattr(args, attr)
        if val is not None:
            out.append((key, val))
    out.extend(parse_assignment(s) for s in args.set)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.config, _overrides(args), full=args.full)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "synth":
            out = experiment.run_synth(cfg)
        elif args.command == "evaluate":
            out = experiment.run_evaluate(cfg)
            summary = json.loads((out / "summary.json").read_text())
            for est, row in summary["estimators"].items():
                print(f"{est:>10}  relative variance {row['relative_variance']:.3f}  "
                      f"relative cost {row['relative_cost']:.3f}  "
                      f"cost to accuracy {row['cost_to_accuracy']}")
        elif args.command == "verify":
            report, ok = experiment.run_verify(cfg)
            out = Path(cfg["output_dir"])
            out.mkdir(parents=True, exist_ok=True)
            (out / "verify.json").write_text(json.dumps(report, indent=1) + "\n")
            print(f"{report['checks'] - report['failed']}/{report['checks']} checks passed")
            for f in report["failures"][:20]:
                print(f"FAIL model={f['model']} {f['check']}")
            if not ok:
                return EXIT_CHECK_FAILED
        elif args.command == "gen-offline":
            out = experiment.run_gen_offline(cfg)
        else:
            out = experiment.run_fqe_synth(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleProblemError, InconsistentProblemError) as exc:
        print(f"solver error {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
