"""Command line entry point: ``fedlog run | report | prepare-mnist``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from fedlog import _backend, experiment


def _overrides(args):
    values = {
        "rounds": args.rounds,
        "local_epochs": args.local_epochs,
        "seeds": args.seed_list,
        "workers": args.workers,
    }
    return {k: str(v) for k, v in values.items() if v is not None}


def cmd_run(args):
    base = experiment.read_config_text(Path(args.config).read_text())
    base.update(_overrides(args))
    algorithms = (args.algorithm or base.get("algorithm", "fedlog")).split(",")
    configs = []
    for alg in algorithms:
        configs.append(experiment.config_from_mapping({**base, "algorithm": alg.strip()}))
    out = Path(args.out)
    for config in configs:
        rows = experiment.run_experiment(config)
        path = experiment.write_metrics(rows, out / f"{config.algorithm}.csv", config)
        print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_report(args):
    directory = Path(args.input)
    files = sorted(directory.glob("*.csv"))
    if not files:
        print(f"no metrics CSV files in {directory}", file=sys.stderr)
        return 2
    rows = []
    for path in files:
        rows.extend(experiment.read_metrics(path))
    print(experiment.summary_report(rows, args.threshold), end="")
    return 0


def cmd_prepare_mnist(args):
    from fedlog.data import prepare_mnist_subset

    out = prepare_mnist_subset(args.out, args.per_class, args.seed)
    print(f"wrote IDX files to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fedlog", description=__doc__)
    parser.add_argument("--backend", choices=("cython", "python"), help="kernel implementation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--algorithm", help="fedlog, fedavg, lgfedavg1, or a comma list")
    run.add_argument("--rounds", type=int)
    run.add_argument("--local-epochs", type=int)
    run.add_argument("--seed-list", help="e.g. 0,1,2 or 0-9")
    run.add_argument("--workers", type=int, help="threads for concurrent client training")
    run.add_argument("--out", default="results")
    run.set_defaults(func=cmd_run)

    report = sub.add_parser("report", help="summarize metrics CSV files in a directory")
    report.add_argument("--in", dest="input", required=True)
    report.add_argument("--threshold", type=float, default=0.01, help="significance level to mark")
    report.set_defaults(func=cmd_report)

    prep = sub.add_parser("prepare-mnist", help="write the bundled MNIST sample as IDX files")
    prep.add_argument("--out", required=True)
    prep.add_argument("--per-class", type=int, default=300, help="training images per digit")
    prep.add_argument("--seed", type=int, default=0)
    prep.set_defaults(func=cmd_prepare_mnist)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.backend:
        _backend.use(args.backend)
    try:
        return args.func(args)
    except experiment.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
