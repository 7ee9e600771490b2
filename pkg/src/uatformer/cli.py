"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration, 2 a certification or check
failed, 3 I/O failure.
"""

import argparse
import logging
import sys

from .experiments import ConfigError, ExperimentConfig, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3


def _common(p):
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out-dir", dest="out_dir", help="directory for reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uatformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("construct", help="build a certified lookup transformer")
    _common(p)
    p.add_argument("--target", choices=["sin2d", "memorize"], default="sin2d")
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--max-resolution", dest="max_resolution", type=int)
    p.add_argument("--test-factor", dest="test_factor", type=int)
    p.add_argument("--n-pairs", dest="n_pairs", type=int)

    p = sub.add_parser("train", help="train a block with Adam / SGD")
    _common(p)
    p.add_argument("--task", choices=["sort", "sin"], default="sort")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=["gd", "sgd", "adam"])
    p.add_argument("--n-samples", dest="n_samples", type=int)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    _common(p)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--step", type=float)

    p = sub.add_parser("sweep", help="empirical sup error vs resolution / delta / mode")
    _common(p)
    p.add_argument("--resolutions", dest="sweep_resolutions", type=int, nargs="+")
    p.add_argument("--deltas", dest="sweep_deltas", type=float, nargs="+")
    p.add_argument("--grid", dest="sweep_grid", type=int)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    _common(p)
    p.add_argument("config")
    return parser


_TRAIN_FLAGS = {"steps": "steps", "lr": "learning_rate", "batch_size": "batch_size", "optimizer": "optimizer"}


def config_from_args(args) -> ExperimentConfig:
    if args.command == "run":
        data = ExperimentConfig.from_json(args.config).__dict__.copy()
    elif args.command == "construct":
        data = {"experiment": args.target}
    elif args.command == "train":
        data = {"experiment": f"{args.task}-train"}
    else:
        data = {"experiment": args.command}
    train = dict(data.get("train") or {})
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "target", "task", "verbose"):
            continue
        if key in _TRAIN_FLAGS:
            train[_TRAIN_FLAGS[key]] = value
        else:
            data[key] = value
    data["train"] = train
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(result.summary)
    for path in result.files:
        print(f"wrote {path}")
    return EXIT_OK if result.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
