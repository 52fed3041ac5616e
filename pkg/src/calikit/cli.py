"""Command-line entry point: ``calikit {train,eval,recal,lce-map}``.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
runtime and numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment as E
from .config import ConfigError, load

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calikit", description="Kernel calibration training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a forecaster from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--run-dir", help="output directory (defaults to the config's output_dir)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--repeats", type=int, default=1, help="train and evaluate this many consecutive seeds")
    t.add_argument("-v", "--verbose", action="store_true")

    e = sub.add_parser("eval", help="compute held-out metrics for a run")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--split", choices=E.SPLITS, default="test")
    e.add_argument("--out", help="metrics JSON path (defaults to <run-dir>/metrics_<split>.json)")

    r = sub.add_parser("recal", help="fit a post-hoc recalibration map on the validation split")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--method", choices=("isotonic", "temperature"), required=True)

    m = sub.add_parser("lce-map", help="write local calibration error over a 2-D feature grid")
    m.add_argument("--run-dir", required=True)
    m.add_argument("--features", required=True, help="two comma-separated feature names")
    m.add_argument("--grid", type=int, default=20)
    m.add_argument("--out", required=True)
    m.add_argument("--split", choices=E.SPLITS, default="test")
    return p


def _run(args) -> int:
    if args.command == "train":
        cfg = load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.repeats > 1:
            agg = E.repeat_runs(cfg, args.repeats, args.run_dir)
            for k, v in agg["metrics"].items():
                print(f"{k}: {v['mean']:.5f} +/- {v['stderr']:.5f}")
            return EXIT_OK
        res = E.train(cfg, args.run_dir, verbose=args.verbose)
        print(f"trained {res.manifest['training']['epochs_run']} epochs "
              f"(best {res.best_epoch}); wrote {res.run_dir}")
    elif args.command == "eval":
        report = E.evaluate_run(args.run_dir, args.split, args.out)
        print(report.summary())
    elif args.command == "recal":
        fitted = E.recalibrate_run(args.run_dir, args.method)
        print(json.dumps(fitted.to_dict())[:200])
    elif args.command == "lce-map":
        feats = [f.strip() for f in args.features.split(",") if f.strip()]
        E.lce_map_run(args.run_dir, feats, args.grid, args.out, args.split)
        print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (E.NumericalError, ArithmeticError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
