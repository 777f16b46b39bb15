"""Train full / A / C models for equal epochs on one synthetic dataset and compare."""

import argparse
import logging
import sys

from casfusion.config import load_config
from casfusion.experiments import ablation


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--count", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=16)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--models", nargs="+", default=["full", "A", "C"])
    ap.add_argument("overrides", nargs="*", metavar="key=value")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    run = load_config(args.config, dict(o.split("=", 1) for o in args.overrides))
    res = ablation(run, count=args.count, seeds=args.seeds, epochs=args.epochs, models=args.models)
    print("model seed cd miou seconds")
    for r in res.runs:
        print(f"{r.model} {r.seed} {r.cd:.6f} {r.miou:.4f} {r.seconds:.0f}")
    if {"full", "A"} <= set(args.models):
        print("full CD <= A per seed:", res.wins("cd", "full", "A"))
    if {"full", "C"} <= set(args.models):
        print("full mIoU >= C per seed:", res.wins("miou", "full", "C"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
