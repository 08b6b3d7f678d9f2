"""Median table over all optimizer configs in configs/ (baselines first).

    python3 scripts/reproduce_table.py [--format md|csv] [--seeds 0,1,2] [--out runs/table]

With the shipped configs this trains 6 optimizers x 5 seeds to 100% train
accuracy, which takes tens of minutes on one core; pass fewer seeds for a
quick look.
"""

import argparse
from pathlib import Path

from sharpkit.benchcli import compare, config, render_table

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--format", choices=["md", "csv"], default="md")
    p.add_argument("--seeds", default=None)
    p.add_argument("--out", default=None)
    args = p.parse_args()

    cfgs = [config.load(path) for path in sorted(CONFIGS.glob("*.cfg"))]
    if args.seeds:
        cfgs = [config.with_seeds(c, [int(s) for s in args.seeds.split(",")]) for c in cfgs]
    print(render_table(compare(cfgs, args.out), args.format), end="")


if __name__ == "__main__":
    main()
