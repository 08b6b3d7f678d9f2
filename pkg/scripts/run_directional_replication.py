"""Adam vs SAM on two moons over five seeds, trained to 100% train accuracy.

Prints the median table and whether SAM ends flatter (smaller Hessian trace)
without losing more than half a point of test accuracy.

    python3 scripts/run_directional_replication.py [--out runs/replication]
"""

import argparse
import time
from pathlib import Path

from sharpkit.benchcli import aggregate, config, render_table, run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=None, help="directory for records and curves")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: from config)")
    args = p.parse_args()

    rows = []
    t0 = time.perf_counter()
    for name in ("adam", "sam"):
        cfg = config.load(CONFIGS / f"{name}.cfg")
        if args.seeds:
            cfg = config.with_seeds(cfg, [int(s) for s in args.seeds.split(",")])
        records = run_experiment(cfg, args.out)
        for r in records:
            print(f"{cfg.display_name:5s} seed={r.seed} epochs={r.epochs_used} "
                  f"test_acc={r.test_accuracy:.3f} trace={r.spectrum.trace:.3f}")
        rows.append(aggregate(cfg.display_name, records))
    print()
    print(render_table(rows, "md"))
    adam, sam = rows
    flatter = sam.hessian_trace < adam.hessian_trace
    accurate = sam.test_accuracy_pct >= adam.test_accuracy_pct - 0.5
    print(f"SAM flatter: {flatter}; accuracy within 0.5 points: {accurate}; "
          f"{(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
