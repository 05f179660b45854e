"""Model-size sweep on desk-scale synthetic data (distill vs scratch per student rung).

Usage: python3 scripts/size_sweep.py [--seeds 5] [--out results/size]
"""
import argparse
import logging
import time
from pathlib import Path

from capsdistill.experiments import DeskSetup, desk_dataset, pretrain_teachers, size_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="results/size")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = DeskSetup()
    t0 = time.perf_counter()
    ds = desk_dataset(setup)
    teachers = pretrain_teachers(setup, ds, args.jobs)
    tables = size_trend(setup, ds, teachers, range(args.seeds), jobs=args.jobs)
    out = Path(args.out)
    for seed, tab in enumerate(tables):
        tab.write_csv(out / f"size_seed{seed}.csv")
        print(f"seed {seed}:", {k: {a: round(v, 3) for a, v in d.items()} for k, d in tab.pivot("accuracy").items()})
    print(f"total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
