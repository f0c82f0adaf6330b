"""Run the pinned desk-scale mix sweep (synthetic two-domain data) and print the results table.

    python3 scripts/run_desk_sweep.py --out-dir runs/desk [--seeds 0,1,2] [--variants student,student_kd]
"""
import argparse
import logging
import time
from pathlib import Path

from shiftkd.harness.desk import DESK_SEEDS, run_desk_protocol


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", default="runs/desk")
    p.add_argument("--seeds", default=",".join(map(str, DESK_SEEDS)))
    p.add_argument("--variants", default="student,student_kd")
    p.add_argument("--fractions", default=None, help="comma list; default is the eight standard fractions")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.perf_counter()
    table = run_desk_protocol(
        args.out_dir,
        fractions=[float(f) for f in args.fractions.split(",")] if args.fractions else None,
        seeds=[int(s) for s in args.seeds.split(",")],
        variants=tuple(args.variants.split(",")),
    )
    print(Path(table).read_text(), end="")
    print(f"wall time {time.perf_counter() - t0:.1f} s; curve at {Path(table).with_name('accuracy_vs_mix.png')}")


if __name__ == "__main__":
    main()
