"""Print the domain-mix statistics table for given pool sizes (defaults: 18573 source, 10100 target).

    python3 scripts/reproduce_mix_table.py [--source 18573] [--target 10100] [--out mix_stats.csv]
"""
import argparse
import sys

from shiftkd.mix import STANDARD_FRACTIONS, MixSpec, resolve_mix, write_mix_stats


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--source", type=int, default=18573)
    p.add_argument("--target", type=int, default=10100)
    p.add_argument("--fractions", default=",".join(map(str, STANDARD_FRACTIONS)))
    p.add_argument("--out", help="also write the table as CSV")
    args = p.parse_args()
    rows = [(float(f), resolve_mix(MixSpec(float(f), args.source, args.target))) for f in args.fractions.split(",")]
    w = sys.stdout.write
    w(f"{'mix %':>6} {'target':>7} {'source':>7} {'total':>7} {'achieved':>9}\n")
    for f, r in rows:
        w(f"{f * 100:6g} {r.n_target:7d} {r.n_source:7d} {r.total:7d} {r.achieved_fraction:9.4f}\n")
    if args.out:
        write_mix_stats(rows, args.out)


if __name__ == "__main__":
    main()
