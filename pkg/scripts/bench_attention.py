"""Multiply-add counts and median wall time of the attention kernel per reduction ratio.

    python scripts/bench_attention.py --tokens 4096 --channels 64 --reps 20
"""

import argparse

from catfa.bench import rows_to_csv, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--tokens", type=int, default=4096)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--reduction", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    rows = run_bench(args.tokens, args.channels, args.reduction, reps=args.reps)
    print(rows_to_csv(rows), end="")
    base = rows[0]
    for r in rows:
        print(f"R={r.reduction} {r.kernel:8s} MAC ratio {base.total_macs / r.total_macs:g}  "
              f"time ratio {base.median_s / r.median_s:.2f}")


if __name__ == "__main__":
    main()
