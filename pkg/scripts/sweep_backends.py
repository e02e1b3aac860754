#!/usr/bin/env python3
"""Backend scaling sweep on synthetic graphs.

Times one energy+force step of each backend over a range of edge budgets at
fixed feature width, next to the modeled traffic of both pipelines and the
instrumented peak transient allocation. Prints a table and optionally
writes it as CSV.

Usage: python scripts/sweep_backends.py [--d 128] [--csv sweep.csv]
"""

import argparse

from flashcg.bench import measure_peak_alloc, time_pipelines
from flashcg.flash import io_model_base, io_model_flash


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--d", type=int, default=128)
    ap.add_argument("--blocks", type=int, default=3)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--csv", type=str, default=None)
    args = ap.parse_args()

    cells = [(250, 5_000), (500, 10_000), (1_000, 20_000),
             (2_500, 50_000), (2_500, 100_000)]
    header = (f"{'N':>6} {'E':>8} {'E/N':>5} {'ref ms':>8} {'flash ms':>9} "
              f"{'speedup':>8} {'IO ratio':>9} {'mem ratio':>10}")
    print(header)
    rows = []
    for n, e in cells:
        t = time_pipelines(n, e, d=args.d, t_blocks=args.blocks,
                           repeats=args.repeats)
        m = measure_peak_alloc(n, e, d=args.d, t_blocks=args.blocks)
        io_ratio = io_model_base(n, e, args.d, args.d // 2, args.blocks, 4) \
            / io_model_flash(n, e, args.d, args.d // 2, args.blocks, 4)
        row = (n, e, e / n, t["reference_seconds"] * 1e3,
               t["flash_seconds"] * 1e3, t["speedup"], io_ratio, m["ratio"])
        rows.append(row)
        print(f"{n:>6} {e:>8} {e / n:>5.0f} {row[3]:>8.1f} {row[4]:>9.1f} "
              f"{row[5]:>8.2f} {io_ratio:>9.2f} {m['ratio']:>10.1f}")

    if args.csv:
        with open(args.csv, "w") as f:
            f.write("# flashcg-sweep v1\n")
            f.write("N,E,E_per_N,ref_ms,flash_ms,speedup,io_ratio,mem_ratio\n")
            for row in rows:
                f.write(",".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                                 for v in row) + "\n")
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
