#!/usr/bin/env python3
"""Render curves from a homogenization sweep CSV.

The sweep command writes plot-ready tables; this script draws one response
column against one swept column, one curve per value of a grouping column,
skipping failed rows.  Example:

    python3 tools/plot_sweep.py out/sweep.csv --x alpha_int --y KM_tt_xx \
        --group phi0 --logx --out conductivity_vs_contact.svg
"""

import argparse
import csv
import sys
from collections import defaultdict


def read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        sys.exit(f"no data rows in {path}")
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv_path")
    ap.add_argument("--x", required=True, help="swept column (x axis)")
    ap.add_argument("--y", default="KM_tt_xx", help="response column")
    ap.add_argument("--group", default=None,
                    help="draw one curve per value of this column")
    ap.add_argument("--logx", action="store_true")
    ap.add_argument("--logy", action="store_true")
    ap.add_argument("--out", default=None,
                    help="output image (default: <csv>.svg)")
    args = ap.parse_args(argv)

    rows = read_rows(args.csv_path)
    for col in filter(None, (args.x, args.y, args.group)):
        if col not in rows[0]:
            sys.exit(f"column {col!r} not in {sorted(rows[0])}")

    curves = defaultdict(list)
    n_failed = 0
    for row in rows:
        if row.get("status", "ok") != "ok":
            n_failed += 1
            continue
        key = row[args.group] if args.group else ""
        curves[key].append((float(row[args.x]), float(row[args.y])))
    if not curves:
        sys.exit("every row failed; nothing to plot")
    if n_failed:
        print(f"skipped {n_failed} failed rows", file=sys.stderr)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for key in sorted(curves):
        pts = sorted(curves[key])
        label = f"{args.group}={key}" if args.group else None
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                marker="o", label=label)
    if args.logx:
        ax.set_xscale("log")
    if args.logy:
        ax.set_yscale("log")
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.y)
    ax.grid(True, alpha=0.3)
    if args.group:
        ax.legend()
    out = args.out or args.csv_path.rsplit(".", 1)[0] + ".svg"
    fig.tight_layout()
    fig.savefig(out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
