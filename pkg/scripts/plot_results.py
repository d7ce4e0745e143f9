#!/usr/bin/env python3
"""Plot CSVs produced by the scalegraph CLI (convenience only).

Usage:
    python scripts/plot_results.py failure-prob fig.csv out.png
    python scripts/plot_results.py shard-size sizes.csv out.png
"""

import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_failure_prob(rows, out):
    xs = [int(r["r"]) for r in rows]
    fig, ax = plt.subplots()
    ax.semilogy(xs, [float(r["probability"]) for r in rows], "o-", label="observed")
    for column, label in (
        ("analytic_at_m", "analytic, m shards"),
        ("analytic_at_n", "analytic, N shards"),
        ("analytic_at_n_over_r", "analytic, N/r shards"),
    ):
        if column in rows[0]:
            ax.semilogy(xs, [float(r[column]) for r in rows], "--", label=label)
    ax.set_xlabel("shard size r")
    ax.set_ylabel("failure probability")
    ax.legend()
    fig.savefig(out, dpi=150, bbox_inches="tight")


def plot_shard_size(rows, out):
    ok = [r for r in rows if r["status"] == "ok"]
    fig, ax = plt.subplots()
    ax.semilogx(
        [int(r["N"]) for r in ok], [int(r["r"]) for r in ok], "o-", base=2
    )
    ax.set_xlabel("network size N")
    ax.set_ylabel("required shard size r")
    fig.savefig(out, dpi=150, bbox_inches="tight")


def main():
    if len(sys.argv) != 4 or sys.argv[1] not in ("failure-prob", "shard-size"):
        print(__doc__)
        return 2
    kind, path, out = sys.argv[1:]
    rows = load(path)
    if not rows:
        print("empty CSV")
        return 1
    if kind == "failure-prob":
        plot_failure_prob(rows, out)
    else:
        plot_shard_size(rows, out)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
