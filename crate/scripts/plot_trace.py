#!/usr/bin/env python3
"""Plot a trajectory CSV written by `sampcert simulate`.

Draws the state components and, when the CSV carries them, V, Q and V+Q.
Sampling instants are marked with dotted vertical lines.

    sampcert simulate --system systems/ex1.json --T 1.7 --x0 3 --cert c.json --out trace.csv
    python3 scripts/plot_trace.py trace.csv -o trace.png
"""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("csv")
    ap.add_argument("-o", "--out", default="trace.png")
    ap.add_argument("--log", action="store_true", help="log scale for V")
    args = ap.parse_args()

    df = pd.read_csv(args.csv)
    states = [c for c in df.columns if c.startswith("x")]
    has_v = "V" in df.columns
    rows = 3 if has_v else 1
    fig, axes = plt.subplots(rows, 1, sharex=True, figsize=(8, 2.6 * rows + 1), squeeze=False)
    starts = df.groupby("k")["t"].min()

    ax = axes[0][0]
    for c in states:
        ax.plot(df["t"], df[c], label=c)
    ax.set_ylabel("state")
    ax.legend(loc="upper right")

    if has_v:
        # V on its own axis: Q is usually much larger in magnitude
        ax = axes[1][0]
        ax.plot(df["t"], df["V"], label="V")
        if args.log:
            ax.set_yscale("log")
        ax.set_ylabel("V")
        ax = axes[2][0]
        ax.plot(df["t"], df["Q"], label="Q", alpha=0.7)
        ax.plot(df["t"], df["VplusQ"], label="V + Q", linestyle="--")
        ax.set_ylabel("Q, V + Q")
        ax.legend(loc="lower right")

    for row in axes:
        for t in starts:
            row[0].axvline(t, color="grey", linestyle=":", linewidth=0.6)
    axes[-1][0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)


if __name__ == "__main__":
    main()
