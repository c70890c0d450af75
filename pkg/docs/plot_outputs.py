"""Quick look at polaron-eet output tables.

    python docs/plot_outputs.py out/fig2dyn/dynamics.csv [more.csv ...] [--save fig.png]

The first column is the x axis; every other column except ``flag`` and
``status`` is drawn. Needs matplotlib, which the package itself does not use.
"""

import argparse
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np


def read(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    cols = lines[0].split(",")
    data = np.array([[float(v) for v in l.split(",")] for l in lines[1:]])
    return cols, data


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("tables", nargs="+")
    ap.add_argument("--save")
    args = ap.parse_args()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path in args.tables:
        cols, data = read(path)
        for k, name in enumerate(cols[1:], 1):
            if name in ("flag", "status"):
                continue
            ax.plot(data[:, 0], data[:, k], label=f"{Path(path).stem}: {name}")
        ax.set_xlabel(cols[0])
    ax.legend(fontsize=8)
    fig.tight_layout()
    if args.save:
        fig.savefig(args.save, dpi=150)
    else:
        plt.show()


if __name__ == "__main__":
    main()
