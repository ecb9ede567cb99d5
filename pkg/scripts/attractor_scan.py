"""Scan the scalar nmODE / nmODE^2 fields over gamma.

Writes equilibria.csv (every equilibrium found per gamma), a uniqueness report
from multi-start integration, and an SVG of the equilibrium branches.

    python scripts/attractor_scan.py --out runs/attractor
"""

import argparse
import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from meddet_kit.nmode import attractor_uniqueness, equilibria  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--deriv", default="nmode2", choices=("nmode", "nmode2"))
    ap.add_argument("--gamma-min", type=float, default=-6.0)
    ap.add_argument("--gamma-max", type=float, default=6.0)
    ap.add_argument("--points", type=int, default=241)
    ap.add_argument("--starts", type=int, default=8)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)

    gammas = np.linspace(args.gamma_min, args.gamma_max, args.points)
    rows = [(float(g), y) for g in gammas for y in equilibria(float(g), args.deriv)]
    with open(os.path.join(args.out, "equilibria.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "y"])
        w.writerows((f"{g:.6f}", f"{y:.9f}") for g, y in rows)

    report = attractor_uniqueness(gammas, args.deriv, starts=args.starts)
    with open(os.path.join(args.out, "uniqueness.txt"), "w") as fh:
        fh.write(f"{args.deriv}: {len(gammas)} gammas, {len(report.counterexamples)} with several attractors\n")
        for g, ends in report.counterexamples:
            fh.write(f"gamma {g:+.4f}: endpoints {sorted(set(round(e, 4) for e in ends))}\n")

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.scatter([r[0] for r in rows], [r[1] for r in rows], s=3)
    ax.set_xlabel("gamma")
    ax.set_ylabel("equilibrium y")
    ax.set_title(f"{args.deriv} equilibria")
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "meddet-kit"}):
        fig.savefig(os.path.join(args.out, "equilibria.svg"), format="svg", metadata={"Date": None})
    print(open(os.path.join(args.out, "uniqueness.txt")).read(), end="")


if __name__ == "__main__":
    main()
