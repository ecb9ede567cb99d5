"""Trend experiments on the default synthetic benchmark.

Trains the three teachers once (or reuses saved checkpoints), then runs a grid of
student variants over several seeds and writes ablation.csv, summary.md and plots.

    python scripts/run_benchmark.py --out runs/trend
    python scripts/run_benchmark.py --grid placement --seeds 0 1 2 --out runs/placement
"""

import argparse
import json
import logging
import os
import time

import numpy as np

from meddet_kit import pipeline as pl
from meddet_kit.checkpoint import load, save
from meddet_kit.cli import PRESETS
from meddet_kit.config import DistillConfig, load_config, with_overrides
from meddet_kit.detnet import TEACHER_ROLES
from meddet_kit.plotting import plot

GRIDS = {
    "trend": {"alone": {"distillation": False, "use_nmode2": False}, "full": {},
              "backbone": {"nmode2_placement": ["backbone"]}},
    **PRESETS,
}


def teachers_for(cfg, data, directory):
    os.makedirs(directory, exist_ok=True)
    out = {}
    for role in TEACHER_ROLES:
        path = os.path.join(directory, f"{role}.ckpt")
        if os.path.exists(path):
            out[role] = load(path)
        else:
            res = pl.train_teacher(cfg, role, data)
            save(res.checkpoint, path)
            out[role] = res.checkpoint
    return out


def summary_table(res, grid, seeds) -> str:
    lines = ["| variant | " + " | ".join(f"seed {s}" for s in seeds) + " | mean | std |",
             "|---" * (len(seeds) + 3) + "|"]
    for name in grid:
        vals = [res.reports[(name, s)].map_50 for s in seeds if (name, s) in res.reports]
        cells = [f"{res.reports[(name, s)].map_50:.4f}" if (name, s) in res.reports else "failed" for s in seeds]
        mean = f"{np.mean(vals):.4f}" if vals else "nan"
        std = f"{np.std(vals):.4f}" if vals else "nan"
        lines.append(f"| {name} | " + " | ".join(cells) + f" | {mean} | {std} |")
    return "\n".join(lines) + "\n"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="trend", choices=sorted(GRIDS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config", help="JSON config (default: shipped defaults)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="JSON-valued override")
    ap.add_argument("--teachers", help="directory for teacher checkpoints (default: OUT/teachers)")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else DistillConfig()
    cfg = with_overrides(cfg, {k: json.loads(v) for k, v in (s.split("=", 1) for s in args.set)})
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    data = pl.make_data(cfg)
    teachers = teachers_for(cfg, data, args.teachers or os.path.join(args.out, "teachers"))
    grid = GRIDS[args.grid]
    res = pl.ablate(cfg, grid, args.seeds, teacher_ckpts=teachers, data=data)
    seconds = time.perf_counter() - t0

    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(res.csv)
    with open(os.path.join(args.out, "summary.md"), "w") as fh:
        fh.write(f"test mAP@0.5, grid `{args.grid}`, {seconds / 60:.1f} min\n\n")
        fh.write(summary_table(res, grid, args.seeds))
    pl.write_json(pl.run_metadata(cfg, grid=grid, seeds=args.seeds, seconds=seconds, failures=res.failures),
                  os.path.join(args.out, "metadata.json"))
    plot(csv_path, os.path.join(args.out, "plots"))
    print(summary_table(res, grid, args.seeds))


if __name__ == "__main__":
    main()
