"""Command line entry point: ``meddet-kit <command> [flags]``.

Exit codes: 0 success, 1 validation error, 2 runtime or training error.
Diagnostics go to stderr; machine outputs go to the paths named by ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckio
from . import gradsuite, nmode, pipeline, plotting
from .config import DistillConfig, load_config, to_dict, with_overrides
from .detnet import ROLES, TEACHER_ROLES, ConfigError
from .evalmetrics import report_csv
from .numcore import ContractError, NumericError
from .synthdata import GenerationError, SyntheticDataset, export_dataset

THREADS_ENV = "MEDDET_KIT_THREADS"

PRESETS = {
    "components": {
        "baseline": {"distillation": False, "use_nmode2": False},
        "+nmode2": {"distillation": False, "use_nmode2": True},
        "+nmode2+lwff": {"use_nmode2": True, "fusion": "lwff", "use_aatm": False},
        "+nmode2+lwff+aatm": {"use_nmode2": True, "fusion": "lwff", "use_aatm": True},
    },
    "placement": {
        "backbone": {"nmode2_placement": ["backbone"]},
        "fpn": {"nmode2_placement": ["fpn"]},
        "head": {"nmode2_placement": ["head"]},
    },
    "fusion": {
        "sum": {"fusion": "sum"},
        "concat": {"fusion": "concat"},
        "lwff": {"fusion": "lwff"},
    },
}


class ValidationError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _threads(value) -> int:
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"invalid thread count {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return n


def _override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_parser() -> Parser:
    p = Parser(prog="meddet-kit", description="Multi-teacher distillation toolkit for small-object detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, seed_required=False, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file (defaults are used when omitted)")
            sp.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                            metavar="KEY=VALUE", help="override a scalar config field")
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--threads", type=_threads, default=None)

    sp = sub.add_parser("train-teacher", help="pretrain one teacher on the detection loss")
    common(sp, seed_required=True)
    sp.add_argument("--role", required=True, choices=TEACHER_ROLES)
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("distill", help="distil the student from three frozen teachers")
    common(sp, seed_required=True)
    sp.add_argument("--teachers", nargs=3, required=True, metavar="CKPT",
                    help="checkpoints for teacher_small, teacher_mid, teacher_large")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--role", default="student", choices=ROLES)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--variant", default="eval")
    sp.add_argument("--out", required=True, help="metrics CSV path")

    sp = sub.add_parser("ablate", help="run a grid of variants over several seeds")
    common(sp, seed_required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", help="JSON object: variant name -> scalar overrides")
    g.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--seeds", type=int, nargs="+", help="run seeds (default: --seed, --seed+1, --seed+2)")
    sp.add_argument("--teachers", nargs=3, metavar="CKPT")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--module", default="all", help=f"all, one of {gradsuite.MODULES}, or a case name")
    sp.add_argument("--precision", type=int, default=64, choices=(32, 64))
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="optional CSV of per-case results")

    sp = sub.add_parser("dynamics", help="integrate nmODE / nmODE^2 and write the trajectory")
    sp.add_argument("--gamma", type=float, nargs="+", required=True)
    sp.add_argument("--y0", type=float, nargs="+", default=None)
    sp.add_argument("--deriv", choices=sorted(nmode.FIELDS), default="nmode2")
    sp.add_argument("--method", choices=("rk4", "euler"), default="rk4")
    sp.add_argument("--step", type=float, default=0.125)
    sp.add_argument("--t-end", type=float, default=20.0)
    sp.add_argument("--out", required=True, help="trajectory CSV path")

    sp = sub.add_parser("gen-data", help="render and export a synthetic split")
    common(sp)
    sp.add_argument("--split", default="all", choices=("train", "val", "test", "all"))
    sp.add_argument("--out", required=True, help="output directory for .mdds files")

    sp = sub.add_parser("plot", help="SVG bars/curves and a tidy CSV from a metrics CSV")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--history", nargs="*", default=[], metavar="NAME=CSV")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _config(args) -> tuple[DistillConfig, dict]:
    cfg = load_config(args.config) if args.config else DistillConfig()
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = _threads(os.environ[THREADS_ENV])
        except argparse.ArgumentTypeError as e:
            raise ValidationError(f"{THREADS_ENV}: {e}") from None
    if threads is not None:
        overrides["threads"] = threads
    return (with_overrides(cfg, overrides) if overrides else cfg), overrides


def _load_teachers(paths) -> dict:
    return {role: ckio.load(p) for role, p in zip(TEACHER_ROLES, paths)}


def _write_history(history, path) -> None:
    keys = sorted({k for r in history for k in r}, key=lambda k: (k != "epoch", k))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in history:
            w.writerow([repr(float(r.get(k, float("nan")))) for k in keys])


def _write_text(path, text) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _split(data: pipeline.Data, name: str) -> SyntheticDataset:
    return getattr(data, name)


def cmd_train_teacher(args) -> int:
    cfg, overrides = _config(args)
    os.makedirs(args.out, exist_ok=True)
    data = pipeline.make_data(cfg)
    res = pipeline.train_teacher(cfg, args.role, data)
    ckio.save(res.checkpoint, os.path.join(args.out, f"{args.role}.ckpt"))
    rep = pipeline.evaluate_network(res.network, data.test, cfg)
    _write_text(os.path.join(args.out, "metrics.csv"), report_csv([rep.csv_row(f"{args.role}-seed{cfg.seed}", args.role)]))
    _write_history(res.history, os.path.join(args.out, "history.csv"))
    pipeline.write_json(pipeline.run_metadata(cfg, overrides, command="train-teacher", role=args.role,
                                              seconds=res.seconds), os.path.join(args.out, "metadata.json"))
    return 0


def cmd_distill(args) -> int:
    cfg, overrides = _config(args)
    teachers = _load_teachers(args.teachers)
    os.makedirs(args.out, exist_ok=True)
    data = pipeline.make_data(cfg)
    res = pipeline.distill(cfg, teachers, data)
    ckio.save(res.checkpoint, os.path.join(args.out, "student.ckpt"))
    rep = pipeline.evaluate_network(res.network, data.test, cfg)
    _write_text(os.path.join(args.out, "metrics.csv"), report_csv([rep.csv_row(f"distill-seed{cfg.seed}", "distill")]))
    _write_history(res.history, os.path.join(args.out, "history.csv"))
    pipeline.write_json(pipeline.run_metadata(cfg, overrides, command="distill", teachers=list(args.teachers),
                                              teacher_checksum=res.teacher_checksum, seconds=res.seconds),
                        os.path.join(args.out, "metadata.json"))
    return 0


def cmd_eval(args) -> int:
    cfg, _ = _config(args)
    ck = ckio.load(args.checkpoint)
    netcfg = cfg.teachers[args.role] if args.role in TEACHER_ROLES else cfg.student_net
    net = pipeline.load_network(ck, netcfg)
    data = pipeline.make_data(cfg)
    rep = pipeline.evaluate_network(net, _split(data, args.split), cfg)
    _write_text(args.out, report_csv([rep.csv_row(os.path.basename(args.checkpoint), args.variant)]))
    return 0


def cmd_ablate(args) -> int:
    cfg, overrides = _config(args)
    if args.grid:
        with open(args.grid) as fh:
            grid = json.load(fh)
        if not isinstance(grid, dict) or not all(isinstance(v, dict) for v in grid.values()):
            raise ValidationError("--grid must be a JSON object mapping names to override objects")
    else:
        grid = PRESETS[args.preset]
    for name, ov in grid.items():
        with_overrides(cfg, ov)  # validate every variant before any training
    seeds = args.seeds or [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    teachers = _load_teachers(args.teachers) if args.teachers else None
    os.makedirs(args.out, exist_ok=True)
    res = pipeline.ablate(cfg, grid, seeds, teachers)
    _write_text(os.path.join(args.out, "ablation.csv"), res.csv)
    pipeline.write_json(pipeline.run_metadata(cfg, overrides, command="ablate", grid=grid, seeds=seeds,
                                              failures=res.failures), os.path.join(args.out, "metadata.json"))
    return 0


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ValidationError("--trials must be >= 1")
    try:
        cases = gradsuite.select(args.module)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    if args.precision == 32:
        logging.warning("32-bit finite differences are too coarse for the 1e-4 tolerance; expect failures")
    results = [gradsuite.check_case(c, args.trials, args.seed, precision=args.precision) for c in cases]
    print(gradsuite.format_table(results))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "module", "trials", "max_error", "passed"])
            for r in results:
                w.writerow([r.name, r.module, r.trials, repr(r.max_error), int(r.passed)])
    return 0 if all(r.passed for r in results) else 2


def cmd_dynamics(args) -> int:
    try:
        spec = nmode.SolverSpec(args.method, args.step, args.t_end)
    except ContractError as e:
        raise ValidationError(str(e)) from None
    gamma = np.array(args.gamma, dtype=np.float64)
    y0 = np.zeros_like(gamma) if args.y0 is None else np.array(args.y0, dtype=np.float64)
    if y0.shape != gamma.shape:
        raise ValidationError(f"--y0 has {y0.size} values, --gamma has {gamma.size}")
    times, states = nmode.trajectory(y0, gamma, args.deriv, spec)
    nmode.write_trajectory_csv(args.out, times, states)
    print(f"y(t={times[-1]:g}) = {', '.join(f'{v:.6f}' for v in states[-1])}", file=sys.stderr)
    return 0


def cmd_gen_data(args) -> int:
    cfg, _ = _config(args)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, scene=replace(cfg.scene, seed=args.seed))
    data = pipeline.make_data(cfg)
    os.makedirs(args.out, exist_ok=True)
    names = ("train", "val", "test") if args.split == "all" else (args.split,)
    for name in names:
        export_dataset(_split(data, name), os.path.join(args.out, f"{name}.mdds"))
    pipeline.write_json({"scene": to_dict(cfg.scene), "splits": {n: len(_split(data, n)) for n in names},
                         "checksums": {n: _split(data, n).checksum() for n in names}},
                        os.path.join(args.out, "metadata.json"))
    return 0


def cmd_plot(args) -> int:
    hist = {}
    for item in args.history:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(item))[0], item
        hist[name] = path
    for p in plotting.plot(args.metrics, args.out, hist):
        print(p, file=sys.stderr)
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher, "distill": cmd_distill, "eval": cmd_eval, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck, "dynamics": cmd_dynamics, "gen-data": cmd_gen_data, "plot": cmd_plot,
}

VALIDATION = (ValidationError, ConfigError, ckio.CheckpointFormatError, plotting.SchemaError,
              FileNotFoundError, json.JSONDecodeError, IsADirectoryError)
RUNTIME = (pipeline.TrainingDivergence, NumericError, ContractError, GenerationError, OSError, RuntimeError)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except VALIDATION as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RUNTIME as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
