"""Deterministic SVG plots and tidy CSVs derived from metrics files."""

from __future__ import annotations

import csv
import io
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalmetrics import CSV_FIELDS  # noqa: E402

NUMERIC = ("map50", "map5095", "recall")
COUNTS = ("tp", "fp", "fn")


class SchemaError(ValueError):
    pass


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV, naming the row and column of the first malformed value."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_FIELDS:
            raise SchemaError(f"{path}: header {header} != {CSV_FIELDS}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(CSV_FIELDS):
                raise SchemaError(f"{path}: row {lineno} has {len(raw)} columns, expected {len(CSV_FIELDS)}")
            rec = dict(zip(CSV_FIELDS, raw))
            for col in NUMERIC:
                try:
                    rec[col] = float(rec[col])
                except ValueError:
                    raise SchemaError(f"{path}: row {lineno}, column {col!r}: {rec[col]!r} is not a number") from None
            for col in COUNTS:
                try:
                    rec[col] = int(rec[col])
                except ValueError:
                    raise SchemaError(f"{path}: row {lineno}, column {col!r}: {rec[col]!r} is not an integer") from None
            rows.append(rec)
    return rows


def variant_summary(rows: Sequence[dict]) -> list[tuple[str, float]]:
    """(variant, mAP@0.5) in first-appearance order; mean rows win over per-seed rows."""
    order: list[str] = []
    per: dict[str, list[float]] = {}
    mean: dict[str, float] = {}
    for r in rows:
        v = r["variant"]
        if v not in order:
            order.append(v)
        if r["run_id"] == "mean":
            mean[v] = r["map50"]
        else:
            per.setdefault(v, []).append(r["map50"])
    out = []
    for v in order:
        if v in mean:
            out.append((v, mean[v]))
        else:
            vals = per.get(v, [])
            out.append((v, sum(vals) / len(vals) if vals else float("nan")))
    return out


def _save(fig, path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "meddet-kit", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def bar_svg(summary: Sequence[tuple[str, float]], path, title: str = "mAP@0.5 by variant") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if summary:
        names = [s[0] for s in summary]
        ax.bar(range(len(names)), [s[1] for s in summary], color="#4c72b0")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("mAP@0.5")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "epoch" not in rows[0]:
        raise SchemaError(f"{path}: history needs an 'epoch' column")
    out = []
    for lineno, r in enumerate(rows, start=2):
        try:
            out.append({k: float(v) for k, v in r.items()})
        except ValueError:
            raise SchemaError(f"{path}: row {lineno} has a non-numeric value") from None
    return out


def curves_svg(histories: dict[str, list[dict]], path, metric: str = "val_map50") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in histories:
        h = [r for r in histories[name] if metric in r]
        if h:
            ax.plot([r["epoch"] for r in h], [r[metric] for r in h], marker="o", ms=3, label=name)
    if any(histories.values()):
        ax.legend(fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    fig.tight_layout()
    _save(fig, path)


def tidy_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "variant", "metric", "value"])
    for r in rows:
        for col in (*NUMERIC, *COUNTS):
            w.writerow([r["run_id"], r["variant"], col, repr(r[col])])
    return buf.getvalue()


def plot(metrics_csv, out_dir, histories: dict[str, str] | None = None) -> list[str]:
    """Write bars.svg, curves.svg and tidy.csv into out_dir; returns the written paths."""
    rows = read_metrics(metrics_csv)
    hist = {name: read_history(p) for name, p in (histories or {}).items()}
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, n) for n in ("bars.svg", "curves.svg", "tidy.csv")]
    bar_svg(variant_summary(rows), paths[0])
    curves_svg(hist, paths[1])
    with open(paths[2], "w", newline="") as fh:
        fh.write(tidy_csv(rows))
    return paths
