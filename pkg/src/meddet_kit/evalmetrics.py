"""IoU, greedy NMS, 101-point interpolated AP, mAP and recall."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Detections, Truth, iou, iou_matrix  # noqa: F401  (iou re-exported)

RECALL_GRID = np.linspace(0.0, 1.0, 101)
COCO_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
CSV_FIELDS = ["run_id", "variant", "map50", "map5095", "recall", "tp", "fp", "fn"]


def _order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # score desc, then smaller x1, then smaller y1
    return np.lexsort((boxes[:, 1], boxes[:, 0], -scores))


def nms(dets: Detections, iou_thresh: float = 0.6) -> Detections:
    """Greedy per-class suppression of boxes overlapping a kept box by >= iou_thresh."""
    if not 0 < iou_thresh <= 1:
        raise ValueError("iou_thresh must be in (0, 1]")
    keep_all = []
    for c in np.unique(dets.labels):
        idx = np.nonzero(dets.labels == c)[0]
        idx = idx[_order(dets.boxes[idx], dets.scores[idx])]
        ious = iou_matrix(dets.boxes[idx], dets.boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for a in range(len(idx)):
            if not alive[a]:
                continue
            keep_all.append(idx[a])
            alive[a + 1:] &= ious[a, a + 1:] < iou_thresh
    keep = np.array(sorted(keep_all, key=lambda i: (-dets.scores[i], dets.boxes[i, 0], dets.boxes[i, 1])),
                    dtype=np.int64)
    return Detections(dets.boxes[keep], dets.scores[keep], dets.labels[keep])


def _match(dets: Sequence[Detections], truths: Sequence[Truth], class_id: int, iou_thresh: float,
           score_min: float = -np.inf):
    """Greedy by score across images; each truth matches at most once (best unmatched IoU).

    Returns (is_tp flags in score order, number of truths).
    """
    rows = []
    for i, d in enumerate(dets):
        for j in np.nonzero((d.labels == class_id) & (d.scores >= score_min))[0]:
            b = d.boxes[j]
            rows.append((-d.scores[j], i, b[0], b[1], b[2], b[3], j))
    rows.sort()
    n_truth = sum(int(np.sum(t.labels == class_id)) for t in truths)
    used = [np.zeros(int(np.sum(t.labels == class_id)), dtype=bool) for t in truths]
    gt_boxes = [t.boxes[t.labels == class_id] for t in truths]
    flags = np.zeros(len(rows), dtype=bool)
    for r, (_, i, *_b, j) in enumerate(rows):
        g = gt_boxes[i]
        if len(g) == 0:
            continue
        ov = iou_matrix(dets[i].boxes[j:j + 1], g)[0]
        ov[used[i]] = -1.0
        best = int(np.argmax(ov))
        if ov[best] >= iou_thresh:
            used[i][best] = True
            flags[r] = True
    return flags, n_truth


def _ap_from_flags(flags: np.ndarray, n_truth: int) -> float:
    if n_truth == 0:
        return 1.0 if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_truth
    precision = tp / (tp + fp)
    # interpolated precision: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in RECALL_GRID:
        k = np.searchsorted(recall, r - 1e-12, side="left")
        total += envelope[k] if k < len(recall) else 0.0
    return float(total / len(RECALL_GRID))


def average_precision(dets: Sequence[Detections], truths: Sequence[Truth], class_id: int,
                      iou_thresh: float = 0.5) -> float:
    """101-point interpolated AP for one class."""
    flags, n_truth = _match(dets, truths, class_id, iou_thresh)
    return _ap_from_flags(flags, n_truth)


@dataclass
class EvalReport:
    map_50: float
    map_50_95: float
    recall: float
    per_class_ap: list = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def csv_row(self, run_id: str, variant: str) -> list:
        return [run_id, variant, repr(float(self.map_50)), repr(float(self.map_50_95)),
                repr(float(self.recall)), self.tp, self.fp, self.fn]


def evaluate(dets: Sequence[Detections], truths: Sequence[Truth], num_classes: int = 2,
             score_thresh: float = 0.05) -> EvalReport:
    """mAP@0.5, mAP@[.5:.95] (classes without truth are left out) and recall@0.5."""
    if len(dets) != len(truths):
        raise ValueError(f"{len(dets)} detection sets vs {len(truths)} truth sets")
    classes = [c for c in range(num_classes) if any(np.any(t.labels == c) for t in truths)]
    n_dets = sum(len(d) for d in dets)
    if not classes:
        v = 1.0 if n_dets == 0 else 0.0
        return EvalReport(v, v, 1.0, [v] * num_classes, 0, sum(int(np.sum(d.scores >= score_thresh)) for d in dets), 0)
    per_class = [average_precision(dets, truths, c, 0.5) for c in range(num_classes)]
    map50 = float(np.mean([per_class[c] for c in classes]))
    map_range = float(np.mean([
        np.mean([average_precision(dets, truths, c, float(t)) for c in classes]) for t in COCO_THRESHOLDS
    ]))
    tp = fp = n_truth = 0
    for c in range(num_classes):
        flags, n = _match(dets, truths, c, 0.5, score_min=score_thresh)
        tp += int(flags.sum())
        fp += int((~flags).sum())
        n_truth += n
    recall = tp / n_truth if n_truth else 1.0
    return EvalReport(map50, map_range, recall, per_class, tp, fp, n_truth - tp)


def report_csv(rows: Sequence[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
