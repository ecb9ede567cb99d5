"""Detection, distillation and total objectives.

    det   = lam * QFL + mu * DFL + (1 - lam - mu) * GIoU
    dist  = sum_i mean((T_i - G(align(S_i)))**2)
    total = sigma * det + tau * dist + (1 - sigma - tau) * adv

There is deliberately no KL-divergence term: distillation matches
intermediate features, not output distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .aatm import Generator, generate
from .alignfuse import AlignSpec, afa_apply
from .boxes import EPS, Truth, paired_iou
from .detnet import HeadOutput, location_centers
from .numcore import ContractError, DimensionError, Tensor

P_MIN = 1e-7
P_MAX = 1 - 1e-7


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.4
    mu: float = 0.3
    sigma: float = 0.6
    tau: float = 0.3
    beta: float = 2.0

    def __post_init__(self):
        problems = []
        if self.lam < 0 or self.mu < 0 or self.lam + self.mu > 1 + 1e-12:
            problems.append(f"need 0 <= lam, mu and lam + mu <= 1 (got {self.lam}, {self.mu})")
        if self.sigma < 0 or self.tau < 0 or self.sigma + self.tau > 1 + 1e-12:
            problems.append(f"need 0 <= sigma, tau and sigma + tau <= 1 (got {self.sigma}, {self.tau})")
        if self.beta < 0:
            problems.append("beta must be non-negative")
        if problems:
            raise ContractError("; ".join(problems))

    @property
    def giou_weight(self) -> float:
        return 1.0 - self.lam - self.mu

    @property
    def adv_weight(self) -> float:
        return 1.0 - self.sigma - self.tau


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


# --- quality focal loss -------------------------------------------------------

def qfl_elementwise(scores: Tensor, targets: np.ndarray, beta: float = 2.0) -> Tensor:
    """-|y - p|^beta [(1 - y) log(1 - p) + y log p] with p clamped to [1e-7, 1 - 1e-7]."""
    p = nc.clamp(scores, P_MIN, P_MAX)
    y = np.asarray(targets, dtype=scores.dtype)
    if y.shape != p.shape:
        raise DimensionError(f"qfl: scores {p.shape} vs targets {y.shape}")
    yt = Tensor(y, dtype=scores.dtype)
    gap = p - yt
    mod = nc.square(gap) if beta == 2 else nc.power(nc.absolute(gap), beta)
    bce = nc.log(p) * yt + nc.log(1.0 - p) * Tensor(1 - y, dtype=scores.dtype)
    return nc.neg(mod * bce)


def qfl(pred_score, target_quality, beta: float = 2.0) -> Tensor:
    """Scalar quality focal loss for one prediction."""
    p = _as_tensor(pred_score)
    return qfl_elementwise(p, np.full(p.shape, target_quality), beta).sum()


# --- distribution focal loss --------------------------------------------------

def dfl_elementwise(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row DFL for probs [R, n+1] and real targets [R] in [0, n]."""
    n = probs.shape[-1] - 1
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if np.any(t < 0) or np.any(t > n):
        raise ContractError(f"dfl targets must lie in [0, {n}], got range [{t.min()}, {t.max()}]")
    left = np.minimum(np.floor(t).astype(np.int64), n - 1)
    w_left = (left + 1 - t).astype(probs.dtype)
    w_right = (t - left).astype(probs.dtype)
    rows = np.arange(len(t))
    logp = nc.log(nc.clamp(probs, P_MIN, None))
    return nc.neg(
        logp[rows, left] * Tensor(w_left, dtype=probs.dtype)
        + logp[rows, left + 1] * Tensor(w_right, dtype=probs.dtype)
    )


def dfl(bin_probs, target: float) -> Tensor:
    """-[(y_{i+1} - y) log S_i + (y - y_i) log S_{i+1}], y_i = floor(target)."""
    p = _as_tensor(bin_probs)
    return dfl_elementwise(nc.reshape(p, (1, -1)), np.array([target])).sum()


# --- GIoU -----------------------------------------------------------------------

def giou_elementwise(pred: Tensor, target: Tensor) -> Tensor:
    """1 - GIoU for row-paired boxes [P, 4] (xyxy)."""
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise DimensionError(f"giou: boxes must be matching [P, 4], got {pred.shape} and {target.shape}")
    px1, py1, px2, py2 = (pred[:, j] for j in range(4))
    tx1, ty1, tx2, ty2 = (target[:, j] for j in range(4))
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = nc.relu(nc.minimum(px2, tx2) - nc.maximum(px1, tx1))
    ih = nc.relu(nc.minimum(py2, ty2) - nc.maximum(py1, ty1))
    inter = iw * ih
    union = area_p + area_t - inter
    iou = inter / (union + EPS)
    hull = (nc.maximum(px2, tx2) - nc.minimum(px1, tx1)) * (nc.maximum(py2, ty2) - nc.minimum(py1, ty1))
    giou = iou - (hull - union) / (hull + EPS)
    return 1.0 - giou


def giou_loss(box_a, box_b) -> Tensor:
    a = nc.reshape(_as_tensor(box_a), (1, 4))
    b = nc.reshape(_as_tensor(box_b, a), (1, 4))
    d = a.data
    e = b.data
    if d[0, 0] > d[0, 2] or d[0, 1] > d[0, 3] or e[0, 0] > e[0, 2] or e[0, 1] > e[0, 3]:
        raise ContractError("giou_loss needs x1 <= x2 and y1 <= y2")
    return giou_elementwise(a, b).sum()


# --- target assignment ----------------------------------------------------------

@dataclass
class Assignment:
    """Flattened over (level, image, y, x); rows follow the same order as the head flattening."""

    positive: np.ndarray  # [M] bool
    labels: np.ndarray  # [M] int, -1 for background
    boxes: np.ndarray  # [M, 4]
    centers: np.ndarray  # [M, 2]
    strides: np.ndarray  # [M]


def level_for_size(max_side: np.ndarray, strides: Sequence[int]) -> np.ndarray:
    """Nearest level on a log scale, with level k centred on objects of 2 * stride_k pixels."""
    bounds = [2 * math.sqrt(a * b) for a, b in zip(strides, strides[1:])]
    return np.searchsorted(np.asarray(bounds), max_side, side="right")


def assign_targets(truths: Sequence[Truth], shapes: Sequence[tuple[int, int]], strides: Sequence[int]) -> Assignment:
    """Centre-inside-box assignment on the box's scale level.

    A box containing no location centre on its level takes the location nearest
    its centre. Where boxes compete for a location the smaller box wins.
    """
    n = len(truths)
    pos_l, lab_l, box_l, cen_l, str_l = [], [], [], [], []
    for k, ((h, w), s) in enumerate(zip(shapes, strides)):
        cx, cy = location_centers(h, w, s)
        label = -np.ones((n, h, w), dtype=np.int64)
        boxes = np.zeros((n, h, w, 4))
        for i, tr in enumerate(truths):
            if len(tr) == 0:
                continue
            sides = np.maximum(tr.boxes[:, 2] - tr.boxes[:, 0], tr.boxes[:, 3] - tr.boxes[:, 1])
            lvl = level_for_size(sides, strides)
            areas = (tr.boxes[:, 2] - tr.boxes[:, 0]) * (tr.boxes[:, 3] - tr.boxes[:, 1])
            for j in np.argsort(-areas, kind="stable"):
                if lvl[j] != k:
                    continue
                x1, y1, x2, y2 = tr.boxes[j]
                inside = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
                if not inside.any():
                    d = (cx - (x1 + x2) / 2) ** 2 + (cy - (y1 + y2) / 2) ** 2
                    inside = np.zeros_like(inside)
                    inside[np.unravel_index(np.argmin(d), d.shape)] = True
                label[i][inside] = tr.labels[j]
                boxes[i][inside] = tr.boxes[j]
        pos_l.append((label >= 0).reshape(-1))
        lab_l.append(label.reshape(-1))
        box_l.append(boxes.reshape(-1, 4))
        cen_l.append(np.stack([np.broadcast_to(cx, (n, h, w)), np.broadcast_to(cy, (n, h, w))], -1).reshape(-1, 2))
        str_l.append(np.full(n * h * w, float(s)))
    return Assignment(
        np.concatenate(pos_l), np.concatenate(lab_l), np.concatenate(box_l),
        np.concatenate(cen_l), np.concatenate(str_l),
    )


def flatten_head(head: HeadOutput) -> tuple[Tensor, Tensor]:
    """Class logits [M, K] and box distributions [M, 4, n+1], rows ordered (level, image, y, x)."""
    nb = head.reg_bins + 1
    cls, reg = [], []
    for c, r in zip(head.class_logits, head.box_dist):
        n, k, h, w = c.shape
        cls.append(nc.reshape(nc.transpose(c, (0, 2, 3, 1)), (n * h * w, k)))
        r5 = nc.reshape(r, (n, 4, nb, h, w))
        reg.append(nc.reshape(nc.transpose(r5, (0, 3, 4, 1, 2)), (n * h * w, 4, nb)))
    return nc.concat(cls, axis=0), nc.concat(reg, axis=0)


def detection_components(head: HeadOutput, truths: Sequence[Truth], beta: float = 2.0) -> dict[str, Tensor]:
    """QFL summed over all locations / num positives; DFL and GIoU averaged over positives."""
    shapes = [c.shape[2:] for c in head.class_logits]
    asg = assign_targets(truths, shapes, head.strides)
    logits, dist = flatten_head(head)
    dt = logits.dtype
    n_bins = head.reg_bins
    pos = np.nonzero(asg.positive)[0]
    num_pos = max(len(pos), 1)
    scores = nc.sigmoid(logits)
    quality = np.zeros(logits.shape)
    zero = Tensor(0.0, dtype=dt)
    if len(pos) == 0:
        q = qfl_elementwise(scores, quality, beta).sum() / float(num_pos)
        return {"qfl": q, "dfl": zero, "giou": zero, "num_pos": 0}

    probs = nc.softmax(dist[pos], axis=-1)  # P, 4, nb
    bins = Tensor(np.arange(n_bins + 1, dtype=np.float64).reshape(-1, 1), dtype=dt)
    expect = nc.reshape(nc.matmul(nc.reshape(probs, (-1, n_bins + 1)), bins), (len(pos), 4))
    stride = asg.strides[pos][:, None]
    centers = asg.centers[pos]
    c4 = np.concatenate([centers, centers], axis=1)
    sign = np.array([-1.0, -1.0, 1.0, 1.0])
    pred_boxes = Tensor(c4, dtype=dt) + expect * Tensor(sign * stride, dtype=dt)
    gt = asg.boxes[pos]

    quality[pos, asg.labels[pos]] = np.clip(paired_iou(pred_boxes.data.astype(np.float64), gt), 0, 1)
    q = qfl_elementwise(scores, quality, beta).sum() / float(num_pos)

    ltrb = np.stack(
        [centers[:, 0] - gt[:, 0], centers[:, 1] - gt[:, 1], gt[:, 2] - centers[:, 0], gt[:, 3] - centers[:, 1]],
        axis=1,
    ) / stride
    ltrb = np.clip(ltrb, 0, n_bins - 0.01)
    d = dfl_elementwise(nc.reshape(probs, (-1, n_bins + 1)), ltrb.reshape(-1)).sum() / float(4 * len(pos))
    g = giou_elementwise(pred_boxes, Tensor(gt, dtype=dt)).sum() / float(len(pos))
    return {"qfl": q, "dfl": d, "giou": g, "num_pos": len(pos)}


def det_loss(head: HeadOutput, targets: Sequence[Truth], w: LossWeights) -> Tensor:
    comps = detection_components(head, targets, w.beta)
    return combine_detection(comps, w)


def combine_detection(comps: dict, w: LossWeights) -> Tensor:
    total = comps["qfl"] * w.lam
    if w.mu:
        total = total + comps["dfl"] * w.mu
    if w.giou_weight:
        total = total + comps["giou"] * w.giou_weight
    return total


# --- distillation and total -------------------------------------------------------

def dist_loss(teacher: Sequence[Tensor], student: Sequence[Tensor], generator: Generator | None,
              align: Sequence[AlignSpec] | None) -> Tensor:
    """Sum over levels of the mean squared gap between fused teacher and generated student features.

    ``align`` or ``generator`` set to None skips that stage (identity).
    """
    if len(teacher) != len(student):
        raise DimensionError(f"dist_loss: {len(teacher)} teacher levels vs {len(student)} student levels")
    total = None
    for i, (t, s) in enumerate(zip(teacher, student)):
        x = afa_apply(s, align[i]) if align is not None else s
        if generator is not None:
            x = generate(generator, x)
        if x.shape != t.shape:
            raise DimensionError(f"dist_loss level {i}: aligned student {x.shape} vs teacher {t.shape}")
        term = nc.square(t - x).mean()
        total = term if total is None else total + term
    return total


def total_loss(l_det, l_dist, l_adv, w: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """sigma * det + tau * dist + (1 - sigma - tau) * adv, plus the components for logging."""
    parts = [(_as_tensor(l_det), w.sigma), (_as_tensor(l_dist), w.tau), (_as_tensor(l_adv), w.adv_weight)]
    total = None
    for t, c in parts:
        term = t * c
        total = term if total is None else total + term
    comps = {"det": float(parts[0][0].data), "dist": float(parts[1][0].data), "adv": float(parts[2][0].data)}
    return total, comps
