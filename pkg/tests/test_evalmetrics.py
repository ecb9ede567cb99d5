import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from meddet_kit.boxes import Detections, Truth, iou
from meddet_kit.evalmetrics import (CSV_FIELDS, EvalReport, average_precision, evaluate, nms, report_csv)


def box_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / (union + 1e-9)


def nms_oracle(boxes, scores, labels, thresh):
    """Repeatedly take the best remaining box per class and drop everything it overlaps."""
    kept = []
    for c in set(labels.tolist()):
        rest = [i for i in range(len(scores)) if labels[i] == c]
        while rest:
            best = min(rest, key=lambda i: (-scores[i], boxes[i][0], boxes[i][1]))
            kept.append(best)
            rest = [i for i in rest if i != best and box_iou(boxes[best], boxes[i]) < thresh]
    return sorted(kept, key=lambda i: (-scores[i], boxes[i][0], boxes[i][1]))


def ap_oracle(dets, truths, cls, thresh):
    """Scalar greedy matching, then interpolated precision read off every grid point."""
    items = sorted(((-d.scores[j], i, d.boxes[j][0], d.boxes[j][1], j) for i, d in enumerate(dets)
                    for j in range(len(d)) if d.labels[j] == cls))
    used = set()
    n_truth = sum(int((t.labels == cls).sum()) for t in truths)
    tp_flags = []
    for _, i, _, _, j in items:
        best, best_g = -1.0, None
        for g in range(len(truths[i])):
            if truths[i].labels[g] != cls or (i, g) in used:
                continue
            o = box_iou(dets[i].boxes[j], truths[i].boxes[g])
            if o > best:
                best, best_g = o, g
        hit = best_g is not None and best >= thresh
        if hit:
            used.add((i, best_g))
        tp_flags.append(hit)
    if n_truth == 0:
        return 1.0 if not tp_flags else 0.0
    pr = []
    tp = 0
    for k, f in enumerate(tp_flags):
        tp += f
        pr.append((tp / n_truth, tp / (k + 1)))
    total = 0.0
    for step in range(101):
        r = step / 100
        cands = [p for rec, p in pr if rec >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101


def random_scene(r, n_img=20):
    dets, truths = [], []
    for _ in range(n_img):
        m = int(r.integers(0, 4))
        xy = r.uniform(0, 50, size=(m, 2))
        wh = r.uniform(5, 12, size=(m, 2))
        gt = np.concatenate([xy, xy + wh], axis=1)
        lab = r.integers(0, 2, size=m)
        truths.append(Truth(gt, lab))
        k = int(r.integers(0, 6))
        src = r.integers(0, max(m, 1), size=k)
        jitter = r.normal(0, 2.0, size=(k, 4))
        if m:
            b = gt[src] + jitter
            lb = np.where(r.random(k) < 0.85, lab[src], 1 - lab[src])
        else:
            xy2 = r.uniform(0, 50, size=(k, 2))
            b = np.concatenate([xy2, xy2 + 8], axis=1)
            lb = r.integers(0, 2, size=k)
        b[:, 2:] = np.maximum(b[:, 2:], b[:, :2] + 1)
        dets.append(Detections(b, np.round(r.uniform(0.05, 1, size=k), 2), lb))
    return dets, truths


def test_iou_hand_values():
    assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == pytest.approx(1.0)
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert abs(iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1 / 7) <= 1e-6


# --- NMS --------------------------------------------------------------------------

def test_nms_single_and_duplicate():
    one = Detections([[0, 0, 4, 4]], [0.5], [0])
    assert np.array_equal(nms(one).boxes, one.boxes)
    two = Detections([[0, 0, 4, 4], [0, 0, 4, 4]], [0.8, 0.9], [0, 0])
    out = nms(two)
    assert out.scores.tolist() == [0.9]


def test_nms_crafted_scene_matches_oracle():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30], [2, 0, 12, 10]], float)
    scores = np.array([0.9, 0.8, 0.7, 0.85])
    labels = np.array([0, 0, 0, 1])
    out = nms(Detections(boxes, scores, labels), 0.5)
    keep = nms_oracle(boxes, scores, labels, 0.5)
    assert np.allclose(out.boxes, boxes[keep], atol=1e-6) and np.allclose(out.scores, scores[keep])
    assert len(out) == 3


def test_nms_tie_break_prefers_smaller_x1():
    d = Detections([[5, 0, 15, 10], [4, 0, 14, 10]], [0.5, 0.5], [0, 0])
    assert nms(d, 0.5).boxes[0, 0] == 4


@given(seed=st.integers(0, 2**16), thresh=st.floats(0.1, 1.0))
def test_nms_matches_oracle_random(seed, thresh):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 9))
    xy = r.uniform(0, 20, size=(n, 2))
    boxes = np.concatenate([xy, xy + r.uniform(3, 10, size=(n, 2))], axis=1)
    scores = np.round(r.uniform(size=n), 1)
    labels = r.integers(0, 2, size=n)
    out = nms(Detections(boxes, scores, labels), thresh)
    keep = nms_oracle(boxes, scores, labels, thresh)
    np.testing.assert_allclose(out.boxes, boxes[keep].reshape(-1, 4), atol=1e-6)


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms(Detections.empty(), 0.0)


# --- AP ---------------------------------------------------------------------------

def test_ap_trivial_cases():
    t = [Truth([[0, 0, 10, 10]], [0])]
    assert average_precision([Detections([[0, 0, 10, 10]], [0.9], [0])], t, 0) == 1.0
    assert average_precision([Detections.empty()], t, 0) == 0.0


def test_ap_hit_miss_hit():
    truth = [Truth([[0, 0, 10, 10], [20, 20, 30, 30]], [0, 0])]
    dets = [Detections([[0, 0, 10, 10], [40, 40, 50, 50], [20, 20, 30, 30]], [0.9, 0.8, 0.7], [0, 0, 0])]
    # precision 1 up to recall 0.5 (51 grid points), then 2/3 up to recall 1 (50 points)
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert abs(average_precision(dets, truth, 0) - expected) <= 1e-6
    assert abs(expected - 0.834983) <= 1e-6
    assert abs(average_precision(dets, truth, 0) - ap_oracle(dets, truth, 0, 0.5)) <= 1e-6


def test_ap_each_truth_matched_once():
    truth = [Truth([[0, 0, 10, 10]], [0])]
    dets = [Detections([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.8], [0, 0])]
    assert average_precision(dets, truth, 0) == 1.0
    assert evaluate(dets, truth, 1).fp == 1


@given(seed=st.integers(0, 2**16))
def test_ap_matches_oracle_random(seed):
    dets, truths = random_scene(np.random.default_rng(seed), 6)
    for c in (0, 1):
        for t in (0.5, 0.75):
            assert abs(average_precision(dets, truths, c, t) - ap_oracle(dets, truths, c, t)) <= 1e-6


def test_frozen_fixture_matches_scripted_oracle():
    dets, truths = random_scene(np.random.default_rng(2024), 20)
    rep = evaluate(dets, truths, 2)
    classes = [c for c in (0, 1) if any((t.labels == c).any() for t in truths)]
    m50 = np.mean([ap_oracle(dets, truths, c, 0.5) for c in classes])
    m5095 = np.mean([np.mean([ap_oracle(dets, truths, c, t) for c in classes])
                     for t in np.round(np.arange(0.5, 0.951, 0.05), 2)])
    assert abs(rep.map_50 - m50) <= 1e-6 and abs(rep.map_50_95 - m5095) <= 1e-6


@given(seed=st.integers(0, 2**16))
def test_ap_monotone_when_false_positive_removed(seed):
    r = np.random.default_rng(seed)
    dets, truths = random_scene(r, 5)
    base = average_precision(dets, truths, 0)
    for i, d in enumerate(dets):
        for j in range(len(d)):
            if d.labels[j] != 0:
                continue
            # a detection with no overlapping class-0 truth is a false positive at any rank
            g = truths[i].boxes[truths[i].labels == 0]
            if len(g) and max(box_iou(d.boxes[j], gb) for gb in g) > 0:
                continue
            keep = np.arange(len(d)) != j
            trimmed = list(dets)
            trimmed[i] = Detections(d.boxes[keep], d.scores[keep], d.labels[keep])
            assert average_precision(trimmed, truths, 0) >= base - 1e-12


@given(seed=st.integers(0, 2**16))
def test_evaluate_invariant_to_detection_order(seed):
    r = np.random.default_rng(seed)
    dets, truths = random_scene(r, 5)
    shuffled = []
    for d in dets:
        p = r.permutation(len(d))
        shuffled.append(Detections(d.boxes[p], d.scores[p], d.labels[p]))
    a, b = evaluate(dets, truths, 2), evaluate(shuffled, truths, 2)
    assert a.csv_row("x", "v") == b.csv_row("x", "v")


@given(seed=st.integers(0, 2**16))
def test_map50_at_least_map5095(seed):
    rep = evaluate(*random_scene(np.random.default_rng(seed), 6), 2)
    assert rep.map_50 >= rep.map_50_95 - 1e-12


def test_perfect_and_empty_detectors():
    truths = [Truth([[0, 0, 10, 10], [20, 20, 28, 30]], [0, 1]), Truth([[5, 5, 9, 9]], [1])]
    perfect = [Detections(t.boxes, np.ones(len(t)), t.labels) for t in truths]
    rep = evaluate(perfect, truths, 2)
    assert (rep.map_50, rep.map_50_95, rep.recall) == (1.0, 1.0, 1.0)
    rep = evaluate([Detections.empty()] * 2, truths, 2)
    assert (rep.map_50, rep.recall, rep.fn) == (0.0, 0.0, 3)


def test_evaluate_length_mismatch():
    with pytest.raises(ValueError):
        evaluate([Detections.empty()], [], 2)


def test_csv_row_and_report():
    row = EvalReport(0.5, 0.25, 0.75, [0.5, 0.5], 3, 1, 1).csv_row("s0", "full")
    text = report_csv([row])
    assert text.splitlines()[0] == ",".join(CSV_FIELDS)
    assert text.splitlines()[1] == "s0,full,0.5,0.25,0.75,3,1,1"
