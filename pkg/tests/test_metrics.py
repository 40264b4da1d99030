from fractions import Fraction

import numpy as np
import pytest

from weaksurg.metrics import (
    COCO_THRESHOLDS,
    classification_map,
    instance_ap,
    semantic_scores,
)
from weaksurg.structures import Instance, instances_to_labelmap

C = 3


# -- pixel-enumeration oracles ---------------------------------------------------------


def pixel_counts(pred, gt, c):
    inter = union = gt_n = pred_n = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        inter += p == c and g == c
        union += p == c or g == c
        gt_n += g == c
        pred_n += p == c
    return inter, union, gt_n, pred_n


def semantic_oracle(preds, gts, num_classes):
    ch, isi = [], []
    agg = {c: [0, 0] for c in range(1, num_classes + 1)}
    for pred, gt in zip(preds, gts):
        rows = {c: pixel_counts(pred, gt, c) for c in range(1, num_classes + 1)}
        in_gt = [c for c, r in rows.items() if r[2]]
        either = [c for c, r in rows.items() if r[2] or r[3]]
        if in_gt:
            ch.append(sum(Fraction(rows[c][0], rows[c][1]) for c in in_gt) / len(in_gt))
        if either:
            isi.append(sum(Fraction(rows[c][0], rows[c][1]) for c in either) / len(either))
        for c, r in rows.items():
            agg[c][0] += r[0]
            agg[c][1] += r[1]
    per_class = [Fraction(i, u) for i, u in agg.values() if u]
    mean = lambda xs: float(100 * sum(xs) / len(xs)) if xs else float("nan")  # noqa: E731
    return mean(ch), mean(isi), mean(per_class)


def mask_iou_oracle(a, b):
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
    return Fraction(inter, union) if union else Fraction(0)


def ap_oracle(preds, gts, num_classes, thresholds=COCO_THRESHOLDS):
    """Per class and threshold: greedy matching per frame in score order, then
    interpolated precision p(r) = max precision at recall >= r, sampled at 101 points."""
    results = {}
    for c in range(num_classes):
        n_gt = sum(1 for gt in gts for g in gt if g.class_id == c)
        if not n_gt:
            continue
        per_t = []
        for t in thresholds:
            dets = []
            for pred, gt in zip(preds, gts):
                ps = sorted([p for p in pred if p.class_id == c], key=lambda p: -p.score)
                gs = [g for g in gt if g.class_id == c]
                used = set()
                for p in ps:
                    best, best_iou = None, Fraction(0)
                    for gi, g in enumerate(gs):
                        iou = mask_iou_oracle(p.mask, g.mask)
                        if gi in used or iou < t - 1e-12 or iou < best_iou:
                            continue
                        best, best_iou = gi, iou
                    if best is not None:
                        used.add(best)
                    dets.append((p.score, best is not None))
            dets.sort(key=lambda d: -d[0])
            tp = fp = 0
            points = []
            for _, hit in dets:
                tp += hit
                fp += not hit
                points.append((tp / n_gt, tp / (tp + fp)))
            total = 0.0
            for r in np.linspace(0, 1, 101):
                cands = [p for rec, p in points if rec >= r]
                total += max(cands) if cands else 0.0
            per_t.append(total / 101)
        results[c] = per_t
    k50, k75 = 0, 5
    return (100 * np.mean([v[k50] for v in results.values()]),
            100 * np.mean([v[k75] for v in results.values()]),
            100 * np.mean([np.mean(v) for v in results.values()]))


def random_semantic_frame(rng, size):
    gt = np.zeros((size, size), dtype=np.int64)
    pred = np.zeros_like(gt)
    for target in (gt, pred):
        for _ in range(rng.integers(0, 4)):
            y0, x0 = rng.integers(0, size, 2)
            h, w = rng.integers(1, size // 2 + 1, 2)
            target[y0 : y0 + h, x0 : x0 + w] = rng.integers(1, C + 1)
    return pred, gt


def random_instance_frame(rng, size, score_pool):
    gts, preds = [], []
    for _ in range(rng.integers(0, 3)):
        m = np.zeros((size, size), dtype=bool)
        y0, x0 = rng.integers(0, size - 3, 2)
        h, w = rng.integers(2, size // 2 + 1, 2)
        m[y0 : y0 + h, x0 : x0 + w] = True
        cls = int(rng.integers(0, C))
        gts.append(Instance(cls, 1.0, m))
        if rng.random() < 0.8:
            shifted = np.roll(m, tuple(rng.integers(-2, 3, 2)), axis=(0, 1))
            preds.append(Instance(cls if rng.random() < 0.85 else int(rng.integers(0, C)),
                                  score_pool.pop(), shifted))
    for _ in range(rng.integers(0, 2)):
        m = np.zeros((size, size), dtype=bool)
        y0, x0 = rng.integers(0, size - 2, 2)
        m[y0 : y0 + 3, x0 : x0 + 3] = True
        preds.append(Instance(int(rng.integers(0, C)), score_pool.pop(), m))
    return preds, gts


# -- worked examples ---------------------------------------------------------------------


def test_perfect_prediction_scores_100():
    gt = np.zeros((8, 8), dtype=np.int64)
    gt[:4, :4] = 1
    gt[5:, 5:] = 3
    s = semantic_scores([gt], [gt], C)
    assert (s.ch_iou, s.isi_iou, s.mc_iou) == (100.0, 100.0, 100.0)
    inst = [Instance(0, 0.9, gt == 1), Instance(2, 0.8, gt == 3)]
    gts = [Instance(0, 1.0, gt == 1), Instance(2, 1.0, gt == 3)]
    ap = instance_ap([inst], [gts], C)
    assert (ap.ap50, ap.ap75, ap.map) == (100.0, 100.0, 100.0)


def test_left_half_gt_vs_full_prediction():
    gt = np.zeros((10, 10), dtype=np.int64)
    gt[:, :5] = 1
    pred = np.ones_like(gt)
    assert semantic_scores([pred], [gt], C).ch_iou == pytest.approx(50.0)


def test_shifted_squares_iou_one_third():
    gt = np.zeros((10, 20), dtype=np.int64)
    pred = np.zeros_like(gt)
    gt[:, 0:10] = 2
    pred[:, 5:15] = 2
    assert semantic_scores([pred], [gt], C).ch_iou == pytest.approx(100 / 3, abs=1e-9)


def test_isi_penalises_hallucinated_class():
    gt = np.zeros((8, 8), dtype=np.int64)
    gt[:4] = 1
    pred = gt.copy()
    pred[6:, 6:] = 2
    s = semantic_scores([pred], [gt], C)
    assert s.ch_iou == 100.0
    assert s.isi_iou == pytest.approx(50.0)


def test_mciou_aggregates_counts_not_frames():
    # frame A: inter 10, union 20; frame B: inter 0, union 10
    gt_a = np.zeros((1, 30), dtype=np.int64)
    pred_a = gt_a.copy()
    gt_a[0, :10] = 1
    pred_a[0, :20] = 1
    gt_b = np.zeros((1, 30), dtype=np.int64)
    pred_b = gt_b.copy()
    gt_b[0, :5] = 1
    pred_b[0, 5:10] = 1
    s = semantic_scores([pred_a, pred_b], [gt_a, gt_b], C)
    assert s.mc_iou == pytest.approx(100 / 3, abs=1e-9)
    assert s.ch_iou == pytest.approx(25.0)


def test_one_class_perfect_one_missed():
    gt = np.zeros((4, 4), dtype=np.int64)
    gt[:2] = 1
    gt[2:] = 2
    pred = gt.copy()
    pred[2:] = 0
    assert semantic_scores([pred], [gt], C).mc_iou == pytest.approx(50.0)


def test_empty_frames_are_skipped_and_tallied():
    empty = np.zeros((4, 4), dtype=np.int64)
    gt = empty.copy()
    gt[0, 0] = 1
    s = semantic_scores([empty, gt], [empty, gt], C)
    assert s.ch_skipped == 1 and s.isi_skipped == 1 and s.ch_iou == 100.0
    assert s.classes_absent == [1, 2]


def test_ap_threshold_straddle():
    gt = np.zeros((10, 10), dtype=bool)
    gt[:, :6] = True
    pred = np.zeros_like(gt)
    pred[:, :10] = True  # IoU 6/10
    ap = instance_ap([[Instance(0, 0.7, pred)]], [[Instance(0, 1.0, gt)]], C)
    assert ap.ap50 == 100.0 and ap.ap75 == 0.0


def test_ap_wrong_high_score_then_correct():
    gt = np.zeros((10, 10), dtype=bool)
    gt[:5, :5] = True
    wrong = np.zeros_like(gt)
    wrong[6:, 6:] = True
    preds = [Instance(0, 0.9, wrong), Instance(0, 0.8, gt.copy())]
    ap = instance_ap([preds], [[Instance(0, 1.0, gt)]], C)
    assert ap.ap50 == pytest.approx(50.0)


def test_ap_no_ground_truth_marker():
    ap = instance_ap([[]], [[]], C)
    assert ap.no_gt and ap.as_dict()["status"] == "no-GT"


# -- randomized oracle agreement and invariants --------------------------------------


def test_semantic_matches_oracle_on_random_frames(rng):
    frames = [random_semantic_frame(rng, int(rng.integers(4, 17))) for _ in range(50)]
    preds, gts = zip(*frames)
    s = semantic_scores(preds, gts, C)
    ch, isi, mc = semantic_oracle(preds, gts, C)
    assert s.ch_iou == pytest.approx(ch, abs=1e-9)
    assert s.isi_iou == pytest.approx(isi, abs=1e-9)
    assert s.mc_iou == pytest.approx(mc, abs=1e-9)
    assert s.isi_iou <= s.ch_iou + 1e-12


def test_ap_matches_oracle_on_random_frames(rng):
    pool = list(rng.permutation(1000) / 1000.0)
    frames = [random_instance_frame(rng, int(rng.integers(8, 17)), pool) for _ in range(50)]
    preds, gts = zip(*frames)
    ap = instance_ap(preds, gts, C)
    ref = ap_oracle(preds, gts, C)
    assert ap.ap50 == pytest.approx(ref[0], abs=1e-9)
    assert ap.ap75 == pytest.approx(ref[1], abs=1e-9)
    assert ap.map == pytest.approx(ref[2], abs=1e-9)


def test_metrics_invariant_to_frame_and_instance_order(rng):
    pool = list(rng.permutation(1000) / 1000.0)
    frames = [random_instance_frame(rng, 12, pool) for _ in range(20)]
    preds, gts = map(list, zip(*frames))
    base = instance_ap(preds, gts, C)
    order = rng.permutation(len(frames))
    shuffled_p = [list(reversed(preds[i])) for i in order]
    shuffled_g = [list(reversed(gts[i])) for i in order]
    again = instance_ap(shuffled_p, shuffled_g, C)
    assert (again.ap50, again.ap75, again.map) == pytest.approx((base.ap50, base.ap75, base.map))
    maps_p = [instances_to_labelmap(p, (12, 12)) for p in preds]
    maps_g = [instances_to_labelmap(g, (12, 12)) for g in gts]
    s1 = semantic_scores(maps_p, maps_g, C)
    s2 = semantic_scores([maps_p[i] for i in order], [maps_g[i] for i in order], C)
    assert (s1.ch_iou, s1.isi_iou, s1.mc_iou) == pytest.approx((s2.ch_iou, s2.isi_iou, s2.mc_iou))


def test_ap_invariant_to_monotone_score_transform(rng):
    pool = list(rng.permutation(1000) / 1000.0)
    frames = [random_instance_frame(rng, 12, pool) for _ in range(20)]
    preds, gts = zip(*frames)
    squashed = [[Instance(i.class_id, i.score**3 * 0.5, i.mask) for i in p] for p in preds]
    a, b = instance_ap(preds, gts, C), instance_ap(squashed, gts, C)
    assert (a.ap50, a.ap75, a.map) == (b.ap50, b.ap75, b.map)


def test_classification_map():
    labels = np.array([[1, 0], [0, 1], [1, 0], [0, 0]])
    perfect = labels.astype(float)
    assert classification_map(perfect, labels) == 1.0
    # class 0 positives ranked 1st and 3rd -> AP = (1 + 2/3) / 2
    scores = np.array([[0.9, 0.1], [0.8, 0.9], [0.7, 0.2], [0.1, 0.3]])
    assert classification_map(scores, labels) == pytest.approx(((1 + 2 / 3) / 2 + 1) / 2)
