"""Semantic (Ch_IoU, ISI_IoU, mcIoU) and instance (AP50/AP75/mAP) metrics.

Semantic functions take parallel lists of predicted and ground-truth label
maps (``0`` = background, ``c + 1`` = class ``c``). Instance functions take
parallel lists of instance sets. All results are percentages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class SemanticScores:
    ch_iou: float
    isi_iou: float
    mc_iou: float
    class_iou: dict = field(default_factory=dict)  # class id -> aggregate IoU (%)
    ch_skipped: int = 0
    isi_skipped: int = 0
    classes_absent: list = field(default_factory=list)

    def as_dict(self):
        return {
            "Ch_IoU": self.ch_iou,
            "ISI_IoU": self.isi_iou,
            "mcIoU": self.mc_iou,
            "class_IoU": {str(k): v for k, v in self.class_iou.items()},
            "skipped": {"Ch_IoU": self.ch_skipped, "ISI_IoU": self.isi_skipped},
            "classes_absent": list(self.classes_absent),
        }


def _frame_stats(pred, gt, num_classes):
    """Per-class intersection, union and GT/pred presence for one frame."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and GT {gt.shape} differ in size")
    k = num_classes + 1
    joint = np.bincount(gt.ravel() * k + pred.ravel(), minlength=k * k).reshape(k, k)
    inter = np.diag(joint)[1:]
    gt_count = joint.sum(axis=1)[1:]
    pred_count = joint.sum(axis=0)[1:]
    union = gt_count + pred_count - inter
    return inter, union, gt_count > 0, pred_count > 0


def _mean(values):
    return float(np.mean(values)) * 100.0 if len(values) else math.nan


def semantic_scores(preds, gts, num_classes: int) -> SemanticScores:
    ch_frames, isi_frames = [], []
    ch_skip = isi_skip = 0
    inter_total = np.zeros(num_classes, dtype=np.int64)
    union_total = np.zeros(num_classes, dtype=np.int64)
    for pred, gt in zip(preds, gts, strict=True):
        inter, union, in_gt, in_pred = _frame_stats(np.asarray(pred), np.asarray(gt), num_classes)
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
        if in_gt.any():
            ch_frames.append(iou[in_gt].mean())
        else:
            ch_skip += 1
        either = in_gt | in_pred
        if either.any():
            isi_frames.append(iou[either].mean())
        else:
            isi_skip += 1
        inter_total += inter
        union_total += union
    seen = union_total > 0
    class_iou = {int(c): 100.0 * inter_total[c] / union_total[c] for c in np.nonzero(seen)[0]}
    return SemanticScores(
        ch_iou=_mean(ch_frames),
        isi_iou=_mean(isi_frames),
        mc_iou=float(np.mean(list(class_iou.values()))) if class_iou else math.nan,
        class_iou=class_iou,
        ch_skipped=ch_skip,
        isi_skipped=isi_skip,
        classes_absent=[int(c) for c in np.nonzero(~seen)[0]],
    )


def ch_iou(preds, gts, num_classes: int) -> float:
    return semantic_scores(preds, gts, num_classes).ch_iou


def isi_iou(preds, gts, num_classes: int) -> float:
    return semantic_scores(preds, gts, num_classes).isi_iou


def mc_iou(preds, gts, num_classes: int) -> float:
    return semantic_scores(preds, gts, num_classes).mc_iou


# -- instance AP -------------------------------------------------------------------


@dataclass
class APScores:
    ap50: float
    ap75: float
    map: float
    class_ap: dict = field(default_factory=dict)  # class id -> mAP over thresholds (%)
    no_gt: bool = False

    def as_dict(self):
        if self.no_gt:
            return {"AP50": None, "AP75": None, "mAP": None, "status": "no-GT"}
        return {
            "AP50": self.ap50,
            "AP75": self.ap75,
            "mAP": self.map,
            "class_AP": {str(k): v for k, v in self.class_ap.items()},
        }


def mask_iou_matrix(pred_masks, gt_masks) -> np.ndarray:
    if not len(pred_masks) or not len(gt_masks):
        return np.zeros((len(pred_masks), len(gt_masks)))
    p = np.stack([m.ravel() for m in pred_masks]).astype(np.float64)
    g = np.stack([m.ravel() for m in gt_masks]).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _match_frame(ious, threshold):
    """Greedy matching of score-sorted predictions; True where a prediction is a TP."""
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(ious.shape[0], dtype=bool)
    for d in range(ious.shape[0]):
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        for g in range(ious.shape[1]):
            if taken[g] or ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
    return tp


def _average_precision(scores, tps, num_gt):
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.asarray(tps, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    # precision envelope, then sample at the 101 recall points
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(sampled.mean())


def instance_ap(preds, gts, num_classes: int, thresholds=COCO_THRESHOLDS) -> APScores:
    """COCO-style mask AP averaged over classes that have ground truth."""
    per_class = {}
    for c in range(num_classes):
        num_gt = 0
        frames = []
        for pred, gt in zip(preds, gts, strict=True):
            p = sorted((i for i in pred if i.class_id == c), key=lambda i: -i.score)
            g = [i for i in gt if i.class_id == c]
            num_gt += len(g)
            frames.append((p, mask_iou_matrix([i.mask for i in p], [i.mask for i in g])))
        if num_gt == 0:
            continue
        aps = []
        for t in thresholds:
            scores, tps = [], []
            for p, ious in frames:
                scores.extend(i.score for i in p)
                tps.extend(_match_frame(ious, t))
            aps.append(_average_precision(scores, tps, num_gt) if scores else 0.0)
        per_class[c] = aps
    if not per_class:
        return APScores(math.nan, math.nan, math.nan, no_gt=True)
    thresholds = [float(t) for t in thresholds]

    def at(t):
        if t not in thresholds:
            return math.nan
        k = thresholds.index(t)
        return 100.0 * float(np.mean([v[k] for v in per_class.values()]))

    return APScores(
        ap50=at(0.5),
        ap75=at(0.75),
        map=100.0 * float(np.mean([np.mean(v) for v in per_class.values()])),
        class_ap={c: 100.0 * float(np.mean(v)) for c, v in per_class.items()},
    )


def classification_map(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes (with at least one positive) of ranking average precision."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    aps = []
    for c in range(labels.shape[1]):
        y = labels[:, c]
        if not y.any():
            continue
        order = np.argsort(-scores[:, c], kind="mergesort")
        hits = y[order]
        ranks = np.arange(1, len(hits) + 1)
        aps.append(float((np.cumsum(hits)[hits] / ranks[hits]).mean()))
    return float(np.mean(aps)) if aps else math.nan
