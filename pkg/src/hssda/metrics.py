"""Detection metrics: 40-recall-position AP and pseudo-label precision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geom3d import Box3D, Detection, iou_3d

N_RECALL = 40
DEFAULT_IOU = {0: 0.7, 1: 0.5, 2: 0.5}


def match_detections(dets: Sequence[Detection], gts: Sequence[Box3D],
                     iou_thresh: float) -> np.ndarray:
    """Greedy TP flags for one scene, detections visited by descending score.

    Each detection takes the unmatched ground truth with the highest IoU, if
    that IoU reaches ``iou_thresh``.
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].s_cls, k))
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for k in order:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            iou = iou_3d(dets[k].box, gt)
            if iou >= iou_thresh and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            taken[best] = True
            tp[k] = True
    return tp


def ap_from_flags(scores: np.ndarray, tp: np.ndarray, n_gt: int,
                  n_recall: int = N_RECALL) -> float:
    """Interpolated AP at recall positions 1/n, 2/n, ..., 1."""
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(hits)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(hits) + 1)
    # max precision at any recall >= r
    best_after = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.arange(1, n_recall + 1) / n_recall:
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        if idx < len(recall):
            total += best_after[idx]
    return total / n_recall


def evaluate_ap(preds_per_scene: Sequence[Sequence[Detection]],
                gts_per_scene: Sequence[Sequence[Box3D]],
                iou_thresh: dict | float | None = None,
                class_ids: Sequence[int] | None = None) -> dict[int, float]:
    """Per-class AP40 over a set of scenes."""
    if class_ids is None:
        class_ids = sorted({b.class_id for g in gts_per_scene for b in g}
                           | {d.class_id for p in preds_per_scene for d in p})
    out = {}
    for c in class_ids:
        if isinstance(iou_thresh, dict):
            thr = iou_thresh[c]
        elif iou_thresh is None:
            thr = DEFAULT_IOU.get(c, 0.5)
        else:
            thr = float(iou_thresh)
        scores, flags, n_gt = [], [], 0
        for dets, gts in zip(preds_per_scene, gts_per_scene):
            d = [x for x in dets if x.class_id == c]
            g = [x for x in gts if x.class_id == c]
            n_gt += len(g)
            scores.extend(x.s_cls for x in d)
            flags.extend(match_detections(d, g, thr))
        out[c] = ap_from_flags(np.array(scores), np.array(flags, dtype=bool), n_gt)
    return out


@dataclass(frozen=True)
class Precision:
    correct: int
    total: int

    @property
    def percent(self) -> float | None:
        if self.total == 0:
            return None
        return (self.correct * 10000 // self.total) / 100.0

    def __str__(self) -> str:
        if self.total == 0:
            return "null"
        hundredths = self.correct * 10000 // self.total
        return f"{hundredths // 100}.{hundredths % 100:02d}"


def precision_from_counts(correct: int, total: int) -> Precision:
    if correct < 0 or total < 0 or correct > total:
        raise ValueError("need 0 <= correct <= total")
    return Precision(int(correct), int(total))


def is_correct_pseudo_label(box: Box3D, gts: Sequence[Box3D], iou: float = 0.5) -> bool:
    return any(g.class_id == box.class_id and iou_3d(box, g) > iou for g in gts)


def pseudo_label_precision(high_per_scene, gts_per_scene) -> Precision:
    """Share of mined labels overlapping a same-class ground truth at IoU > 0.5.

    The percentage is truncated (not rounded) to two decimals.
    """
    correct = total = 0
    for labels, gts in zip(high_per_scene, gts_per_scene):
        for lab in labels:
            box = lab.box if isinstance(lab, Detection) else lab
            total += 1
            correct += is_correct_pseudo_label(box, gts)
    return Precision(correct, total)


def pseudo_label_recall(high_per_scene, gts_per_scene) -> float | None:
    """Share of ground-truth objects covered by a correct mined label."""
    found = n = 0
    for labels, gts in zip(high_per_scene, gts_per_scene):
        boxes = [lab.box if isinstance(lab, Detection) else lab for lab in labels]
        for g in gts:
            n += 1
            found += any(b.class_id == g.class_id and iou_3d(b, g) > 0.5 for b in boxes)
    return None if n == 0 else found / n
