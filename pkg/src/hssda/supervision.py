"""Hierarchical pseudo-label supervision.

Teacher predictions on an unlabeled scene are split three ways against the
per-class dual thresholds: high-confidence (hard labels), ambiguous
(labels weighted by ``s_cls * s_obj``) and low-confidence (their points are
removed from the student's input).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import nms
from .geom3d import Box3D, Detection, PointCloud, remove_points_in_boxes
from .scene import Scene
from .threshold_gen import DualThresholds

HIGH_NMS_IOU = 0.1


class MissingClassThresholds(KeyError):
    pass


@dataclass
class HierarchicalLabels:
    high: list = field(default_factory=list)
    ambiguous: list = field(default_factory=list)   # (Detection, weight)
    low: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.high) + len(self.ambiguous) + len(self.low)


@dataclass
class TrainingView:
    """Student input for one scene.

    ``shuffled``/``perm`` are filled in when shuffle augmentation is applied:
    ``points`` then holds the region-clipped scene and ``shuffled`` the same
    points after patch shuffling.
    """

    scene_id: str
    points: PointCloud
    strong: list = field(default_factory=list)      # Box3D
    weighted: list = field(default_factory=list)    # (Box3D, w)
    labeled: bool = False
    shuffled: np.ndarray | None = None
    perm: object = None


def soft_weight(d: Detection) -> float:
    """Weight of an ambiguous label: confidence times objectness."""
    return float(d.s_cls) * float(d.s_obj)


def level_of(d: Detection, th: DualThresholds) -> str:
    if d.class_id not in th.per_class:
        raise MissingClassThresholds(d.class_id)
    if d.v is None:
        raise ValueError("detection has no consistency IoU")
    t = th.per_class[d.class_id]
    if d.s_cls > t.cls[1] and d.s_obj > t.obj[1] and d.v > t.iou[1]:
        return "high"
    if d.s_cls > t.cls[0] and d.s_obj > t.obj[0] and d.v > t.iou[0]:
        return "ambiguous"
    return "low"


def partition_predictions(preds: Sequence[Detection], th: DualThresholds) -> HierarchicalLabels:
    """Split predictions by the strict dual-threshold rules."""
    out = HierarchicalLabels()
    for d in preds:
        level = level_of(d, th)
        if level == "high":
            out.high.append(d)
        elif level == "ambiguous":
            out.ambiguous.append((d, soft_weight(d)))
        else:
            out.low.append(d)
    return out


def dedup_high(labels: HierarchicalLabels, iou: float = HIGH_NMS_IOU) -> HierarchicalLabels:
    """Per-class NMS inside the high level; suppressed boxes are dropped."""
    return HierarchicalLabels(nms(labels.high, iou), list(labels.ambiguous), list(labels.low))


def build_training_view(scene: Scene, labels: HierarchicalLabels,
                        gt: Sequence[Box3D] | None = None) -> TrainingView:
    """Remove points of low-level boxes; strong = high (+ GT); weighted = ambiguous."""
    cleaned = remove_points_in_boxes(scene.points, [d.box for d in labels.low])
    strong = [d.box for d in labels.high]
    if gt is not None:
        strong = strong + list(gt)
    weighted = [(d.box, float(w)) for d, w in labels.ambiguous]
    return TrainingView(scene.scene_id, cleaned, strong, weighted, labeled=gt is not None)
