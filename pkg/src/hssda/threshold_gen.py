"""Per-class dynamic dual thresholds from the confident scene set.

Each epoch the teacher runs on every confident scene and on a weakly
augmented copy. Every ground-truth box is paired with its best same-class
prediction (IoU above ``tau_pair``) and that prediction's confidence,
objectness and consistency IoU go into per-class score pools. Natural
breaks on each pool give a (low, high) threshold pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augment import RigidTransform, apply_transform_scene, invert_transform_boxes, sample_weak_transform
from .breaks import MEASURES, dual_threshold, fallback_thresholds
from .geom3d import Box3D, Detection, bev_iou, iou_3d
from .scene import Scene

TAU_PAIR = 0.5

Detector = Callable[[np.ndarray], list]


class EmptyConfidentSet(ValueError):
    pass


@dataclass(frozen=True)
class ClassThresholds:
    cls: tuple
    obj: tuple
    iou: tuple

    def __post_init__(self):
        for name in MEASURES:
            low, high = getattr(self, name)
            if not (0.0 <= low < high <= 1.0):
                raise ValueError(f"{name} thresholds must satisfy 0 <= low < high <= 1, "
                                 f"got ({low}, {high})")

    def as_dict(self) -> dict:
        return {f"{m}_{side}": float(getattr(self, m)[i])
                for m in MEASURES for i, side in enumerate(("low", "high"))}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassThresholds":
        return cls(*((float(d[f"{m}_low"]), float(d[f"{m}_high"])) for m in MEASURES))

    @classmethod
    def uniform(cls, low: float, high: float) -> "ClassThresholds":
        return cls((low, high), (low, high), (low, high))


@dataclass
class DualThresholds:
    per_class: dict = field(default_factory=dict)     # class_id -> ClassThresholds
    epoch: int = 0
    pool_sizes: dict = field(default_factory=dict)    # class_id -> matched count

    def __getitem__(self, class_id: int) -> ClassThresholds:
        return self.per_class[class_id]


@dataclass
class ConfidentScene:
    scene: Scene
    provenance: str = "ground-truth"    # or "mined"

    @property
    def scene_id(self) -> str:
        return self.scene.scene_id

    @property
    def labels(self) -> list:
        return self.scene.labels


@dataclass
class PairedPrediction:
    preds: list
    preds_aug: list
    transform: RigidTransform


def _iou_fn(mode: str):
    return iou_3d if mode == "3d" else bev_iou


def match_gt_to_predictions(gt: Sequence[Box3D], preds: Sequence[Detection],
                            tau_pair: float = TAU_PAIR, mode: str = "3d") -> list[tuple[int, int]]:
    """(gt index, pred index) pairs; each GT takes its best same-class prediction.

    A prediction may serve several GT boxes. Ties go to the lower index.
    """
    if not 0.0 < tau_pair < 1.0:
        raise ValueError("tau_pair must lie in (0, 1)")
    iou = _iou_fn(mode)
    pairs = []
    for j, g in enumerate(gt):
        best, best_iou = -1, -1.0
        for k, p in enumerate(preds):
            if p.class_id != g.class_id:
                continue
            v = iou(g, p.box)
            if v > best_iou:
                best, best_iou = k, v
        if best >= 0 and best_iou > tau_pair:
            pairs.append((j, best))
    return pairs


def consistency_iou(pred: Detection, preds_aug: Sequence[Detection],
                    transform: RigidTransform, mode: str = "3d") -> float:
    """Max IoU between ``pred`` and the augmented-view predictions mapped back."""
    if not preds_aug:
        return 0.0
    iou = _iou_fn(mode)
    back = invert_transform_boxes([d.box for d in preds_aug], transform)
    return max(iou(pred.box, b) for b in back)


def predict_pair(scene: Scene, detector: Detector, rng: np.random.Generator) -> PairedPrediction:
    """Run the detector on a scene and on one weak augmentation of it."""
    t = sample_weak_transform(rng)
    aug = apply_transform_scene(scene, t)
    return PairedPrediction(detector(scene.points.data), detector(aug.points.data), t)


def empty_pools(class_ids) -> dict:
    return {c: {m: [] for m in MEASURES} for c in class_ids}


def collect_score_pools(dc: Sequence[ConfidentScene], paired: Sequence[PairedPrediction],
                        tau_pair: float = TAU_PAIR, class_ids=(), mode: str = "3d",
                        pools: dict | None = None) -> dict:
    """Per-class pools of (s_cls, s_obj, consistency IoU) of matched predictions."""
    if len(dc) != len(paired):
        raise ValueError("need one prediction pair per confident scene")
    pools = pools if pools is not None else empty_pools(class_ids)
    for cs, pp in zip(dc, paired):
        for j, k in match_gt_to_predictions(cs.labels, pp.preds, tau_pair, mode):
            pred = pp.preds[k]
            cid = cs.labels[j].class_id
            pool = pools.setdefault(cid, {m: [] for m in MEASURES})
            pool["cls"].append(pred.s_cls)
            pool["obj"].append(pred.s_obj)
            pool["iou"].append(consistency_iou(pred, pp.preds_aug, pp.transform, mode))
    return pools


def thresholds_from_pools(pools: dict, class_ids, epoch: int = 0,
                          rng: np.random.Generator | None = None) -> DualThresholds:
    per_class, sizes = {}, {}
    for c in class_ids:
        pool = pools.get(c, {m: [] for m in MEASURES})
        pairs = {}
        for m in MEASURES:
            vals = pool[m]
            pairs[m] = dual_threshold(vals, rng) if len(vals) else fallback_thresholds(vals)
        per_class[c] = ClassThresholds(pairs["cls"], pairs["obj"], pairs["iou"])
        sizes[c] = len(pool["cls"])
    return DualThresholds(per_class, epoch, sizes)


def generate_dual_thresholds(dc: Sequence[ConfidentScene], detector: Detector,
                             rng: np.random.Generator, class_ids: Sequence[int],
                             tau_pair: float = TAU_PAIR, epoch: int = 0,
                             mode: str = "3d") -> DualThresholds:
    """Dual thresholds for every class from one pass over the confident set."""
    if not dc:
        raise EmptyConfidentSet("the confident scene set is empty")
    ordered = sorted(dc, key=lambda cs: cs.scene_id)
    paired = [predict_pair(cs.scene, detector, rng) for cs in ordered]
    pools = collect_score_pools(ordered, paired, tau_pair, class_ids, mode)
    return thresholds_from_pools(pools, class_ids, epoch, rng)


def build_confident_set(labeled: Sequence[Scene], mined: dict) -> list[ConfidentScene]:
    """Labeled scenes plus unlabeled scenes holding at least one high label.

    ``mined`` maps scene id to ``(scene, high boxes)``.
    """
    dc = [ConfidentScene(s, "ground-truth") for s in labeled]
    for sid in sorted(mined):
        scene, boxes = mined[sid]
        if boxes:
            dc.append(ConfidentScene(scene.with_labels(boxes), "mined"))
    return dc
