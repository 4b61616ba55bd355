"""End-to-end runs: generate, burn in, mutual learning, evaluation.

Training functions only ever receive labeled scenes with labels and
unlabeled scenes without them. Ground truth of unlabeled and test scenes is
read by :class:`Evaluator` alone, for logging.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment
from .config import RunConfig
from .detector import toy_detect
from .formats import (Dataset, IoFailure, read_dataset, read_eval_labels, save_labels,
                      save_points, write_dataset, write_json)
from .geom3d import Detection
from .learner import MutualState, burn_in, mine_scene, mutual_learning_epoch, make_detector
from .metrics import evaluate_ap, pseudo_label_precision, pseudo_label_recall
from .runlog import MetricsWriter, append_threshold_log, threshold_records
from .scene import Scene
from .supervision import HierarchicalLabels
from .synth import generate_dataset
from .threshold_gen import ConfidentScene, DualThresholds, generate_dual_thresholds

log = logging.getLogger(__name__)

BURNIN_PARAMS = "burnin_params.npy"
TEACHER_PARAMS = "teacher_params.npy"
STUDENT_PARAMS = "student_params.npy"
THRESHOLD_LOG = "thresholds.jsonl"
METRICS_CSV = "metrics.csv"


# ---------------------------------------------------------------------------
# data


def generate(cfg: RunConfig, root=None):
    """Synthesize the dataset for ``cfg`` and write it to disk."""
    ds = generate_dataset(cfg.synth, np.random.default_rng(cfg.seed))
    write_dataset(root if root is not None else cfg.data_path, cfg.class_names,
                  {"labeled": ds.labeled, "unlabeled": ds.unlabeled, "test": ds.test})
    return ds


def apply_labeled_fraction(labeled: list, unlabeled: list, fraction: float | None):
    """Keep the first ``ceil(fraction * len(labeled))`` labeled scenes.

    The rest join the unlabeled pool with their labels stripped.
    """
    if fraction is None:
        return list(labeled), list(unlabeled)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("labeled_fraction must lie in (0, 1]")
    n = max(1, math.ceil(fraction * len(labeled)))
    moved = [s.with_labels([]) for s in labeled[n:]]
    return list(labeled[:n]), moved + list(unlabeled)


@dataclass
class TrainingData:
    labeled: list
    unlabeled: list       # labels always empty
    test: list            # labels always empty


def load_training_data(cfg: RunConfig, dataset: Dataset | None = None) -> TrainingData:
    ds = dataset if dataset is not None else read_dataset(cfg.data_path)
    if ds.class_names != cfg.class_names:
        raise ValueError(f"dataset classes {ds.class_names} differ from config {cfg.class_names}")
    labeled, unlabeled = apply_labeled_fraction(ds.load_split("labeled"),
                                                ds.load_split("unlabeled"),
                                                cfg.train.labeled_fraction)
    return TrainingData(labeled, unlabeled, ds.load_split("test"))


def from_memory(cfg: RunConfig, synth_ds) -> TrainingData:
    """Same split as :func:`load_training_data`, straight from a generated dataset."""
    labeled, unlabeled = apply_labeled_fraction(
        synth_ds.labeled, [s.with_labels([]) for s in synth_ds.unlabeled],
        cfg.train.labeled_fraction)
    return TrainingData(labeled, unlabeled, [s.with_labels([]) for s in synth_ds.test])


# ---------------------------------------------------------------------------
# evaluation


class Evaluator:
    """Held-out AP and pseudo-label quality against sealed ground truth."""

    def __init__(self, gt: dict, test_ids: Sequence[str], n_classes: int,
                 iou: float | None = 0.5):
        self.gt = gt
        self.test_ids = list(test_ids)
        self.n_classes = n_classes
        self.iou = iou

    @classmethod
    def from_disk(cls, cfg: RunConfig, test: Sequence[Scene]) -> "Evaluator":
        gt = read_eval_labels(cfg.data_path, cfg.class_names)
        return cls(gt, [s.scene_id for s in test], cfg.train.n_classes, cfg.eval_iou)

    @classmethod
    def from_memory(cls, cfg: RunConfig, synth_ds) -> "Evaluator":
        gt = {s.scene_id: s.labels for s in list(synth_ds.unlabeled) + list(synth_ds.test)}
        return cls(gt, [s.scene_id for s in synth_ds.test], cfg.train.n_classes, cfg.eval_iou)

    def ap(self, theta, test: Sequence[Scene]) -> dict:
        preds = [toy_detect(s.points.data, theta, self.n_classes) for s in test]
        gts = [self.gt[s.scene_id] for s in test]
        return evaluate_ap(preds, gts, self.iou, list(range(self.n_classes)))

    def pseudo_labels(self, labels: dict):
        ids = sorted(labels)
        high = [labels[i].high for i in ids]
        gts = [self.gt[i] for i in ids]
        return pseudo_label_precision(high, gts), pseudo_label_recall(high, gts)


def label_counts(labels: dict) -> tuple[int, int, int]:
    hl = labels.values()
    return (sum(len(h.high) for h in hl), sum(len(h.ambiguous) for h in hl),
            sum(len(h.low) for h in hl))


# ---------------------------------------------------------------------------
# training runs


def save_params(path, theta) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, np.asarray(theta, dtype=np.float64), allow_pickle=False)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from exc


def load_params(path) -> np.ndarray:
    try:
        theta = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise IoFailure(f"{path} is not a parameter file: {exc}") from exc
    if theta.ndim != 1 or not np.all(np.isfinite(theta)):
        raise ValueError(f"{path}: parameters must be a finite vector")
    return theta


def run_burnin(cfg: RunConfig, data: TrainingData, out_dir=None, history: list | None = None):
    theta = burn_in(data.labeled, cfg.train, history)
    if out_dir is not None:
        save_params(Path(out_dir) / BURNIN_PARAMS, theta)
    return theta


def run_mutual_learning(cfg: RunConfig, theta_burn, data: TrainingData, out_dir=None,
                        evaluator: Evaluator | None = None) -> MutualState:
    """``cfg.train.epochs`` mutual-learning epochs with per-epoch logging.

    Writes the threshold log and the metric CSV into ``out_dir`` when given.
    Row 0 of the CSV is the burn-in model. AP is measured on the teacher.
    """
    names = cfg.class_names
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / THRESHOLD_LOG).write_text("")
        writer = MetricsWriter(out_dir / METRICS_CSV, names)
    if writer is not None:
        ap = evaluator.ap(theta_burn, data.test) if evaluator else {}
        writer.append(0, ap)

    state = MutualState.start(theta_burn, data.labeled, data.unlabeled, cfg.train)
    for _ in range(cfg.train.epochs):
        state = mutual_learning_epoch(state)
        counts = label_counts(state.labels)
        log.info("epoch %d loss %.4f high/ambiguous/low %s", state.epoch, state.loss, counts)
        if out_dir is not None:
            append_threshold_log(out_dir / THRESHOLD_LOG,
                                 threshold_records(state.thresholds, names))
            ap, prec, rec = {}, None, None
            if evaluator is not None:
                ap = evaluator.ap(state.teacher, data.test)
                prec, rec = evaluator.pseudo_labels(state.labels)
            writer.append(state.epoch, ap, prec, rec, counts)
    if out_dir is not None:
        save_params(out_dir / TEACHER_PARAMS, state.teacher)
        save_params(out_dir / STUDENT_PARAMS, state.student)
    return state


def one_shot_thresholds(cfg: RunConfig, theta, labeled: Sequence[Scene]) -> DualThresholds:
    """Dual thresholds from the labeled scenes alone (epoch 0)."""
    dc = [ConfidentScene(s) for s in labeled]
    return generate_dual_thresholds(dc, make_detector(theta, cfg.train.n_classes),
                                    np.random.default_rng([cfg.seed, 3]),
                                    list(range(cfg.train.n_classes)), cfg.train.tau_pair,
                                    epoch=0, mode=cfg.train.iou_mode)


def pseudo_label_scenes(cfg: RunConfig, theta, scenes: Sequence[Scene],
                        th: DualThresholds) -> dict:
    rng = np.random.default_rng([cfg.seed, 4])
    det = make_detector(theta, cfg.train.n_classes)
    return {s.scene_id: mine_scene(s, det, th, rng, cfg.train.iou_mode) for s in scenes}


# ---------------------------------------------------------------------------
# serialization of detections and previews


def detection_to_dict(d: Detection, class_names: Sequence[str], weight=None) -> dict:
    b = d.box
    out = {"class": class_names[b.class_id],
           "box": [b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw],
           "s_cls": float(d.s_cls), "s_obj": float(d.s_obj),
           "v": None if d.v is None else float(d.v)}
    if weight is not None:
        out["weight"] = float(weight)
    return out


def labels_document(labels: dict, class_names: Sequence[str], epoch: int) -> dict:
    scenes = []
    for sid in sorted(labels):
        hl: HierarchicalLabels = labels[sid]
        scenes.append({
            "id": sid,
            "high": [detection_to_dict(d, class_names) for d in hl.high],
            "ambiguous": [detection_to_dict(d, class_names, w) for d, w in hl.ambiguous],
            "low": [detection_to_dict(d, class_names) for d in hl.low],
        })
    return {"epoch": epoch, "scenes": scenes}


def augment_preview(cfg: RunConfig, scene: Scene, out_dir) -> dict:
    """Weak-augmented and patch-shuffled copies of ``scene`` plus their records."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng([cfg.seed, 5])
    weak, t = augment.weak_augment(scene, rng)
    clipped = augment.clip_scene(scene, cfg.train.region)
    shuffled, perm = augment.shuffle_points(clipped, cfg.train.rows, cfg.train.cols,
                                            cfg.train.region, rng)
    names = cfg.class_names
    for tag, sc in (("weak", weak), ("shuffled", shuffled)):
        save_points(out_dir / f"{scene.scene_id}_{tag}.bin", sc.points)
        save_labels(out_dir / f"{scene.scene_id}_{tag}.txt", sc.labels, names)
    doc = {
        "scene": scene.scene_id,
        "weak": {"flip_x": bool(t.flip_x), "flip_y": bool(t.flip_y), "scale": float(t.scale),
                 "yaw_rot": float(t.yaw_rot)},
        "shuffle": {"rows": perm.rows, "cols": perm.cols, "perm": [int(i) for i in perm.perm],
                    "region": [float(v) for v in perm.region]},
        "points": {"original": len(scene.points), "weak": len(weak.points),
                   "in_region": len(clipped.points), "shuffled": len(shuffled.points)},
    }
    write_json(out_dir / f"{scene.scene_id}_preview.json", doc)
    return doc
