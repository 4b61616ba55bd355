"""Training: losses, EMA teacher, burn-in and teacher-student mutual learning.

The loss of one scene sums, over the detector's proposals,

* a classification term: binary cross-entropy of the confidence (against
  "matches a same-class label") and of the objectness (against "matches any
  label"), and
* a smooth-L1 regression term on center, size and yaw for matched proposals.

Matching uses the raw fitted proposal box (3D IoU > 0.5), so targets do not
move with the head parameters. Terms tied to an ambiguous label are scaled
by its soft weight. Labeled scenes sum into ``L_s``, the rest into ``L_u``
and the total is ``L_s + L_u``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import augment
from .detector import (N_CLS_FEATURES, ParamLayout, Proposals, extract_proposals,
                       init_params, run_head, sigmoid, toy_detect)
from .geom3d import Box3D, iou_3d
from .scene import Scene
from .supervision import (HierarchicalLabels, TrainingView, build_training_view, dedup_high,
                          partition_predictions)
from .threshold_gen import (TAU_PAIR, DualThresholds, build_confident_set, consistency_iou,
                            generate_dual_thresholds)

log = logging.getLogger(__name__)

MATCH_IOU = 0.5
SMOOTH_L1_BETA = 0.1


class DimMismatch(ValueError):
    pass


class NoLabeledData(ValueError):
    pass


@dataclass
class TrainConfig:
    n_classes: int = 3
    alpha: float = 0.999
    ema_cadence: str = "epoch"          # or "step"
    lr: float = 0.05
    burn_in_epochs: int = 30
    epochs: int = 10
    batch_size: int = 8
    tau_pair: float = TAU_PAIR
    rows: int = 2
    cols: int = 2
    region: tuple = augment.KITTI_REGION
    seed: int = 0
    labeled_fraction: float | None = None
    max_paste: int = 4
    shuffle_aug: bool = True
    iou_mode: str = "3d"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 < self.tau_pair < 1.0:
            raise ValueError("tau_pair must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.burn_in_epochs < 0:
            raise ValueError("batch_size >= 1 and non-negative epoch counts required")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.ema_cadence not in ("epoch", "step"):
            raise ValueError("ema_cadence must be 'epoch' or 'step'")
        if self.iou_mode not in ("3d", "bev"):
            raise ValueError("iou_mode must be '3d' or 'bev'")
        x1, x2, y1, y2 = self.region
        if not (x1 < x2 and y1 < y2):
            raise ValueError("region must satisfy x1 < x2 and y1 < y2")


# ---------------------------------------------------------------------------
# EMA


def ema_update(theta_t, theta_s, alpha: float) -> np.ndarray:
    """Teacher update: ``theta_t * alpha + theta_s * (1 - alpha)``."""
    theta_t = np.asarray(theta_t, dtype=np.float64)
    theta_s = np.asarray(theta_s, dtype=np.float64)
    if theta_t.shape != theta_s.shape:
        raise DimMismatch(f"teacher {theta_t.shape} vs student {theta_s.shape}")
    return theta_t * alpha + theta_s * (1.0 - alpha)


# ---------------------------------------------------------------------------
# losses


def smooth_l1(r, beta: float = SMOOTH_L1_BETA):
    a = np.abs(r)
    return np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)


def smooth_l1_grad(r, beta: float = SMOOTH_L1_BETA):
    return np.where(np.abs(r) < beta, r / beta, np.sign(r))


def bce_with_logits(z, y):
    """Binary cross-entropy of sigmoid(z) against target y, stable form."""
    return np.logaddexp(0.0, z) - y * z


def _wrap_half_pi(a):
    return (a + math.pi / 2) % math.pi - math.pi / 2


@dataclass
class Targets:
    cls_target: np.ndarray
    cls_weight: np.ndarray
    obj_target: np.ndarray
    obj_weight: np.ndarray
    match: list            # per proposal: (label Box3D, weight) or None


def assign_targets(props: Proposals, classes: np.ndarray, strong: Sequence[Box3D],
                   weighted: Sequence[tuple]) -> Targets:
    labels = [(b, 1.0) for b in strong] + [(b, float(w)) for b, w in weighted]
    m = len(props)
    ct, cw = np.zeros(m), np.ones(m)
    ot, ow = np.zeros(m), np.ones(m)
    match = [None] * m
    for k, raw in enumerate(props.boxes):
        best_same, best_any = (None, MATCH_IOU), (None, MATCH_IOU)
        for lab in labels:
            v = iou_3d(raw, lab[0])
            if v > best_any[1]:
                best_any = (lab, v)
            if lab[0].class_id == classes[k] and v > best_same[1]:
                best_same = (lab, v)
        if best_same[0] is not None:
            ct[k], cw[k] = 1.0, best_same[0][1]
            match[k] = best_same[0]
        if best_any[0] is not None:
            ot[k], ow[k] = 1.0, best_any[0][1]
    return Targets(ct, cw, ot, ow, match)


def scene_loss(props: Proposals, strong, weighted, theta, n_classes: int,
               with_grad: bool = False):
    """Loss of one scene's proposals; optionally its gradient w.r.t. ``theta``."""
    lay = ParamLayout(n_classes)
    grad = np.zeros(lay.size) if with_grad else None
    if len(props) == 0:
        return (0.0, grad) if with_grad else 0.0
    head = run_head(props, theta, n_classes)
    tg = assign_targets(props, head.classes, strong, weighted)

    loss = float(np.sum(tg.cls_weight * bce_with_logits(head.cls_logit, tg.cls_target)))
    loss += float(np.sum(tg.obj_weight * bce_with_logits(head.obj_logit, tg.obj_target)))

    sizes = np.exp(head.log_size)
    reg_grad_size = np.zeros_like(sizes)
    for k, lab in enumerate(tg.match):
        if lab is None:
            continue
        box, w = lab
        raw = props.boxes[k]
        r_center = np.array([raw.cx - box.cx, raw.cy - box.cy, raw.cz - box.cz])
        r_size = sizes[k] - box.size
        r_yaw = _wrap_half_pi(raw.yaw - box.yaw)
        loss += w * float(smooth_l1(r_center).sum() + smooth_l1(r_size).sum()
                          + smooth_l1(r_yaw))
        if with_grad:
            reg_grad_size[k] = w * smooth_l1_grad(r_size)

    if not with_grad:
        return loss

    priors = lay.priors(theta)
    dz = tg.cls_weight * (sigmoid(head.cls_logit) - tg.cls_target)
    dzo = tg.obj_weight * (sigmoid(head.obj_logit) - tg.obj_target)
    gpri = lay.priors(grad)
    grefine = lay.refine(grad)
    for k in range(len(props)):
        c = head.classes[k]
        gw = lay.cls(grad, c)
        wc = lay.cls(theta, c)
        gw[0] += dz[k]
        gw[1:1 + N_CLS_FEATURES] += dz[k] * props.cls_features[k]
        gw[-1] += -dz[k] * head.size_gap[k]
        # d(gap)/d(prior) = -2 (log_size - prior)
        gpri[c] += dz[k] * (-wc[-1]) * (-2.0 * (props.log_size[k] - priors[c]))
        gsize = reg_grad_size[k] * sizes[k]
        grefine[c][:, 0] += gsize
        grefine[c][:, 1:] += np.outer(gsize, props.features[k])
    go = lay.obj(grad)
    go[0] += dzo.sum()
    go[1:] += dzo @ props.obj_features
    return loss, grad


def view_proposals(view: TrainingView, theta) -> Proposals:
    return extract_proposals(view.points.data, theta, view.shuffled, view.perm)


def compute_loss(views: Sequence[TrainingView], preds: Sequence[Proposals], theta,
                 n_classes: int) -> tuple[float, float, float]:
    """(L_s, L_u, L) summed over the views."""
    ls = lu = 0.0
    for view, props in zip(views, preds):
        val = scene_loss(props, view.strong, view.weighted, theta, n_classes)
        if view.labeled:
            ls += val
        else:
            lu += val
    return ls, lu, ls + lu


def batch_loss(theta, batch: Sequence[TrainingView], n_classes: int,
               with_grad: bool = False):
    """Mean per-scene loss of a batch, proposals recomputed from ``theta``."""
    lay = ParamLayout(n_classes)
    total, grad = 0.0, np.zeros(lay.size)
    for view in batch:
        props = view_proposals(view, theta)
        if with_grad:
            val, g = scene_loss(props, view.strong, view.weighted, theta, n_classes, True)
            grad += g
        else:
            val = scene_loss(props, view.strong, view.weighted, theta, n_classes)
        total += val
    n = max(len(batch), 1)
    return (total / n, grad / n) if with_grad else total / n


class Adam:
    """Adam optimizer state for a flat parameter vector."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m, self.v = np.zeros_like(theta), np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


def train_step(theta_s, batch: Sequence[TrainingView], lr: float, n_classes: int,
               optimizer: Adam | None = None) -> np.ndarray:
    """One gradient step on the batch loss (plain descent without an optimizer)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    theta_s = np.asarray(theta_s, dtype=np.float64)
    _, grad = batch_loss(theta_s, batch, n_classes, with_grad=True)
    if optimizer is not None:
        return optimizer.step(theta_s, grad, lr)
    return theta_s - lr * grad


# ---------------------------------------------------------------------------
# views and augmentation


def labeled_view(scene: Scene) -> TrainingView:
    return TrainingView(scene.scene_id, scene.points, list(scene.labels), [], labeled=True)


def augment_view(view: TrainingView, db, rng: np.random.Generator, cfg: TrainConfig,
                 shuffle: bool) -> TrainingView:
    """GT-sampling paste, then (optionally) patch shuffle of the student input."""
    occupied = list(view.strong) + [b for b, _ in view.weighted]
    base = Scene(view.scene_id, view.points, occupied)
    pasted = augment.gt_sample_paste(base, db, rng, cfg.max_paste)
    new_boxes = pasted.labels[len(occupied):]
    out = replace(view, points=pasted.points, strong=list(view.strong) + new_boxes)
    if shuffle:
        clipped = augment.clip_scene(Scene(out.scene_id, out.points), cfg.region)
        shuffled, perm = augment.shuffle_points(clipped, cfg.rows, cfg.cols, cfg.region, rng)
        out = replace(out, points=clipped.points, shuffled=shuffled.points.data, perm=perm)
    return out


def run_epoch(theta, views: Sequence[TrainingView], db, cfg: TrainConfig,
              rng: np.random.Generator, optimizer: Adam, shuffle: bool,
              on_step: Callable | None = None) -> tuple[np.ndarray, float]:
    """One pass over ``views`` in random batches; returns (theta, mean batch loss)."""
    order = rng.permutation(len(views))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch = [augment_view(views[i], db, rng, cfg, shuffle)
                 for i in order[start:start + cfg.batch_size]]
        loss, grad = batch_loss(theta, batch, cfg.n_classes, with_grad=True)
        losses.append(loss)
        theta = optimizer.step(theta, grad, cfg.lr)
        if on_step is not None:
            on_step(theta)
    return theta, float(np.mean(losses)) if losses else 0.0


def burn_in(labeled: Sequence[Scene], cfg: TrainConfig,
            history: list | None = None,
            on_epoch: Callable | None = None) -> np.ndarray:
    """Fully supervised training on the labeled scenes only.

    ``history`` collects the mean training loss per epoch; ``on_epoch`` is
    called as ``on_epoch(epoch, theta)`` after every epoch.
    """
    if not labeled:
        raise NoLabeledData("burn-in needs at least one labeled scene")
    rng = np.random.default_rng([cfg.seed, 1])
    theta = init_params(cfg.n_classes, labeled)
    db = augment.build_gt_database(labeled)
    views = [labeled_view(s) for s in labeled]
    opt = Adam(cfg.lr)
    for epoch in range(cfg.burn_in_epochs):
        theta, loss = run_epoch(theta, views, db, cfg, rng, opt, shuffle=False)
        if history is not None:
            history.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, theta)
        log.debug("burn-in epoch %d loss %.4f", epoch, loss)
    return theta


# ---------------------------------------------------------------------------
# mutual learning


def make_detector(theta, n_classes: int):
    theta = np.array(theta, copy=True)

    def detect(points):
        return toy_detect(points, theta, n_classes)
    return detect


@dataclass
class MutualState:
    teacher: np.ndarray
    student: np.ndarray
    labeled: list
    unlabeled: list
    cfg: TrainConfig
    epoch: int = 0                                     # completed mutual-learning epochs
    mined: dict = field(default_factory=dict)          # scene id -> (scene, high boxes)
    labels: dict = field(default_factory=dict)         # scene id -> HierarchicalLabels
    thresholds: DualThresholds | None = None
    optimizer: Adam | None = None
    loss: float = float("nan")

    @classmethod
    def start(cls, theta_burn, labeled, unlabeled, cfg: TrainConfig) -> "MutualState":
        theta = np.asarray(theta_burn, dtype=np.float64)
        return cls(theta.copy(), theta.copy(), list(labeled), list(unlabeled), cfg,
                   optimizer=Adam(cfg.lr))


def mine_scene(scene: Scene, detector, th: DualThresholds, rng,
               mode: str = "3d") -> HierarchicalLabels:
    """Teacher predictions with consistency IoU, split into the three levels."""
    t = augment.sample_weak_transform(rng)
    preds = detector(scene.points.data)
    preds_aug = detector(augment.apply_transform_points(scene.points.data, t))
    for d in preds:
        d.v = consistency_iou(d, preds_aug, t, mode)
    return dedup_high(partition_predictions(preds, th))


def mutual_learning_epoch(state: MutualState, step_hook: Callable | None = None) -> MutualState:
    """Thresholds, then hierarchical mining, then one student epoch and EMA."""
    cfg = state.cfg
    rng = np.random.default_rng([cfg.seed, 2, state.epoch])
    teacher = make_detector(state.teacher, cfg.n_classes)
    class_ids = list(range(cfg.n_classes))

    dc = build_confident_set(state.labeled, state.mined)
    th = generate_dual_thresholds(dc, teacher, rng, class_ids, cfg.tau_pair,
                                  epoch=state.epoch + 1, mode=cfg.iou_mode)

    labels, mined = {}, {}
    for scene in state.unlabeled:
        hl = mine_scene(scene, teacher, th, rng, cfg.iou_mode)
        labels[scene.scene_id] = hl
        mined[scene.scene_id] = (scene, [d.box for d in hl.high])

    views = [labeled_view(s) for s in state.labeled]
    views += [build_training_view(s, labels[s.scene_id]) for s in state.unlabeled]
    db = augment.build_gt_database(state.labeled)

    teacher_theta = state.teacher

    def on_step(theta):
        nonlocal teacher_theta
        if cfg.ema_cadence == "step":
            teacher_theta = ema_update(teacher_theta, theta, cfg.alpha)
        if step_hook is not None:
            step_hook(theta)

    student, loss = run_epoch(state.student, views, db, cfg, rng, state.optimizer,
                              shuffle=cfg.shuffle_aug, on_step=on_step)
    if cfg.ema_cadence == "epoch":
        teacher_theta = ema_update(teacher_theta, student, cfg.alpha)

    return replace(state, teacher=teacher_theta, student=student, epoch=state.epoch + 1,
                   mined=mined, labels=labels, thresholds=th, loss=loss)
