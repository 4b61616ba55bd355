"""A small, fully inspectable 3D detector.

Backbone: a BEV grid of per-cell point counts plus a 3x3 neighbourhood sum
(the "feature map"). Proposals are connected components (8-neighbour, one-cell gaps
bridged) of cells whose neighbourhood sum clears a density threshold. Head: a box is fitted to each
component (PCA yaw, trimmed extents), its size is blended with a learned
per-class size prior, and two logistic heads give the confidence and the
objectness scores.

When a patch permutation is supplied the feature map is computed on the
shuffled points and unshuffled before the head, so the head sees the same
geometry but features near patch borders are corrupted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .augment import PatchPermutation, unshuffle_grid
from .geom3d import Box3D, Detection, iou_3d

CELL = 0.2
# fill, log1p(points), log1p(density), height, log length, log width, zmin, range
N_FEATURES = 8
N_OBJ_FEATURES = 4       # the first four of the above
_IU = np.triu_indices(N_FEATURES)
# confidence head input: linear features plus all pairwise products
N_CLS_FEATURES = N_FEATURES + len(_IU[0])
SIZE_BLEND = 0.5         # weight of the fitted size in log space
MIN_POINTS = 8
TRIM_PCT = 2.0
FILL_MARGIN = 0.1
NMS_IOU = 0.1
SCORE_THRESH = 0.1       # post-processing cut on reported detections

# fixed standardization of the raw head features
_FEAT_MEAN = np.array([0.6, 4.0, 1.5, 1.5, 0.3, -0.3, 0.0, 20.0])
_FEAT_STD = np.array([0.25, 1.0, 0.6, 0.6, 0.6, 0.5, 0.2, 10.0])


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass(frozen=True)
class ParamLayout:
    """Index map of the flat parameter vector.

    [density logit | per class: bias, feature weights, size-match weight |
     objectness bias, objectness weights | per class log size prior (l, w, h) |
     per class (3, 1 + N_FEATURES) log-size regressor (bias column first)]

    The priors only drive class assignment and the size-match term; the
    regressor carries its own bias so size regression cannot drag them.
    """

    n_classes: int

    @property
    def cls_width(self) -> int:
        return N_CLS_FEATURES + 2

    @property
    def cls_start(self) -> int:
        return 1

    @property
    def obj_start(self) -> int:
        return self.cls_start + self.n_classes * self.cls_width

    @property
    def prior_start(self) -> int:
        return self.obj_start + N_OBJ_FEATURES + 1

    @property
    def refine_start(self) -> int:
        return self.prior_start + 3 * self.n_classes

    @property
    def size(self) -> int:
        return self.refine_start + 3 * (N_FEATURES + 1) * self.n_classes

    def cls(self, theta, c):
        s = self.cls_start + c * self.cls_width
        return theta[s:s + self.cls_width]

    def obj(self, theta):
        return theta[self.obj_start:self.prior_start]

    def priors(self, theta):
        return theta[self.prior_start:self.refine_start].reshape(self.n_classes, 3)

    def refine(self, theta):
        return theta[self.refine_start:self.size].reshape(self.n_classes, 3, N_FEATURES + 1)


def density_threshold(theta) -> float:
    """Neighbourhood point count needed for a cell to be occupied (1..7)."""
    return 1.0 + 6.0 * float(sigmoid(theta[0]))


def init_params(n_classes: int, labeled_scenes=(), density_logit: float = 0.0) -> np.ndarray:
    """Initial parameters; size priors start at the labeled per-class mean log size."""
    lay = ParamLayout(n_classes)
    theta = np.zeros(lay.size)
    theta[0] = density_logit
    for c in range(n_classes):
        lay.cls(theta, c)[-1] = 0.0
    priors = lay.priors(theta)
    for c in range(n_classes):
        sizes = [b.size for s in labeled_scenes for b in s.labels if b.class_id == c]
        if sizes:
            priors[c] = np.log(np.asarray(sizes)).mean(axis=0)
    lay.refine(theta)[:, :, 0] = (1 - SIZE_BLEND) * priors
    return theta


@dataclass
class Proposals:
    """Head inputs for one scene; everything here is independent of the head params."""

    boxes: list = field(default_factory=list)                  # raw fitted Box3D
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, N_FEATURES)))
    cls_features: np.ndarray = field(default_factory=lambda: np.zeros((0, N_CLS_FEATURES)))
    obj_features: np.ndarray = field(default_factory=lambda: np.zeros((0, N_OBJ_FEATURES)))
    log_size: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.boxes)


# ---------------------------------------------------------------------------
# backbone


def _grid_for(xy: np.ndarray, cell: float):
    lo = np.floor(xy.min(axis=0) / cell) * cell
    hi = xy.max(axis=0)
    shape = (np.floor((hi - lo) / cell).astype(int) + 1)
    return lo, (cell, cell), (int(shape[0]), int(shape[1]))


def _region_grid(perm: PatchPermutation, cell: float):
    x1, x2, y1, y2 = perm.region
    h = perm.rows * max(1, int(round((x2 - x1) / cell / perm.rows)))
    w = perm.cols * max(1, int(round((y2 - y1) / cell / perm.cols)))
    return np.array([x1, y1]), ((x2 - x1) / h, (y2 - y1) / w), (h, w)


def _cells(xy, origin, cell_size, shape):
    i = np.floor((xy[:, 0] - origin[0]) / cell_size[0]).astype(np.int64)
    j = np.floor((xy[:, 1] - origin[1]) / cell_size[1]).astype(np.int64)
    return np.clip(i, 0, shape[0] - 1), np.clip(j, 0, shape[1] - 1)


def feature_map(xy, origin, cell_size, shape) -> np.ndarray:
    """(H, W, 2) grid: raw point count and 3x3 neighbourhood count."""
    i, j = _cells(xy, origin, cell_size, shape)
    counts = np.bincount(i * shape[1] + j, minlength=shape[0] * shape[1])
    counts = counts.reshape(shape).astype(np.float64)
    nbr = ndimage.uniform_filter(counts, size=3, mode="constant") * 9.0
    return np.stack([counts, np.round(nbr, 9)], axis=-1)


# ---------------------------------------------------------------------------
# box fitting


def fit_box(xyz: np.ndarray) -> Box3D:
    """Oriented box from PCA heading and trimmed extents."""
    xy = xyz[:, :2]
    mean = xy.mean(axis=0)
    cov = np.cov((xy - mean).T) if len(xy) > 1 else np.eye(2)
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, int(np.argmax(evals))]
    yaw = math.atan2(major[1], major[0])
    c, s = math.cos(yaw), math.sin(yaw)
    u = c * xy[:, 0] + s * xy[:, 1]
    v = -s * xy[:, 0] + c * xy[:, 1]
    lo_u, hi_u = np.percentile(u, [TRIM_PCT, 100 - TRIM_PCT])
    lo_v, hi_v = np.percentile(v, [TRIM_PCT, 100 - TRIM_PCT])
    lo_z, hi_z = np.percentile(xyz[:, 2], [TRIM_PCT, 100 - TRIM_PCT])
    length = max(hi_u - lo_u, 0.1)
    width = max(hi_v - lo_v, 0.1)
    height = max(hi_z - lo_z, 0.1)
    mu, mv = 0.5 * (lo_u + hi_u), 0.5 * (lo_v + hi_v)
    cx, cy = c * mu - s * mv, s * mu + c * mv
    if width > length:
        length, width, yaw = width, length, yaw + math.pi / 2
    return Box3D(cx, cy, 0.5 * (lo_z + hi_z), length, width, height, yaw)


def surface_fill(xyz: np.ndarray, box: Box3D, margin: float = FILL_MARGIN) -> float:
    """Fraction of points within ``margin`` of the box's closest face plane."""
    from .geom3d import to_box_frame

    local = np.abs(to_box_frame(xyz, box))
    gap = np.abs(0.5 * box.size - local).min(axis=1)
    return float(np.mean(gap <= margin))


# ---------------------------------------------------------------------------
# proposals and head


def extract_proposals(points: np.ndarray, theta, shuffled: np.ndarray | None = None,
                      perm: PatchPermutation | None = None,
                      cell: float = CELL) -> Proposals:
    """Cluster the BEV grid and fit one raw box per component.

    ``points`` are in the scene frame. With ``perm``, ``shuffled`` holds the
    same points (same order) after ``shuffle_points`` and the feature map is
    built from them, then unshuffled.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return Proposals()
    xy = pts[:, :2]
    if perm is not None:
        origin, cs, shape = _region_grid(perm, cell)
        fmap = unshuffle_grid(feature_map(np.asarray(shuffled)[:, :2], origin, cs, shape), perm)
    else:
        origin, cs, shape = _grid_for(xy, cell)
        fmap = feature_map(xy, origin, cs, shape)

    occupied = (fmap[..., 1] >= density_threshold(theta)) & (fmap[..., 0] >= 1)
    # bridge one-cell gaps so sparse objects are not split; only occupied
    # cells contribute points
    bridged = ndimage.binary_dilation(occupied, structure=np.ones((3, 3), dtype=bool))
    comp, n_comp = ndimage.label(bridged, structure=np.ones((3, 3)))
    comp[~occupied] = 0
    if n_comp == 0:
        return Proposals()
    i, j = _cells(xy, origin, cs, shape)
    point_comp = comp[i, j]
    order = np.argsort(point_comp, kind="stable")
    bounds = np.searchsorted(point_comp[order], np.arange(n_comp + 2))

    dens = ndimage.mean(fmap[..., 1], labels=comp, index=np.arange(1, n_comp + 1))
    boxes, feats, objf, logs = [], [], [], []
    for k in range(1, n_comp + 1):
        idx = order[bounds[k]:bounds[k + 1]]
        if len(idx) < MIN_POINTS:
            continue
        xyz = pts[idx, :3]
        box = fit_box(xyz)
        fill = surface_fill(xyz, box)
        raw = np.array([fill, math.log1p(len(idx)), math.log1p(dens[k - 1]), box.height,
                        math.log(box.length), math.log(box.width), box.zmin,
                        math.hypot(box.cx, box.cy)])
        phi = (raw - _FEAT_MEAN) / _FEAT_STD
        boxes.append(box)
        feats.append(phi)
        objf.append(phi[:N_OBJ_FEATURES])
        logs.append(np.log(box.size))
    if not boxes:
        return Proposals()
    feats = np.array(feats)
    return Proposals(boxes, feats, expand_features(feats), np.array(objf), np.array(logs))


def expand_features(phi: np.ndarray) -> np.ndarray:
    phi = np.atleast_2d(phi)
    return np.hstack([phi, phi[:, _IU[0]] * phi[:, _IU[1]]])


@dataclass
class HeadOutput:
    classes: np.ndarray      # (m,) assigned class
    size_gap: np.ndarray     # (m,) squared log-size distance to the assigned prior
    cls_logit: np.ndarray
    obj_logit: np.ndarray
    log_size: np.ndarray     # (m, 3) blended log size

    @property
    def s_cls(self):
        return sigmoid(self.cls_logit)

    @property
    def s_obj(self):
        return sigmoid(self.obj_logit)


def run_head(props: Proposals, theta, n_classes: int) -> HeadOutput:
    lay = ParamLayout(n_classes)
    m = len(props)
    if m == 0:
        z = np.zeros(0)
        return HeadOutput(z.astype(int), z, z, z, np.zeros((0, 3)))
    priors = lay.priors(theta)
    gaps = ((props.log_size[:, None, :] - priors[None]) ** 2).sum(axis=2)
    classes = np.argmin(gaps, axis=1)
    gap = gaps[np.arange(m), classes]
    W = np.stack([lay.cls(theta, c) for c in range(n_classes)])[classes]
    cls_logit = W[:, 0] + np.einsum("mf,mf->m", W[:, 1:1 + N_CLS_FEATURES], props.cls_features) \
        - W[:, -1] * gap
    ow = lay.obj(theta)
    obj_logit = ow[0] + props.obj_features @ ow[1:]
    reg = lay.refine(theta)[classes]
    log_size = SIZE_BLEND * props.log_size + reg[:, :, 0] \
        + np.einsum("mjf,mf->mj", reg[:, :, 1:], props.features)
    return HeadOutput(classes, gap, cls_logit, obj_logit, log_size)


def head_boxes(props: Proposals, head: HeadOutput) -> list[Box3D]:
    """Regressed boxes, never smaller than the fitted point extent."""
    out = []
    for k, raw in enumerate(props.boxes):
        l, w, h = np.maximum(np.exp(head.log_size[k]), raw.size)
        out.append(Box3D(raw.cx, raw.cy, raw.cz, float(l), float(w), float(h),
                         raw.yaw, int(head.classes[k])))
    return out


def nms(dets: list[Detection], iou_thresh: float = NMS_IOU) -> list[Detection]:
    """Greedy per-class NMS on 3D IoU; keeps the higher-confidence box."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].s_cls, k))
    kept: list[Detection] = []
    for k in order:
        d = dets[k]
        if all(o.class_id != d.class_id or iou_3d(o.box, d.box) <= iou_thresh for o in kept):
            kept.append(d)
    return kept


def toy_detect(points, theta, n_classes: int, shuffled=None, perm=None,
               apply_nms: bool = True, score_thresh: float = SCORE_THRESH) -> list[Detection]:
    """Detections for one point array (scene frame).

    Proposals with confidence below ``score_thresh`` are not reported.
    """
    if hasattr(points, "points"):
        points = points.points.data
    elif hasattr(points, "data"):
        points = points.data
    props = extract_proposals(points, theta, shuffled, perm)
    head = run_head(props, theta, n_classes)
    boxes = head_boxes(props, head)
    s_cls, s_obj = head.s_cls, head.s_obj
    dets = [Detection(b, float(s_cls[k]), float(s_obj[k])) for k, b in enumerate(boxes)
            if s_cls[k] >= score_thresh]
    return nms(dets) if apply_nms else dets
