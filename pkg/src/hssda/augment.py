"""Scene augmentations.

Weak augmentation (teacher side) is a similarity transform: optional flips,
an isotropic scale about the origin and a rotation about z, applied in that
order. Shuffle augmentation (student side) cuts the BEV region into an
R x C grid of patches and moves each patch to a permuted cell; feature maps
computed on the shuffled scene are moved back with ``unshuffle_grid``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geom3d import Box3D, PointCloud, bev_iou
from .scene import Scene

SCALE_RANGE = (0.91, 1.12)
ROT_RANGE = (-math.pi / 4, math.pi / 4)
KITTI_REGION = (0.0, 70.4, -40.0, 40.0)


class DegenerateRegion(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    """Flip (x -> -x, y -> -y), then scale about the origin, then rotate about z."""

    flip_x: bool = False
    flip_y: bool = False
    scale: float = 1.0
    yaw_rot: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()


def _rot2(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def apply_transform_points(points: np.ndarray, t: RigidTransform) -> np.ndarray:
    """Transform an (n, 3+r) point array; extra feature columns are untouched."""
    out = np.array(points, dtype=np.float64, copy=True)
    if t.flip_x:
        out[:, 0] = -out[:, 0]
    if t.flip_y:
        out[:, 1] = -out[:, 1]
    out[:, :3] *= t.scale
    out[:, :2] = out[:, :2] @ _rot2(t.yaw_rot).T
    return out


def invert_transform_points(points: np.ndarray, t: RigidTransform) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    out[:, :2] = out[:, :2] @ _rot2(-t.yaw_rot).T
    out[:, :3] /= t.scale
    if t.flip_y:
        out[:, 1] = -out[:, 1]
    if t.flip_x:
        out[:, 0] = -out[:, 0]
    return out


def _apply_box(b: Box3D, t: RigidTransform) -> Box3D:
    x, y, yaw = b.cx, b.cy, b.yaw
    if t.flip_x:
        x, yaw = -x, math.pi - yaw
    if t.flip_y:
        y, yaw = -y, -yaw
    x, y, z = x * t.scale, y * t.scale, b.cz * t.scale
    c, s = math.cos(t.yaw_rot), math.sin(t.yaw_rot)
    x, y = c * x - s * y, s * x + c * y
    return Box3D(x, y, z, b.length * t.scale, b.width * t.scale,
                 b.height * t.scale, yaw + t.yaw_rot, b.class_id)


def _invert_box(b: Box3D, t: RigidTransform) -> Box3D:
    c, s = math.cos(t.yaw_rot), math.sin(t.yaw_rot)
    x, y = c * b.cx + s * b.cy, -s * b.cx + c * b.cy
    yaw = b.yaw - t.yaw_rot
    x, y, z = x / t.scale, y / t.scale, b.cz / t.scale
    if t.flip_y:
        y, yaw = -y, -yaw
    if t.flip_x:
        x, yaw = -x, math.pi - yaw
    return Box3D(x, y, z, b.length / t.scale, b.width / t.scale,
                 b.height / t.scale, yaw, b.class_id)


def apply_transform_boxes(boxes: Sequence[Box3D], t: RigidTransform) -> list[Box3D]:
    return [_apply_box(b, t) for b in boxes]


def invert_transform_boxes(boxes: Sequence[Box3D], t: RigidTransform) -> list[Box3D]:
    return [_invert_box(b, t) for b in boxes]


def apply_transform_scene(scene: Scene, t: RigidTransform) -> Scene:
    pts = apply_transform_points(scene.points.data, t)
    return Scene(scene.scene_id, PointCloud(pts), apply_transform_boxes(scene.labels, t))


def sample_weak_transform(rng: np.random.Generator) -> RigidTransform:
    flip_x = bool(rng.random() < 0.5)
    flip_y = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*SCALE_RANGE))
    rot = float(rng.uniform(*ROT_RANGE))
    return RigidTransform(flip_x, flip_y, scale, rot)


def weak_augment(scene: Scene, rng: np.random.Generator) -> tuple[Scene, RigidTransform]:
    """Random flips, scale in [0.91, 1.12] and rotation in [-pi/4, pi/4]."""
    t = sample_weak_transform(rng)
    return apply_transform_scene(scene, t), t


# ---------------------------------------------------------------------------
# Shuffle data augmentation


@dataclass(frozen=True)
class PatchPermutation:
    """Patch ``src`` (row-major, rows along x) is moved to cell ``perm[src]``."""

    rows: int
    cols: int
    perm: tuple
    region: tuple  # (x1, x2, y1, y2)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        x1, x2, y1, y2 = self.region
        if not (x1 < x2 and y1 < y2):
            raise DegenerateRegion(f"empty region {self.region}")
        if sorted(self.perm) != list(range(self.rows * self.cols)):
            raise ValueError("perm must be a permutation of the patch indices")

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty(len(self.perm), dtype=np.int64)
        inv[np.asarray(self.perm)] = np.arange(len(self.perm))
        return inv

    @property
    def cell_size(self) -> tuple[float, float]:
        x1, x2, y1, y2 = self.region
        return (x2 - x1) / self.rows, (y2 - y1) / self.cols


def random_permutation(rows: int, cols: int, region, rng) -> PatchPermutation:
    perm = tuple(int(i) for i in rng.permutation(rows * cols))
    return PatchPermutation(rows, cols, perm, tuple(float(v) for v in region))


def region_mask(xyz: np.ndarray, region) -> np.ndarray:
    x1, x2, y1, y2 = region
    return ((xyz[:, 0] >= x1) & (xyz[:, 0] <= x2)
            & (xyz[:, 1] >= y1) & (xyz[:, 1] <= y2))


def patch_index(xy: np.ndarray, p: PatchPermutation) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) patch of in-region points; cells half-open, last one closed."""
    x1, _, y1, _ = p.region
    dx, dy = p.cell_size
    r = np.clip(np.floor((xy[:, 0] - x1) / dx).astype(np.int64), 0, p.rows - 1)
    c = np.clip(np.floor((xy[:, 1] - y1) / dy).astype(np.int64), 0, p.cols - 1)
    return r, c


def _patch_offsets(xy: np.ndarray, p: PatchPermutation) -> np.ndarray:
    r, c = patch_index(xy, p)
    dst = np.asarray(p.perm)[r * p.cols + c]
    dr, dc = dst // p.cols - r, dst % p.cols - c
    dx, dy = p.cell_size
    return np.column_stack([dr * dx, dc * dy])


def clip_scene(scene: Scene, region) -> Scene:
    """Keep in-region points; labels are kept as they are."""
    keep = region_mask(scene.points.xyz, region)
    return Scene(scene.scene_id, scene.points.subset(keep), list(scene.labels))


def shuffle_points(scene: Scene, rows: int, cols: int, region,
                   rng: np.random.Generator,
                   perm: PatchPermutation | None = None) -> tuple[Scene, PatchPermutation]:
    """Clip to ``region`` and move every BEV patch to its permuted cell.

    Surviving points keep their relative order. A box moves with the patch
    holding its center; boxes centered outside the region are dropped.
    """
    x1, x2, y1, y2 = region
    if not (x1 < x2 and y1 < y2):
        raise DegenerateRegion(f"empty region {region}")
    if perm is None:
        perm = random_permutation(rows, cols, region, rng)
    clipped = clip_scene(scene, region)
    pts = clipped.points.data.copy()
    if len(pts):
        pts[:, :2] += _patch_offsets(pts[:, :2], perm)

    boxes = []
    for b in scene.labels:
        center = np.array([[b.cx, b.cy]])
        if not region_mask(np.array([[b.cx, b.cy, 0.0]]), region)[0]:
            continue
        off = _patch_offsets(center, perm)[0]
        boxes.append(b.replace(cx=b.cx + off[0], cy=b.cy + off[1]))
    return Scene(scene.scene_id, PointCloud(pts), boxes), perm


def unshuffle_points(points: np.ndarray, p: PatchPermutation) -> np.ndarray:
    """Move shuffled points back to their source patches."""
    out = np.array(points, dtype=np.float64, copy=True)
    if not len(out):
        return out
    r, c = patch_index(out[:, :2], p)
    src = p.inverse[r * p.cols + c]
    dx, dy = p.cell_size
    out[:, 0] += (src // p.cols - r) * dx
    out[:, 1] += (src % p.cols - c) * dy
    return out


def _check_grid(grid: np.ndarray, p: PatchPermutation) -> None:
    if grid.ndim < 2:
        raise ShapeMismatch("grid must be at least 2-D (H, W[, F])")
    h, w = grid.shape[:2]
    if h % p.rows or w % p.cols:
        raise ShapeMismatch(
            f"grid {h}x{w} is not divisible into {p.rows}x{p.cols} patches")


def _move_blocks(grid: np.ndarray, p: PatchPermutation, mapping) -> np.ndarray:
    _check_grid(grid, p)
    h, w = grid.shape[:2]
    bh, bw = h // p.rows, w // p.cols
    out = np.empty_like(grid)
    for src, dst in enumerate(mapping):
        sr, sc = divmod(src, p.cols)
        dr, dc = divmod(int(dst), p.cols)
        out[dr * bh:(dr + 1) * bh, dc * bw:(dc + 1) * bw] = \
            grid[sr * bh:(sr + 1) * bh, sc * bw:(sc + 1) * bw]
    return out


def shuffle_grid(grid: np.ndarray, p: PatchPermutation) -> np.ndarray:
    """Move block ``src`` of an (H, W, ...) grid to block ``perm[src]``."""
    return _move_blocks(grid, p, p.perm)


def unshuffle_grid(grid: np.ndarray, p: PatchPermutation) -> np.ndarray:
    """Inverse of ``shuffle_grid``; channels are untouched."""
    return _move_blocks(grid, p, p.inverse)


# ---------------------------------------------------------------------------
# GT sampling


def build_gt_database(scenes: Sequence[Scene]) -> list[tuple[Box3D, np.ndarray]]:
    from .geom3d import points_in_box_mask

    db = []
    for scene in scenes:
        for box in scene.labels:
            mask = points_in_box_mask(scene.points.xyz, box)
            if mask.any():
                db.append((box, scene.points.data[mask].copy()))
    return db


def gt_sample_paste(scene: Scene, db, rng: np.random.Generator,
                    max_paste: int) -> Scene:
    """Paste up to ``max_paste`` database objects at their stored poses.

    A candidate is rejected if its BEV footprint touches any box already in
    the scene (including ones pasted earlier in the same call).
    """
    if not db or max_paste <= 0:
        return Scene(scene.scene_id, scene.points, list(scene.labels))
    n = min(max_paste, len(db))
    picks = rng.choice(len(db), size=n, replace=False)
    boxes = list(scene.labels)
    chunks = [scene.points.data]
    width = scene.points.data.shape[1]
    for i in picks:
        box, pts = db[int(i)]
        if any(bev_iou(box, other) > 0.0 for other in boxes):
            continue
        boxes.append(box)
        pts = np.asarray(pts, dtype=np.float64)
        if pts.shape[1] != width:
            padded = np.zeros((len(pts), width))
            k = min(width, pts.shape[1])
            padded[:, :k] = pts[:, :k]
            pts = padded
        chunks.append(pts)
    return Scene(scene.scene_id, PointCloud(np.vstack(chunks)), boxes)
