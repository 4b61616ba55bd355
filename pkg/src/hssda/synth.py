"""Synthetic LiDAR-like scenes with known ground truth.

Objects are boxes whose faces (all but the bottom) are sampled with points.
Each scene also carries unlabeled distractors and uniform clutter. Distractors
are Gaussian blobs, boxes of arbitrary size, or look-alikes: a class template
with one dimension stretched or shrunk (the van-next-to-a-car case).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import quantize_box
from .geom3d import Box3D, PointCloud, bev_iou
from .scene import Scene


@dataclass(frozen=True)
class ObjectClass:
    name: str
    size: tuple          # nominal (l, w, h)
    points: tuple        # (min, max) points per object


DEFAULT_CLASSES = (
    ObjectClass("Car", (3.9, 1.6, 1.56), (80, 400)),
    ObjectClass("Pedestrian", (0.8, 0.6, 1.73), (20, 120)),
    ObjectClass("Cyclist", (1.76, 0.6, 1.73), (30, 150)),
)


@dataclass
class SynthParams:
    classes: tuple = DEFAULT_CLASSES
    n_labeled: int = 40
    n_unlabeled: int = 160
    n_test: int = 60
    objects_per_scene: tuple = (3, 7)
    distractors_per_scene: tuple = (2, 5)
    distractor_points: tuple = (20, 250)
    lookalike_fraction: float = 0.4
    clutter_density: float = 1.0      # points per m^2 of BEV region
    noise_sigma: float = 0.03
    size_jitter: float = 0.08
    region: tuple = (0.0, 40.0, -20.0, 20.0)
    z_range: tuple = (0.0, 2.5)

    def __post_init__(self):
        if self.n_labeled < 0 or self.n_unlabeled < 0 or self.n_test < 0:
            raise ValueError("scene counts must be non-negative")
        for name in ("objects_per_scene", "distractors_per_scene", "distractor_points"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a range (lo <= hi, lo >= 0)")
        for c in self.classes:
            if c.points[0] < 1 or c.points[1] < c.points[0]:
                raise ValueError(f"bad point range for class {c.name}")
            if min(c.size) <= 0:
                raise ValueError(f"bad size for class {c.name}")
        if not 0.0 <= self.lookalike_fraction <= 1.0:
            raise ValueError("lookalike_fraction must lie in [0, 1]")
        if self.clutter_density < 0 or self.noise_sigma < 0:
            raise ValueError("clutter density and noise must be non-negative")
        x1, x2, y1, y2 = self.region
        if not (x1 < x2 and y1 < y2):
            raise ValueError("region must satisfy x1 < x2 and y1 < y2")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


def sample_box_surface(box: Box3D, n: int, rng: np.random.Generator,
                       noise: float = 0.0) -> np.ndarray:
    """n points on the 4 side faces and the top face, uniform by area.

    Noise is added in the box frame and clipped to the box, so the box stays a
    tight enclosure of its points.
    """
    l, w, h = box.length, box.width, box.height
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    sx = np.array([0.5, -0.5])
    for f in range(5):
        m = face == f
        if f < 2:
            local[m] = np.column_stack([np.full(m.sum(), sx[f] * l), u[m] * w, v[m] * h])
        elif f < 4:
            local[m] = np.column_stack([u[m] * l, np.full(m.sum(), sx[f - 2] * w), v[m] * h])
        else:
            local[m] = np.column_stack([u[m] * l, v[m] * w, np.full(m.sum(), 0.5 * h)])
    if noise > 0:
        half = 0.5 * np.array([l, w, h])
        local = np.clip(local + rng.normal(scale=noise, size=local.shape), -half, half)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    world[:, 2] = local[:, 2] + box.cz
    return world


def _place(rng, region, footprint, placed, margin=0.6, tries=200):
    x1, x2, y1, y2 = region
    l, w, h = footprint
    pad = 0.5 * max(l, w) + 0.2
    for _ in range(tries):
        cx = rng.uniform(x1 + pad, x2 - pad)
        cy = rng.uniform(y1 + pad, y2 - pad)
        yaw = rng.uniform(-np.pi, np.pi)
        cand = Box3D(cx, cy, 0.5 * h, l, w, h, yaw)
        grown = cand.replace(length=l + 2 * margin, width=w + 2 * margin)
        if all(bev_iou(grown, p) == 0.0 for p in placed):
            return cand
    return None


def generate_scene(scene_id: str, params: SynthParams, rng: np.random.Generator) -> Scene:
    placed: list[Box3D] = []
    labels: list[Box3D] = []
    chunks = []

    n_obj = int(rng.integers(params.objects_per_scene[0], params.objects_per_scene[1] + 1))
    for _ in range(n_obj):
        cid = int(rng.integers(len(params.classes)))
        cls = params.classes[cid]
        jit = 1.0 + rng.uniform(-params.size_jitter, params.size_jitter, size=3)
        size = np.asarray(cls.size) * jit
        box = _place(rng, params.region, size, placed)
        if box is None:
            continue
        # stored at label-file precision so disk and memory agree exactly
        box = quantize_box(box.replace(class_id=cid))
        placed.append(box)
        labels.append(box)
        n = int(rng.integers(cls.points[0], cls.points[1] + 1))
        chunks.append(sample_box_surface(box, n, rng, params.noise_sigma))

    n_dis = int(rng.integers(params.distractors_per_scene[0], params.distractors_per_scene[1] + 1))
    for _ in range(n_dis):
        n = int(rng.integers(params.distractor_points[0], params.distractor_points[1] + 1))
        kind = rng.random()
        if kind < params.lookalike_fraction:
            # a class template with one dimension clearly off (vans, poles, bins)
            tmpl = params.classes[int(rng.integers(len(params.classes)))]
            size = np.asarray(tmpl.size, dtype=np.float64).copy()
            dim = int(rng.integers(3))
            size[dim] *= rng.uniform(1.35, 1.7) if rng.random() < 0.5 else rng.uniform(0.5, 0.7)
            size[:2] = np.sort(size[:2])[::-1]
            box = _place(rng, params.region, size, placed)
            if box is None:
                continue
            placed.append(box)
            n = int(rng.integers(tmpl.points[0], tmpl.points[1] + 1))
            pts = sample_box_surface(box, n, rng, params.noise_sigma)
        elif kind < params.lookalike_fraction + 0.5 * (1 - params.lookalike_fraction):
            sig = rng.uniform(0.15, 0.6, size=2)
            sz = rng.uniform(0.3, 0.9)
            box = _place(rng, params.region, (4 * sig[0], 4 * sig[1], 2 * sz + 0.5), placed)
            if box is None:
                continue
            placed.append(box)
            local = rng.normal(size=(n, 3)) * np.array([sig[0], sig[1], sz])
            local[:, 2] = np.abs(local[:, 2])
            c, s = np.cos(box.yaw), np.sin(box.yaw)
            pts = np.column_stack([c * local[:, 0] - s * local[:, 1] + box.cx,
                                   s * local[:, 0] + c * local[:, 1] + box.cy,
                                   local[:, 2]])
        else:
            size = np.exp(rng.uniform(np.log([0.4, 0.3, 0.5]), np.log([5.0, 2.2, 2.4])))
            size[:2] = np.sort(size[:2])[::-1]
            box = _place(rng, params.region, size, placed)
            if box is None:
                continue
            placed.append(box)
            pts = sample_box_surface(box, n, rng, params.noise_sigma)
        chunks.append(pts)

    obj = np.vstack(chunks) if chunks else np.zeros((0, 3))
    x1, x2, y1, y2 = params.region
    n_clutter = int(rng.poisson(params.clutter_density * (x2 - x1) * (y2 - y1)))
    clutter = np.column_stack([rng.uniform(x1, x2, n_clutter), rng.uniform(y1, y2, n_clutter),
                               rng.uniform(*params.z_range, n_clutter)])
    xyz = np.vstack([obj, clutter])
    intensity = rng.uniform(0.0, 1.0, size=(len(xyz), 1))
    data = np.hstack([xyz, intensity]).astype(np.float32).astype(np.float64)
    return Scene(scene_id, PointCloud(data), labels)


@dataclass
class SynthDataset:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)     # labels kept for evaluation only
    test: list = field(default_factory=list)


def generate_dataset(params: SynthParams, rng: np.random.Generator) -> SynthDataset:
    ds = SynthDataset()
    for i in range(params.n_labeled):
        ds.labeled.append(generate_scene(f"L{i:05d}", params, rng))
    for i in range(params.n_unlabeled):
        ds.unlabeled.append(generate_scene(f"U{i:05d}", params, rng))
    for i in range(params.n_test):
        ds.test.append(generate_scene(f"T{i:05d}", params, rng))
    return ds
