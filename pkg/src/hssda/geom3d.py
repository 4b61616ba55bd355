"""Oriented 3D box geometry.

Boxes are vertical prisms: a rotated rectangle in bird's-eye view (BEV)
extruded along z. Intersections are computed by clipping one BEV rectangle
against the other (Sutherland-Hodgman) and multiplying by the vertical
overlap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

AREA_EPS = 1e-12


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, size (l along heading, w, h) and yaw about z."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError(
                f"box dimensions must be positive, got "
                f"({self.length}, {self.width}, {self.height})")
        vals = (self.cx, self.cy, self.cz, self.length, self.width,
                self.height, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def zmin(self) -> float:
        return self.cz - 0.5 * self.height

    @property
    def zmax(self) -> float:
        return self.cz + 0.5 * self.height

    def bev_corners(self) -> np.ndarray:
        """Return the 4 BEV corners, counterclockwise, shape (4, 2)."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def corners(self) -> np.ndarray:
        """Return the 8 corners, shape (8, 3); bottom face first."""
        bev = self.bev_corners()
        bottom = np.column_stack([bev, np.full(4, self.zmin)])
        top = np.column_stack([bev, np.full(4, self.zmax)])
        return np.vstack([bottom, top])

    def replace(self, **changes) -> "Box3D":
        fields = dict(cx=self.cx, cy=self.cy, cz=self.cz, length=self.length,
                      width=self.width, height=self.height, yaw=self.yaw,
                      class_id=self.class_id)
        fields.update(changes)
        return Box3D(**fields)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.length, self.width,
                         self.height, self.yaw])

    @classmethod
    def from_array(cls, arr: Sequence[float], class_id: int = 0) -> "Box3D":
        return cls(*(float(v) for v in arr[:7]), class_id=int(class_id))


@dataclass
class Detection:
    """A predicted box with its confidence, objectness and consistency IoU."""

    box: Box3D
    s_cls: float
    s_obj: float
    v: float | None = None

    def __post_init__(self):
        for name in ("s_cls", "s_obj", "v"):
            val = getattr(self, name)
            if val is not None and not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")

    @property
    def class_id(self) -> int:
        return self.box.class_id


@dataclass
class PointCloud:
    """n points as an (n, 3 + r) float array: x, y, z then r extra features."""

    data: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] < 3:
            raise ValueError(f"point array must be (n, >=3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("point coordinates must be finite")
        self.data = data

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.data[index])


# ---------------------------------------------------------------------------
# Polygon clipping


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Clip a polygon against the half-plane left of the directed edge a->b."""
    if not subject:
        return []
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    out = []
    prev = subject[-1]
    s_prev = side(prev)
    for cur in subject:
        s_cur = side(cur)
        if s_cur >= 0.0:
            if s_prev < 0.0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]),
                            prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif s_prev >= 0.0:
            t = s_prev / (s_prev - s_cur)
            out.append((prev[0] + t * (cur[0] - prev[0]),
                        prev[1] + t * (cur[1] - prev[1])))
        prev, s_prev = cur, s_cur
    return out


def polygon_area(poly) -> float:
    """Shoelace area of a simple polygon given as a vertex sequence."""
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def convex_clip(subject: np.ndarray, clipper: np.ndarray) -> list:
    """Intersect two convex CCW polygons; returns the clipped vertex list."""
    poly = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        poly = _clip(poly, clipper[i], clipper[(i + 1) % n])
        if not poly:
            break
    return poly


def _bev_disjoint(a: Box3D, b: Box3D) -> bool:
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    return math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    if _bev_disjoint(a, b):
        return 0.0
    area = polygon_area(convex_clip(a.bev_corners(), b.bev_corners()))
    return area if area >= AREA_EPS else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two rotated BEV rectangles."""
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.length * a.width + b.length * b.width - inter
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two oriented boxes."""
    dz = min(a.zmax, b.zmax) - max(a.zmin, b.zmin)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter == 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D],
               mode: str = "3d") -> np.ndarray:
    """Pairwise IoU matrix of shape (len(boxes_a), len(boxes_b))."""
    if mode == "3d":
        fn = iou_3d
    elif mode == "bev":
        fn = bev_iou
    else:
        raise ValueError(f"unknown IoU mode {mode!r}")
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


# ---------------------------------------------------------------------------
# Point membership


def to_box_frame(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Express points in the box's local frame (translate, then rotate by -yaw)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    d = xyz - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.empty_like(d)
    local[:, 0] = c * d[:, 0] + s * d[:, 1]
    local[:, 1] = -s * d[:, 0] + c * d[:, 1]
    local[:, 2] = d[:, 2]
    return local


def points_in_box_mask(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    local = to_box_frame(xyz, box)
    half = 0.5 * box.size
    return np.all(np.abs(local) <= half, axis=1)


def points_in_box(pc: PointCloud, box: Box3D) -> np.ndarray:
    """Indices of points inside the closed box."""
    return np.flatnonzero(points_in_box_mask(pc.xyz, box))


def remove_points_in_boxes(pc: PointCloud, boxes: Iterable[Box3D]) -> PointCloud:
    """Drop every point lying in any of the boxes; survivor order is kept."""
    keep = np.ones(len(pc), dtype=bool)
    for box in boxes:
        keep &= ~points_in_box_mask(pc.xyz, box)
    return pc.subset(keep)
