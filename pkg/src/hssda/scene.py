from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom3d import Box3D, PointCloud


@dataclass
class Scene:
    """A point cloud with its (possibly empty) list of annotated boxes."""

    scene_id: str
    points: PointCloud
    labels: list[Box3D] = field(default_factory=list)

    def with_points(self, points) -> "Scene":
        if not isinstance(points, PointCloud):
            points = PointCloud(np.asarray(points))
        return Scene(self.scene_id, points, list(self.labels))

    def with_labels(self, labels) -> "Scene":
        return Scene(self.scene_id, self.points, list(labels))
