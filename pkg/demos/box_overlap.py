"""Overlap of oriented boxes.

Two equal cars, one turned by 45 degrees about the shared center, and a
third one sitting half a car length ahead. The BEV overlap is the area of
the clipped footprint polygon; the 3D overlap multiplies it by the shared
height range.
"""
import math

import numpy as np

from hssda.geom3d import Box3D, bev_intersection_area, bev_iou, convex_clip, iou_3d, polygon_area

car = Box3D(10.0, 0.0, 0.78, 3.9, 1.6, 1.56, 0.0)
turned = car.replace(yaw=math.pi / 4)
ahead = car.replace(cx=car.cx + 1.95, cz=car.cz + 0.3)

print("footprint corners of the turned car:")
print(np.round(turned.bev_corners(), 3))

poly = convex_clip(car.bev_corners(), turned.bev_corners())
print(f"\nclipped polygon has {len(poly)} vertices, area {polygon_area(poly):.4f}")
print(f"same as bev_intersection_area: {bev_intersection_area(car, turned):.4f}")

for name, other in (("turned", turned), ("ahead", ahead)):
    print(f"{name:>7}: BEV IoU {bev_iou(car, other):.4f}   3D IoU {iou_3d(car, other):.4f}")

# the 'ahead' box overlaps half the footprint but is lifted by 0.3 m
h = car.height - 0.3
expected = (1.95 * 1.6 * h) / (2 * car.volume - 1.95 * 1.6 * h)
print(f"\nhand computation for 'ahead': {expected:.4f}")
