"""Sorting teacher predictions into strong, soft and discarded labels.

Each detection carries a confidence, an objectness and a consistency IoU
(agreement with the prediction on an augmented copy). A detection is kept as
a hard label only if all three clear the high thresholds of its class, and
dropped if any of them fails to clear the low ones. Everything in between is
trained on with weight confidence times objectness.
"""
import numpy as np

from hssda.geom3d import Box3D, Detection
from hssda.supervision import partition_predictions
from hssda.threshold_gen import ClassThresholds, DualThresholds

th = DualThresholds({0: ClassThresholds((0.3, 0.8), (0.3, 0.7), (0.4, 0.7)),
                     1: ClassThresholds.uniform(0.2, 0.6)})

box = Box3D(10, 0, 0.8, 3.9, 1.6, 1.56, 0.0, class_id=0)
preds = [
    Detection(box, 0.95, 0.90, 0.85),                        # clears every high threshold
    Detection(box.replace(cx=20), 0.95, 0.90, 0.70),         # IoU sits exactly on its high cut
    Detection(box.replace(cx=30), 0.60, 0.50, 0.55),
    Detection(box.replace(cx=40), 0.95, 0.25, 0.90),         # objectness below its low cut
    Detection(box.replace(cx=50, class_id=1), 0.65, 0.61, 0.7),
]
labels = partition_predictions(preds, th)

print("high:")
for d in labels.high:
    print(f"  x={d.box.cx:>4} class {d.class_id}")
print("ambiguous (weight):")
for d, w in labels.ambiguous:
    print(f"  x={d.box.cx:>4} class {d.class_id}  w={w:.4f}")
print("low:")
for d in labels.low:
    print(f"  x={d.box.cx:>4} class {d.class_id}")

weights = np.array([w for _, w in labels.ambiguous])
print("\nweights lie in [0, 1]:", bool(np.all((weights >= 0) & (weights <= 1))))
