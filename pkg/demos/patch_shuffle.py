"""Weak and shuffle augmentation of one synthetic scene.

The weak transform (flips, scale, rotation) is invertible, so boxes predicted
on the transformed scene can be mapped back. The shuffle cuts the BEV region
into a grid and permutes the cells; feature maps computed on the shuffled
scene are put back in place with the inverse permutation.

Pass a file name to save a picture of the original and the shuffled scene.
"""
import sys

import numpy as np

from hssda.augment import (apply_transform_boxes, invert_transform_boxes, random_permutation,
                           shuffle_grid, shuffle_points, unshuffle_grid, weak_augment)
from hssda.geom3d import iou_3d
from hssda.synth import SynthParams, generate_scene

rng = np.random.default_rng(4)
params = SynthParams()
scene = generate_scene("demo", params, rng)
print(f"{len(scene.points)} points, {len(scene.labels)} objects")

weak, t = weak_augment(scene, rng)
print(f"\nweak transform: flip_x={t.flip_x} flip_y={t.flip_y} scale={t.scale:.3f} "
      f"rotation={np.degrees(t.yaw_rot):.1f} deg")
back = invert_transform_boxes(apply_transform_boxes(scene.labels, t), t)
print("IoU after the round trip:", [round(float(iou_3d(a, b)), 6) for a, b in zip(back, scene.labels)])

perm = random_permutation(2, 2, params.region, rng)
shuffled, _ = shuffle_points(scene, 2, 2, params.region, None, perm=perm)
print(f"\npatch permutation {perm.perm}: cell i goes to cell perm[i]")
print(f"{len(shuffled.points)} points inside the region after shuffling")

grid = rng.normal(size=(40, 40, 8))
restored = unshuffle_grid(shuffle_grid(grid, perm), perm)
print("feature map restored exactly:", np.array_equal(grid, restored))

if len(sys.argv) > 1:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 5), sharex=True, sharey=True)
    for ax, sc, title in zip(axes, (scene, shuffled), ("original", "shuffled")):
        ax.scatter(sc.points.xyz[:, 0], sc.points.xyz[:, 1], s=1, c="0.3")
        for b in sc.labels:
            c = np.vstack([b.bev_corners(), b.bev_corners()[:1]])
            ax.plot(c[:, 0], c[:, 1], "r-", lw=1)
        ax.set_title(title)
        ax.set_aspect("equal")
    fig.savefig(sys.argv[1], dpi=120, bbox_inches="tight")
    print("saved", sys.argv[1])
