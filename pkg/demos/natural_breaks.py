"""Per-class thresholds from natural breaks.

A pool of scores drawn from three bumps (false alarms, borderline hits,
clean hits) is cut into three groups with minimal within-group variance.
The two cuts become the low and the high threshold.
"""
import numpy as np

from hssda.breaks import dual_threshold, fallback_thresholds, jenks_breaks

rng = np.random.default_rng(0)
pool = np.clip(np.concatenate([rng.normal(0.15, 0.05, 150),
                               rng.normal(0.50, 0.07, 80),
                               rng.normal(0.88, 0.04, 120)]), 0, 1)

res = jenks_breaks(pool, 3)
print("breaks:", np.round(res.breaks, 4))
print("group sizes:", np.bincount(res.labels))
print(f"within-group SSE {res.objective:.4f} vs total SSE {((pool - pool.mean()) ** 2).sum():.4f}")

low, high = dual_threshold(pool)
print(f"\n(low, high) = ({low:.4f}, {high:.4f})")

# small or flat pools fall back to half the max and the max
print("\nfallback for [0.2, 0.4, 0.8]:", fallback_thresholds([0.2, 0.4, 0.8]))
print("empty pool:", dual_threshold([]))

# a pool of identical scores has nothing to split
print("flat pool:", dual_threshold(np.full(50, 0.7)))
