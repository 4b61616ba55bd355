"""Plot per-class thresholds over epochs from a run's threshold log.

Usage: python scripts/plot_thresholds.py RUN_DIR [OUT.png]

One panel per measure (confidence, objectness, consistency IoU); one colour
per class; solid lines for the high threshold, dashed for the low one.
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from hssda.breaks import MEASURES  # noqa: E402
from hssda.pipeline import THRESHOLD_LOG  # noqa: E402
from hssda.runlog import read_threshold_log  # noqa: E402

TITLES = {"cls": "confidence", "obj": "objectness", "iou": "consistency IoU"}


def plot(records, out):
    classes = sorted({(r["class_id"], r["class_name"]) for r in records})
    fig, axes = plt.subplots(1, len(MEASURES), figsize=(4 * len(MEASURES), 3.5), sharey=True)
    for ax, m in zip(axes, MEASURES):
        for i, (cid, name) in enumerate(classes):
            rs = [r for r in records if r["class_id"] == cid]
            ep = [r["epoch"] for r in rs]
            ax.plot(ep, [r[f"{m}_high"] for r in rs], "-", color=f"C{i}", label=name)
            ax.plot(ep, [r[f"{m}_low"] for r in rs], "--", color=f"C{i}")
        ax.set_title(TITLES.get(m, m))
        ax.set_xlabel("epoch")
        ax.set_ylim(0, 1)
    axes[0].set_ylabel("threshold")
    axes[0].legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)


if __name__ == "__main__":
    if len(sys.argv) not in (2, 3):
        sys.exit(__doc__)
    run = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) == 3 else run / "thresholds.png"
    plot(read_threshold_log(run / THRESHOLD_LOG), out)
    print("saved", out)
