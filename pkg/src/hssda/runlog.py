"""Run logs: per-(epoch, class) threshold lines and per-epoch metric rows.

Both files are written through a single owner and formatted with fixed
precision so that two runs with the same config and seed are byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from .breaks import MEASURES
from .formats import IoFailure, MalformedFile
from .threshold_gen import ClassThresholds, DualThresholds

THRESHOLD_KEYS = tuple(f"{m}_{side}" for m in MEASURES for side in ("low", "high"))
RECORD_KEYS = ("epoch", "class_id", "class_name") + THRESHOLD_KEYS + ("pool_size",)


def threshold_records(th: DualThresholds, class_names: Sequence[str]) -> list[dict]:
    """One record per class, classes in id order."""
    out = []
    for c in sorted(th.per_class):
        rec = {"epoch": int(th.epoch), "class_id": int(c), "class_name": class_names[c]}
        rec.update(th.per_class[c].as_dict())
        rec["pool_size"] = int(th.pool_sizes.get(c, 0))
        out.append(rec)
    return out


def validate_record(rec: dict) -> dict:
    if not isinstance(rec, dict) or set(rec) != set(RECORD_KEYS):
        raise ValueError(f"threshold record must have exactly the keys {RECORD_KEYS}")
    ClassThresholds.from_dict(rec)      # low < high within [0, 1]
    if not isinstance(rec["epoch"], int) or rec["epoch"] < 0:
        raise ValueError("epoch must be a non-negative integer")
    return rec


def _line(rec: dict) -> str:
    return json.dumps({k: rec[k] for k in RECORD_KEYS}, separators=(", ", ": "))


def append_threshold_log(path, records: Sequence[dict]) -> None:
    text = "".join(_line(validate_record(r)) + "\n" for r in records)
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot append to {path}: {exc.strerror or exc}") from exc


def read_threshold_log(path) -> list[dict]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from exc
    out = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(validate_record(json.loads(line)))
        except (json.JSONDecodeError, ValueError, KeyError) as exc:
            raise MalformedFile(path, str(exc), line=i) from None
    return out


def thresholds_from_records(records: Sequence[dict]) -> DualThresholds:
    """Rebuild the thresholds of one epoch from its records."""
    epochs = {r["epoch"] for r in records}
    if len(epochs) != 1:
        raise ValueError("records must come from a single epoch")
    per_class = {r["class_id"]: ClassThresholds.from_dict(r) for r in records}
    sizes = {r["class_id"]: r["pool_size"] for r in records}
    return DualThresholds(per_class, epochs.pop(), sizes)


def thresholds_document(th: DualThresholds, class_names: Sequence[str]) -> dict:
    """Output of the one-shot ``thresholds`` command."""
    return {"epoch": int(th.epoch), "thresholds": threshold_records(th, class_names)}


# ---------------------------------------------------------------------------
# metrics CSV


def metrics_header(class_names: Sequence[str]) -> list[str]:
    return (["epoch"] + [f"ap_{n}" for n in class_names]
            + ["precision", "correct", "total", "recall", "n_high", "n_ambiguous", "n_low"])


def _fmt(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


class MetricsWriter:
    """Append-only CSV writer; the header is written on creation."""

    def __init__(self, path, class_names: Sequence[str]):
        self.path = Path(path)
        self.class_names = list(class_names)
        self._write(metrics_header(self.class_names), mode="w")

    def _write(self, row, mode="a"):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(row)
        try:
            with open(self.path, mode, encoding="utf-8", newline="") as fh:
                fh.write(buf.getvalue())
        except OSError as exc:
            raise IoFailure(f"cannot write {self.path}: {exc.strerror or exc}") from exc

    def append(self, epoch: int, ap: dict, precision=None, recall=None,
               counts=(None, None, None)) -> None:
        row = [epoch] + [_fmt(float(ap[c])) if c in ap else "null"
                         for c in range(len(self.class_names))]
        if precision is None:
            row += ["null", "null", "null"]
        else:
            row += [str(precision), precision.correct, precision.total]
        row += [_fmt(recall)] + [_fmt(c) for c in counts]
        self._write(row)


def read_metrics(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from exc
