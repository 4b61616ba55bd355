"""On-disk scene formats.

* points: little-endian float32 records (x, y, z, intensity), KITTI ``.bin``
  compatible;
* labels: one object per line, ``class cx cy cz l w h yaw`` in fixed decimal;
* manifest: JSON listing scene ids, file paths and their split.

Ground truth for unlabeled and test scenes goes to a separate eval-only
manifest under ``eval/``. The training loaders never open it.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geom3d import Box3D, PointCloud
from .scene import Scene

RECORD = np.dtype("<f4")
RECORD_BYTES = 16
LABEL_DECIMALS = 6
MANIFEST = "manifest.json"
EVAL_MANIFEST = os.path.join("eval", "manifest.json")
SPLITS = ("labeled", "unlabeled", "test")
FORMAT_VERSION = 1


class IoFailure(OSError):
    pass


class MalformedFile(ValueError):
    """A file violates its format; ``where`` is a byte offset or line number."""

    def __init__(self, path, message: str, *, offset: int | None = None,
                 line: int | None = None):
        self.path, self.offset, self.line = str(path), offset, line
        where = f" at byte {offset}" if offset is not None else ""
        where += f" at line {line}" if line is not None else ""
        super().__init__(f"{path}{where}: {message}")


# ---------------------------------------------------------------------------
# points


def save_points(path, pc: PointCloud | np.ndarray) -> None:
    data = pc.data if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] not in (3, 4):
        raise ValueError("point files hold (x, y, z) or (x, y, z, intensity) records")
    if data.shape[1] == 3:
        data = np.hstack([data, np.zeros((len(data), 1))])
    _write_bytes(path, np.ascontiguousarray(data, dtype=RECORD).tobytes())


def load_points(path) -> PointCloud:
    raw = _read_bytes(path)
    if len(raw) % RECORD_BYTES:
        good = len(raw) - len(raw) % RECORD_BYTES
        raise MalformedFile(path, f"length {len(raw)} is not a multiple of {RECORD_BYTES}",
                            offset=good)
    arr = np.frombuffer(raw, dtype=RECORD).reshape(-1, 4)
    bad = np.flatnonzero(~np.isfinite(arr[:, :3]).all(axis=1))
    if len(bad):
        raise MalformedFile(path, "non-finite coordinate", offset=int(bad[0]) * RECORD_BYTES)
    return PointCloud(arr.astype(np.float64))


# ---------------------------------------------------------------------------
# labels


def format_label(box: Box3D, class_names: Sequence[str]) -> str:
    vals = (box.cx, box.cy, box.cz, box.length, box.width, box.height, box.yaw)
    return " ".join([class_names[box.class_id]] + [f"{v:.{LABEL_DECIMALS}f}" for v in vals])


def quantize_box(box: Box3D) -> Box3D:
    """The box exactly as a label file stores it."""
    vals = [round(v, LABEL_DECIMALS) for v in box.to_array()]
    out = Box3D(*vals, class_id=box.class_id)
    if out.yaw != vals[6]:          # rounding pushed yaw past pi and it wrapped
        out = out.replace(yaw=round(out.yaw, LABEL_DECIMALS))
    return out


def parse_label(line: str, class_names: Sequence[str], path="<labels>", lineno: int = 1) -> Box3D:
    parts = line.split()
    if len(parts) != 8:
        raise MalformedFile(path, f"expected 8 fields, got {len(parts)}", line=lineno)
    name = parts[0]
    if name not in class_names:
        raise MalformedFile(path, f"unknown class {name!r}", line=lineno)
    try:
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise MalformedFile(path, str(exc), line=lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise MalformedFile(path, "non-finite value", line=lineno)
    cx, cy, cz, l, w, h, yaw = vals
    if min(l, w, h) <= 0:
        raise MalformedFile(path, "box dimensions must be positive", line=lineno)
    return Box3D(cx, cy, cz, l, w, h, yaw, list(class_names).index(name))


def save_labels(path, boxes: Sequence[Box3D], class_names: Sequence[str]) -> None:
    text = "".join(format_label(b, class_names) + "\n" for b in boxes)
    _write_bytes(path, text.encode("ascii"))


def load_labels(path, class_names: Sequence[str]) -> list[Box3D]:
    try:
        text = _read_bytes(path).decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedFile(path, "labels must be ASCII", offset=exc.start) from None
    boxes = []
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            boxes.append(parse_label(line, class_names, path, i))
    return boxes


# ---------------------------------------------------------------------------
# scenes and manifests


@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    split: str
    points: str                 # relative to the dataset root
    labels: str | None = None   # only for labeled scenes in the training manifest


@dataclass
class Dataset:
    root: Path
    class_names: list
    entries: list

    def split(self, name: str) -> list[SceneEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, entry: SceneEntry) -> Scene:
        pc = load_points(self.root / entry.points)
        labels = load_labels(self.root / entry.labels, self.class_names) if entry.labels else []
        return Scene(entry.scene_id, pc, labels)

    def load_split(self, name: str) -> list[Scene]:
        return [self.load(e) for e in self.split(name)]


def save_scene(root, scene: Scene, class_names: Sequence[str], with_labels: bool = True,
               label_dir: str = "labels") -> tuple[str, str | None]:
    """Write points (and optionally labels); returns the relative paths."""
    pts = f"points/{scene.scene_id}.bin"
    save_points(Path(root) / pts, scene.points)
    lab = None
    if with_labels:
        lab = f"{label_dir}/{scene.scene_id}.txt"
        save_labels(Path(root) / lab, scene.labels, class_names)
    return pts, lab


def load_scene(points_path, labels_path=None, class_names: Sequence[str] = (),
               scene_id: str | None = None) -> Scene:
    sid = scene_id if scene_id is not None else Path(points_path).stem
    labels = load_labels(labels_path, class_names) if labels_path else []
    return Scene(sid, load_points(points_path), labels)


def write_dataset(root, class_names: Sequence[str], splits: dict) -> None:
    """Write ``splits`` ({split: [Scene]}) with eval-only labels kept apart."""
    root = Path(root)
    entries, sealed = [], []
    for split in SPLITS:
        for scene in splits.get(split, []):
            labeled = split == "labeled"
            pts, lab = save_scene(root, scene, class_names, with_labels=labeled)
            entries.append({"id": scene.scene_id, "split": split, "points": pts, "labels": lab})
            if not labeled:
                rel = f"eval/labels/{scene.scene_id}.txt"
                save_labels(root / rel, scene.labels, class_names)
                sealed.append({"id": scene.scene_id, "split": split, "labels": rel})
    doc = {"version": FORMAT_VERSION, "classes": list(class_names), "scenes": entries}
    write_json(root / MANIFEST, doc)
    write_json(root / EVAL_MANIFEST, {"version": FORMAT_VERSION, "classes": list(class_names),
                                      "scenes": sealed})


def _manifest(path) -> dict:
    doc = read_json(path)
    if not isinstance(doc, dict) or doc.get("version") != FORMAT_VERSION:
        raise MalformedFile(path, f"expected a version {FORMAT_VERSION} manifest object")
    classes = doc.get("classes")
    if not isinstance(classes, list) or not classes or not all(isinstance(c, str) for c in classes):
        raise MalformedFile(path, "'classes' must be a non-empty list of names")
    if not isinstance(doc.get("scenes"), list):
        raise MalformedFile(path, "'scenes' must be a list")
    return doc


def read_dataset(root) -> Dataset:
    """Training view of a dataset: labels only for the labeled split."""
    root = Path(root)
    path = root / MANIFEST
    doc = _manifest(path)
    entries, seen = [], set()
    for i, s in enumerate(doc["scenes"]):
        try:
            sid, split, pts, lab = s["id"], s["split"], s["points"], s.get("labels")
        except (KeyError, TypeError):
            raise MalformedFile(path, f"scene entry {i} lacks id/split/points") from None
        if split not in SPLITS:
            raise MalformedFile(path, f"scene {sid!r} has unknown split {split!r}")
        if sid in seen:
            raise MalformedFile(path, f"duplicate scene id {sid!r}")
        if split != "labeled" and lab is not None:
            raise MalformedFile(path, f"{split} scene {sid!r} must not carry labels")
        if split == "labeled" and lab is None:
            raise MalformedFile(path, f"labeled scene {sid!r} has no label file")
        seen.add(sid)
        entries.append(SceneEntry(sid, split, pts, lab))
    return Dataset(root, list(doc["classes"]), entries)


def read_eval_labels(root, class_names: Sequence[str] | None = None) -> dict:
    """Sealed ground truth of unlabeled and test scenes: {scene id: [Box3D]}."""
    root = Path(root)
    path = root / EVAL_MANIFEST
    doc = _manifest(path)
    names = class_names if class_names is not None else doc["classes"]
    out = {}
    for i, s in enumerate(doc["scenes"]):
        try:
            out[s["id"]] = load_labels(root / s["labels"], names)
        except (KeyError, TypeError):
            raise MalformedFile(path, f"scene entry {i} lacks id/labels") from None
    return out


# ---------------------------------------------------------------------------
# low-level helpers


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from exc


def write_json(path, doc) -> None:
    _write_bytes(path, (json.dumps(doc, indent=2, sort_keys=False) + "\n").encode("utf-8"))


def read_json(path):
    raw = _read_bytes(path)
    try:
        return json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MalformedFile(path, "not UTF-8", offset=exc.start) from None
    except json.JSONDecodeError as exc:
        raise MalformedFile(path, exc.msg, line=exc.lineno) from None
