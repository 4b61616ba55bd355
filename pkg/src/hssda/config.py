"""JSON run configuration with strict key checking.

A run config bundles the synthetic generator parameters, the training
config, the dataset and output directories, and the seed. Unknown keys are
rejected at every level; bounds are checked by the dataclasses themselves.
Relative paths resolve against the working directory.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .formats import read_json, write_json
from .learner import TrainConfig
from .synth import DEFAULT_CLASSES, ObjectClass, SynthParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    output_dir: str = "run"
    seed: int = 0
    eval_iou: float | None = 0.5        # None: per-class defaults (0.7 / 0.5 / 0.5)
    synth: SynthParams = field(default_factory=SynthParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.eval_iou is not None and not 0.0 < self.eval_iou < 1.0:
            raise ConfigError("eval_iou must lie in (0, 1) or be null")
        if len(self.synth.classes) != self.train.n_classes:
            raise ConfigError(f"train.n_classes={self.train.n_classes} but synth lists "
                              f"{len(self.synth.classes)} classes")

    @property
    def class_names(self) -> list[str]:
        return self.synth.class_names

    @property
    def data_path(self) -> Path:
        return self.base_dir / self.data_dir

    @property
    def output_path(self) -> Path:
        return self.base_dir / self.output_dir

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed,
                                   train=dataclasses.replace(self.train, seed=seed))


_TOP = {"data_dir", "output_dir", "seed", "eval_iou", "synth", "train"}
_TUPLES = {"objects_per_scene", "distractors_per_scene", "distractor_points", "region",
           "z_range"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _fields(cls, skip=()):
    return [f.name for f in dataclasses.fields(cls) if f.name not in skip]


def _classes(raw):
    if not isinstance(raw, list) or not raw:
        raise ConfigError("synth.classes must be a non-empty list")
    out = []
    for i, c in enumerate(raw):
        _check_keys(c, {"name", "size", "points"}, f"synth.classes[{i}]")
        try:
            out.append(ObjectClass(str(c["name"]), tuple(float(v) for v in c["size"]),
                                   tuple(int(v) for v in c["points"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"synth.classes[{i}]: {exc}") from None
        if len(out[-1].size) != 3 or len(out[-1].points) != 2:
            raise ConfigError(f"synth.classes[{i}]: size needs 3 values, points 2")
    return tuple(out)


def _build(cls, raw, where, convert):
    try:
        return cls(**{k: convert(k, v) for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(d: dict, base_dir=".") -> RunConfig:
    _check_keys(d, _TOP, "config")
    synth_raw = d.get("synth", {})
    _check_keys(synth_raw, _fields(SynthParams), "synth")
    synth_raw = dict(synth_raw)
    if "classes" in synth_raw:
        synth_raw["classes"] = _classes(synth_raw["classes"])
    synth = _build(SynthParams, synth_raw, "synth",
                   lambda k, v: tuple(v) if k in _TUPLES and isinstance(v, list) else v)

    train_raw = d.get("train", {})
    _check_keys(train_raw, _fields(TrainConfig, skip=("seed",)), "train")
    train_raw = dict(train_raw)
    seed = d.get("seed", 0)
    train_raw["seed"] = seed
    train = _build(TrainConfig, train_raw, "train",
                   lambda k, v: tuple(v) if k == "region" and isinstance(v, list) else v)
    for name in ("data_dir", "output_dir"):
        if name in d and not isinstance(d[name], str):
            raise ConfigError(f"{name} must be a string")
    try:
        return RunConfig(data_dir=d.get("data_dir", "data"), output_dir=d.get("output_dir", "run"),
                         seed=seed, eval_iou=d.get("eval_iou", 0.5), synth=synth, train=train,
                         base_dir=Path(base_dir))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: RunConfig) -> dict:
    synth = dataclasses.asdict(cfg.synth)
    synth["classes"] = [{"name": c.name, "size": list(c.size), "points": list(c.points)}
                        for c in cfg.synth.classes]
    for k in _TUPLES:
        synth[k] = list(synth[k])
    train = dataclasses.asdict(cfg.train)
    train.pop("seed")
    train["region"] = list(train["region"])
    return {"data_dir": cfg.data_dir, "output_dir": cfg.output_dir, "seed": cfg.seed,
            "eval_iou": cfg.eval_iou, "synth": synth, "train": train}


def load_config(path) -> RunConfig:
    return config_from_dict(read_json(path))


def save_config(path, cfg: RunConfig) -> None:
    write_json(path, config_to_dict(cfg))


def reference_config() -> RunConfig:
    """3 classes, 40 labeled + 160 unlabeled scenes, seed 7."""
    synth = SynthParams(classes=DEFAULT_CLASSES, n_labeled=40, n_unlabeled=160, n_test=200)
    train = TrainConfig(n_classes=3, alpha=0.99, ema_cadence="step", lr=0.05,
                        burn_in_epochs=60, epochs=10, region=synth.region, seed=7)
    return RunConfig(seed=7, eval_iou=0.5, synth=synth, train=train)
