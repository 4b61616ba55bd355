"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flag, config or argument),
2 I/O error (missing, unreadable or malformed file).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, load_config, reference_config, save_config
from .formats import IoFailure, MalformedFile, read_dataset, read_json, write_json
from .runlog import thresholds_document, thresholds_from_records

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="run config JSON (default: built-in reference)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hssda", description="Semi-supervised 3D detection on synthetic scenes.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, help="dataset directory (default: config data_dir)")
    p.add_argument("--write-config", type=Path, help="also save the effective config here")

    p = sub.add_parser("burnin", help="supervised training on the labeled scenes")
    _common(p)

    p = sub.add_parser("train", help="mutual learning from the burn-in parameters")
    _common(p)
    p.add_argument("--params", type=Path, help="burn-in parameters (default: output_dir)")
    p.add_argument("--out", type=Path, help="run directory (default: config output_dir)")

    p = sub.add_parser("thresholds", help="one-shot dual thresholds from the labeled scenes")
    _common(p)
    p.add_argument("--params", type=Path, help="detector parameters (default: burn-in)")
    p.add_argument("--out", type=Path, help="write JSON here instead of stdout")

    p = sub.add_parser("pseudolabel", help="hierarchical partition of the unlabeled scenes")
    _common(p)
    p.add_argument("--params", type=Path, help="detector parameters (default: burn-in)")
    p.add_argument("--thresholds", type=Path, help="output of the thresholds command")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("augment-preview", help="dump weak and shuffle augmentations of a scene")
    _common(p)
    p.add_argument("--scene", required=True, help="scene id")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="held-out AP and pseudo-label precision")
    _common(p)
    p.add_argument("--params", type=Path, help="detector parameters (default: teacher)")
    p.add_argument("--pseudolabels", type=Path, help="output of the pseudolabel command")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else reference_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _params(cfg: RunConfig, path, default: str):
    return pipeline.load_params(path if path is not None else cfg.output_path / default)


def _emit(doc, out):
    if out is None:
        print(json.dumps(doc, indent=2))
    else:
        write_json(out, doc)


def cmd_gen(cfg, args):
    root = args.out if args.out is not None else cfg.data_path
    ds = pipeline.generate(cfg, root)
    if args.write_config:
        save_config(args.write_config, cfg)
    print(f"wrote {len(ds.labeled)} labeled, {len(ds.unlabeled)} unlabeled, "
          f"{len(ds.test)} test scenes to {root}")


def cmd_burnin(cfg, args):
    data = pipeline.load_training_data(cfg)
    hist = []
    t0 = time.perf_counter()
    pipeline.run_burnin(cfg, data, cfg.output_path, hist)
    print(f"burn-in: {len(hist)} epochs, final loss {hist[-1]:.4f}, "
          f"{time.perf_counter() - t0:.1f}s" if hist else "burn-in: 0 epochs")


def cmd_train(cfg, args):
    out = args.out if args.out is not None else cfg.output_path
    theta = _params(cfg, args.params, pipeline.BURNIN_PARAMS)
    data = pipeline.load_training_data(cfg)
    ev = pipeline.Evaluator.from_disk(cfg, data.test)
    t0 = time.perf_counter()
    state = pipeline.run_mutual_learning(cfg, theta, data, out, ev)
    print(f"trained {state.epoch} epochs in {time.perf_counter() - t0:.1f}s; "
          f"logs in {out}")


def cmd_thresholds(cfg, args):
    theta = _params(cfg, args.params, pipeline.BURNIN_PARAMS)
    data = pipeline.load_training_data(cfg)
    th = pipeline.one_shot_thresholds(cfg, theta, data.labeled)
    _emit(thresholds_document(th, cfg.class_names), args.out)


def cmd_pseudolabel(cfg, args):
    theta = _params(cfg, args.params, pipeline.BURNIN_PARAMS)
    data = pipeline.load_training_data(cfg)
    if args.thresholds is not None:
        doc = read_json(args.thresholds)
        try:
            th = thresholds_from_records(doc["thresholds"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFile(args.thresholds, f"not a thresholds document: {exc}") from None
    else:
        th = pipeline.one_shot_thresholds(cfg, theta, data.labeled)
    labels = pipeline.pseudo_label_scenes(cfg, theta, data.unlabeled, th)
    write_json(args.out, pipeline.labels_document(labels, cfg.class_names, th.epoch))
    h, a, lo = pipeline.label_counts(labels)
    print(f"{len(labels)} scenes: {h} high, {a} ambiguous, {lo} low")


def cmd_augment_preview(cfg, args):
    ds = read_dataset(cfg.data_path)
    entry = next((e for e in ds.entries if e.scene_id == args.scene), None)
    if entry is None:
        raise ValueError(f"no scene {args.scene!r} in {cfg.data_path}")
    doc = pipeline.augment_preview(cfg, ds.load(entry), args.out)
    print(json.dumps(doc, indent=2))


def cmd_eval(cfg, args):
    theta = _params(cfg, args.params, pipeline.TEACHER_PARAMS)
    data = pipeline.load_training_data(cfg)
    ev = pipeline.Evaluator.from_disk(cfg, data.test)
    ap = ev.ap(theta, data.test)
    out = {"ap": {cfg.class_names[c]: v for c, v in ap.items()}, "iou": cfg.eval_iou}
    if args.pseudolabels is not None:
        doc = read_json(args.pseudolabels)
        out["pseudo_labels"] = _pseudo_summary(cfg, ev, doc, args.pseudolabels)
    print(json.dumps(out, indent=2))


def _pseudo_summary(cfg, ev, doc, path):
    from .geom3d import Box3D
    from .metrics import pseudo_label_precision, pseudo_label_recall

    names = cfg.class_names
    high, gts = [], []
    try:
        for s in doc["scenes"]:
            high.append([Box3D(*d["box"], class_id=names.index(d["class"])) for d in s["high"]])
            gts.append(ev.gt[s["id"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(path, f"not a pseudo-label document: {exc}") from None
    prec = pseudo_label_precision(high, gts)
    return {"precision": str(prec), "correct": prec.correct, "total": prec.total,
            "recall": pseudo_label_recall(high, gts)}


COMMANDS = {
    "gen": cmd_gen, "burnin": cmd_burnin, "train": cmd_train, "thresholds": cmd_thresholds,
    "pseudolabel": cmd_pseudolabel, "augment-preview": cmd_augment_preview, "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](_config(args), args)
    except (IoFailure, MalformedFile, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
