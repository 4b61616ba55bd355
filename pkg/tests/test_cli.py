import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from hssda import cli, pipeline
from hssda.config import config_from_dict, config_to_dict, reference_config, save_config
from hssda.formats import read_json
from hssda.runlog import read_metrics, read_threshold_log

SCHEMAS = Path(cli.__file__).parent / "schemas"


def small_config(root: Path, seed=5):
    d = config_to_dict(reference_config().with_seed(seed))
    d["data_dir"], d["output_dir"] = str(root / "data"), str(root / "run")
    d["synth"].update(n_labeled=6, n_unlabeled=6, n_test=4)
    d["train"].update(burn_in_epochs=3, epochs=2)
    return config_from_dict(d)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = small_config(root)
    save_config(root / "cfg.json", cfg)
    c = str(root / "cfg.json")
    for cmd in (["gen"], ["burnin"], ["train"]):
        assert cli.main(cmd + ["--config", c]) == 0
    return root, cfg, c


def validator(name):
    reg = Registry()
    for p in SCHEMAS.glob("*.json"):
        reg = reg.with_resource(p.name, Resource.from_contents(json.loads(p.read_text())))
    return Draft202012Validator(json.loads((SCHEMAS / name).read_text()), registry=reg)


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert cli.main(["gen", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_command(self):
        assert cli.main([]) == 1

    def test_help(self):
        assert cli.main(["--help"]) == 0

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["gen", "--config", str(tmp_path / "nope.json")]) == 2

    def test_malformed_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        assert cli.main(["gen", "--config", str(tmp_path / "c.json")]) == 2

    def test_invalid_config(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"seed": -1}')
        assert cli.main(["gen", "--config", str(tmp_path / "c.json")]) == 1
        assert "seed" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        cfg = small_config(tmp_path)
        save_config(tmp_path / "c.json", cfg)
        assert cli.main(["burnin", "--config", str(tmp_path / "c.json")]) == 2

    def test_unknown_scene(self, work):
        _, _, c = work
        assert cli.main(["augment-preview", "--config", c, "--scene", "nope",
                         "--out", "/tmp/x"]) == 1


class TestCommands:
    def test_run_outputs(self, work):
        root, cfg, _ = work
        rows = read_metrics(root / "run" / pipeline.METRICS_CSV)
        assert [r["epoch"] for r in rows] == ["0", "1", "2"]
        assert rows[0]["precision"] == "null"
        recs = read_threshold_log(root / "run" / pipeline.THRESHOLD_LOG)
        assert [(r["epoch"], r["class_id"]) for r in recs] == [(e, c) for e in (1, 2)
                                                                for c in range(3)]
        for r in recs:
            validator("threshold_record.schema.json").validate(r)
        for name in (pipeline.BURNIN_PARAMS, pipeline.TEACHER_PARAMS, pipeline.STUDENT_PARAMS):
            assert (root / "run" / name).exists()

    def test_thresholds_json_matches_schema(self, work, tmp_path):
        _, _, c = work
        assert cli.main(["thresholds", "--config", c, "--out", str(tmp_path / "t.json")]) == 0
        doc = read_json(tmp_path / "t.json")
        validator("thresholds.schema.json").validate(doc)
        assert doc["epoch"] == 0 and len(doc["thresholds"]) == 3

    def test_thresholds_to_stdout(self, work, capsys):
        _, _, c = work
        assert cli.main(["thresholds", "--config", c]) == 0
        validator("thresholds.schema.json").validate(json.loads(capsys.readouterr().out))

    def test_pseudolabel_then_eval(self, work, tmp_path, capsys):
        _, _, c = work
        assert cli.main(["thresholds", "--config", c, "--out", str(tmp_path / "t.json")]) == 0
        assert cli.main(["pseudolabel", "--config", c, "--thresholds", str(tmp_path / "t.json"),
                         "--out", str(tmp_path / "pl.json")]) == 0
        doc = read_json(tmp_path / "pl.json")
        assert [s["id"] for s in doc["scenes"]] == [f"U{i:05d}" for i in range(6)]
        for s in doc["scenes"]:
            assert all(0 <= d["weight"] <= 1 for d in s["ambiguous"])
        capsys.readouterr()
        assert cli.main(["eval", "--config", c, "--pseudolabels", str(tmp_path / "pl.json")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert set(out["ap"]) == {"Car", "Pedestrian", "Cyclist"}
        assert out["pseudo_labels"]["total"] == sum(len(s["high"]) for s in doc["scenes"])

    def test_bad_thresholds_document(self, work, tmp_path):
        _, _, c = work
        (tmp_path / "t.json").write_text('{"epoch": 0}')
        assert cli.main(["pseudolabel", "--config", c, "--thresholds", str(tmp_path / "t.json"),
                         "--out", str(tmp_path / "pl.json")]) == 2

    def test_augment_preview(self, work, tmp_path, capsys):
        _, _, c = work
        assert cli.main(["augment-preview", "--config", c, "--scene", "L00000",
                         "--out", str(tmp_path)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert sorted(doc["shuffle"]["perm"]) == [0, 1, 2, 3]
        assert doc["points"]["weak"] == doc["points"]["original"]
        assert doc["points"]["shuffled"] == doc["points"]["in_region"]
        assert (tmp_path / "L00000_shuffled.bin").exists()

    def test_gen_write_config(self, tmp_path):
        cfg = small_config(tmp_path)
        save_config(tmp_path / "c.json", cfg)
        assert cli.main(["gen", "--config", str(tmp_path / "c.json"), "--seed", "9",
                         "--out", str(tmp_path / "d2"), "--write-config",
                         str(tmp_path / "eff.json")]) == 0
        assert read_json(tmp_path / "eff.json")["seed"] == 9
        assert (tmp_path / "d2" / "manifest.json").exists()


class TestDeterminism:
    def test_same_seed_same_files(self, work):
        root, _, c = work
        assert cli.main(["train", "--config", c, "--out", str(root / "again")]) == 0
        for name in (pipeline.METRICS_CSV, pipeline.THRESHOLD_LOG, pipeline.TEACHER_PARAMS):
            assert (root / "again" / name).read_bytes() == (root / "run" / name).read_bytes()

    def test_gen_is_byte_identical(self, work, tmp_path):
        root, cfg, _ = work
        pipeline.generate(cfg, tmp_path / "d")
        for p in (root / "data").rglob("*"):
            if p.is_file():
                assert (tmp_path / "d" / p.relative_to(root / "data")).read_bytes() == p.read_bytes()

    def test_memory_equals_disk(self, work):
        root, cfg, _ = work
        from hssda.synth import generate_dataset
        mem = pipeline.from_memory(cfg, generate_dataset(cfg.synth, np.random.default_rng(cfg.seed)))
        disk = pipeline.load_training_data(cfg)
        for a, b in zip(mem.labeled + mem.unlabeled + mem.test,
                        disk.labeled + disk.unlabeled + disk.test):
            assert a.labels == b.labels
            np.testing.assert_array_equal(a.points.data, b.points.data)


class TestNoLeak:
    def test_training_never_reads_sealed_labels(self, work, tmp_path):
        root, cfg, _ = work
        shutil.copytree(root / "data", tmp_path / "data")
        shutil.rmtree(tmp_path / "data" / "eval")
        sealed = config_from_dict({**config_to_dict(cfg), "data_dir": str(tmp_path / "data")})
        data = pipeline.load_training_data(sealed)
        assert all(s.labels == [] for s in data.unlabeled + data.test)
        theta = pipeline.load_params(root / "run" / pipeline.BURNIN_PARAMS)
        pipeline.run_mutual_learning(sealed, theta, data, tmp_path / "run")
        assert ((tmp_path / "run" / pipeline.THRESHOLD_LOG).read_bytes()
                == (root / "run" / pipeline.THRESHOLD_LOG).read_bytes())
        assert (read_json(root / "data" / "manifest.json")
                == read_json(tmp_path / "data" / "manifest.json"))

    def test_labeled_fraction_strips_moved_labels(self, work):
        root, cfg, _ = work
        d = config_to_dict(cfg)
        d["train"]["labeled_fraction"] = 0.5
        data = pipeline.load_training_data(config_from_dict(d))
        assert len(data.labeled) == 3 and len(data.unlabeled) == 9
        assert all(s.labels == [] for s in data.unlabeled)
