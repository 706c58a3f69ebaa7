import json

import numpy as np
import pytest

from graspsight import dataio
from graspsight import trainbench as tb
from graspsight.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(out), "--n", "120", "--seed", "5", "--workers", "1", "--quiet"]) == 0
    return out


@pytest.fixture(scope="module")
def classifier_ckpt(data_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "mf.ckpt"
    assert main(["train", "--task", "model-free", "--data", str(data_dir), "--out", str(path),
                 "--epochs", "2", "--quiet"]) == 0
    return path


@pytest.fixture(scope="module")
def predictive_ckpt(data_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "pred.ckpt"
    assert main(["train", "--task", "predictive", "--data", str(data_dir), "--out", str(path),
                 "--epochs", "1", "--quiet"]) == 0
    return path


def test_gen_writes_records_and_manifest(data_dir):
    assert (data_dir / dataio.RECORDS_FILE).is_file()
    manifest = json.loads((data_dir / dataio.MANIFEST_FILE).read_text())
    assert manifest["count"] == 120 and manifest["seed"] == 5


def test_gen_is_byte_identical_across_runs(data_dir, tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--n", "120", "--seed", "5", "--workers", "2"]) == 0
    for name in (dataio.RECORDS_FILE, dataio.MANIFEST_FILE):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gen": {"n": 10, "bogus": 1}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "gen.bogus" in capsys.readouterr().err


def test_bad_config_values(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"world": {"jitter_max": "big"}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    cfg.write_text("{not json")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert main(["gen", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "d")]) == 3


def test_train_writes_checkpoint_and_history(classifier_ckpt):
    assert classifier_ckpt.read_bytes()[:4] == b"GSPT"
    history = json.loads(classifier_ckpt.with_name(classifier_ckpt.name + ".history.json").read_text())
    assert len(history) == 2
    assert {"epoch", "train_loss"} <= set(history[0])


def test_unknown_task_is_a_usage_error(data_dir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--task", "oracle", "--data", str(data_dir), "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


def test_missing_dataset_exits_3(tmp_path):
    assert main(["train", "--task", "surrogate", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "x.ckpt"), "--quiet"]) == 3


def test_eval_prints_a_report(classifier_ckpt, data_dir, capsys):
    assert main(["eval", "--ckpt", str(classifier_ckpt), "--data", str(data_dir)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"accuracy", "tp", "fp", "tn", "fn", "n"} <= set(report)
    assert report["tp"] + report["fp"] + report["tn"] + report["fn"] == report["n"] == 12


def test_eval_rejects_a_resolution_mismatch(classifier_ckpt, tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--n", "20", "--image-size", "32", "--quiet"]) == 0
    assert main(["eval", "--ckpt", str(classifier_ckpt), "--data", str(tmp_path)]) == 2


def test_eval_rejects_a_predictive_checkpoint(predictive_ckpt, data_dir):
    assert main(["eval", "--ckpt", str(predictive_ckpt), "--data", str(data_dir)]) == 2


def test_render_writes_a_pgm_grid(predictive_ckpt, data_dir, tmp_path):
    out = tmp_path / "grid.pgm"
    assert main(["render", "--ckpt", str(predictive_ckpt), "--data", str(data_dir), "--n", "4",
                 "--out", str(out)]) == 0
    blob = out.read_bytes()
    assert blob.startswith(b"P5\n192 256\n255\n")
    assert tb.decode_pgm(blob).shape == (4 * 64, 3 * 64)


def test_render_rejects_a_classifier_checkpoint(classifier_ckpt, data_dir, tmp_path):
    assert main(["render", "--ckpt", str(classifier_ckpt), "--data", str(data_dir),
                 "--out", str(tmp_path / "g.pgm")]) == 2


def test_corrupt_checkpoint_exits_3(data_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["eval", "--ckpt", str(bad), "--data", str(data_dir)]) == 3


def test_compare_on_a_tiny_dataset(data_dir, tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--data", str(data_dir), "--out", str(out), "--seeds", "1",
                 "--epochs", "1", "--json", "--quiet"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report["median"]) == set(tb.EXPERIMENTS)
    assert json.loads((out / "report.json").read_text()) == report
    assert "pipeline" in (out / "report.txt").read_text()
    assert tb.decode_pgm((out / "predictions.pgm").read_bytes()).shape == (8 * 64, 3 * 64)
