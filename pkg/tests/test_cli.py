import logging

import numpy as np
import pytest
from assertpy import assert_that

from m2clip_harness import cli
from m2clip_harness.checkpoint import read_checkpoint
from m2clip_harness.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, parse_invocation

logger = logging.getLogger("test")

TINY_OVERRIDES = {
    "model.video_layers": 2,
    "model.text_layers": 2,
    "model.video_width": 16,
    "model.text_width": 16,
    "model.joint_width": 8,
    "model.video_heads": 2,
    "model.text_heads": 2,
    "model.num_frames": 3,
    "model.image_size": 16,
    "data.train_classes": 3,
    "data.holdout_classes": 2,
    "data.per_class": 2,
    "data.val_per_class": 2,
    "data.holdout_per_class": 2,
    "train.epochs": 1,
    "train.batch_size": 4,
    "train.learning_rate": 0.01,
}


def tiny_args(*extra: str) -> list:
    args = []
    for key, value in TINY_OVERRIDES.items():
        args += ["--set", f"{key}={value}"]
    return args + list(extra)


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    """Keep the pytest log handlers in place"""
    monkeypatch.setattr(cli, "configure_logging", lambda level, path=None: None)


def run(command: str, out, *extra: str) -> int:
    return main([command, "--output-dir", str(out)] + tiny_args(*extra))


def test_unknown_command_is_a_usage_error():
    assert main(["bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_unknown_config_key_is_a_usage_error(tmp_path):
    assert main(["params", "--output-dir", str(tmp_path), "--set", "train.epoch=3"]) == EXIT_USAGE
    assert main(["params", "--output-dir", str(tmp_path), "--set", "train.epochs"]) == EXIT_USAGE
    assert main(["ablate", "--output-dir", str(tmp_path)]) == EXIT_USAGE, "--suite is required"


def test_config_file_then_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("train.epochs = 4\ntrain.learning_rate = 0.5\n", encoding="utf-8")
    inv = parse_invocation(["train", "--config", str(path), "--set", "epochs=9"])
    assert inv.config.train.epochs == 9, "--set is applied after the file"
    assert inv.config.train.learning_rate == 0.5
    assert inv.subcommand == "train"


def test_corrupt_checkpoint_is_a_runtime_error(tmp_path):
    logger.info("Starting corrupt checkpoint CLI test")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(16))
    assert run("eval", tmp_path, "--checkpoint", str(bad)) == EXIT_RUNTIME
    assert run("zeroshot", tmp_path, "--checkpoint", str(tmp_path / "missing.ckpt")) == EXIT_RUNTIME


def test_params_report(tmp_path):
    logger.info("Starting params command test")
    assert run("params", tmp_path) == EXIT_OK
    lines = (tmp_path / "params.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "module\ttrainable\tfrozen"
    modules = [line.split("\t")[0] for line in lines[1:]]
    assert_that(modules).contains("video.layer1.adapter", "text.layer2.adapter", "total")
    assert lines[-1].startswith("total\t")


def test_gen_data_writes_every_split(tmp_path):
    assert run("gen-data", tmp_path) == EXIT_OK
    for split in ("train", "val", "zeroshot_holdout"):
        clips = np.load(tmp_path / f"{split}_clips.npy")
        assert clips.shape[1:] == (3, 16, 16, 3), f"{split} clips have the wrong shape"


def test_zero_holdout_classes_rejects_zeroshot(tmp_path):
    assert run("zeroshot", tmp_path, "--set", "data.holdout_classes=0") == EXIT_USAGE


def _correlation_blocks(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    rows = [line.split("\t") for line in lines[1:]]
    return header, rows


def test_label_correlation_of_the_frozen_text_tower(tmp_path):
    logger.info("Starting label correlation CLI test")
    assert run("label-correlation", tmp_path) == EXIT_OK
    header, rows = _correlation_blocks(tmp_path / "label_correlation.tsv")
    assert header[:2] == ["stage", "label"] and len(header) == 2 + 5, "three train plus two holdout labels"
    assert len(rows) == 5 and {row[0] for row in rows} == {"frozen"}
    for i, row in enumerate(rows):
        assert row[1] == header[2 + i]
        values = [float(v) for v in row[2:]]
        assert abs(values[i] - 1.0) < 1e-5, "Each label correlates fully with itself"
        assert all(-1.0 - 1e-5 <= v <= 1.0 + 1e-5 for v in values)


@pytest.mark.order(-2)
def test_train_then_evaluate_checkpoint(tmp_path):
    logger.info("Starting train/eval/zeroshot CLI test")
    assert run("train", tmp_path) == EXIT_OK
    for name in ("config.cfg", "vocab.txt", "metrics.tsv", "final.ckpt"):
        assert (tmp_path / name).is_file(), f"train did not write {name}"

    checkpoint = read_checkpoint(tmp_path / "final.ckpt")
    assert checkpoint.step == 2, "6 clips in batches of 4 make two steps"
    assert checkpoint.config().train.epochs == 1

    ckpt = str(tmp_path / "final.ckpt")
    assert run("eval", tmp_path, "--checkpoint", ckpt) == EXIT_OK
    rows = (tmp_path / "eval.tsv").read_text(encoding="utf-8").splitlines()
    assert [row.split("\t")[0] for row in rows[1:]] == ["vc_head", "cmc_similarity"]

    assert run("zeroshot", tmp_path, "--checkpoint", ckpt) == EXIT_OK
    rows = (tmp_path / "zeroshot.tsv").read_text(encoding="utf-8").splitlines()
    assert rows[-1].startswith("overall\t")
    assert len(rows) == 1 + 2 + 1, "header, one row per held-out class, overall"

    assert run("label-correlation", tmp_path, "--checkpoint", ckpt) == EXIT_OK
    _, rows = _correlation_blocks(tmp_path / "label_correlation.tsv")
    assert [row[0] for row in rows] == ["frozen"] * 5 + ["adapted"] * 5
    assert [row[1] for row in rows[:5]] == [row[1] for row in rows[5:]]


@pytest.mark.order(-1)
def test_gradcheck_passes_on_tiny_model(tmp_path):
    logger.info("Starting gradcheck CLI test")
    assert run("gradcheck", tmp_path, "--max-entries", "3") == EXIT_OK
    rows = (tmp_path / "gradcheck.tsv").read_text(encoding="utf-8").splitlines()
    assert len(rows) > 1
    assert all(row.endswith("\t1") for row in rows[1:]), "Every trainable parameter should pass"


@pytest.mark.slow
@pytest.mark.order(-1)
def test_gradcheck_full_checks_every_entry(tmp_path):
    logger.info("Starting full gradcheck CLI test")
    assert run("gradcheck", tmp_path, "--full") == EXIT_OK
    rows = [row.split("\t") for row in (tmp_path / "gradcheck.tsv").read_text(encoding="utf-8").splitlines()]
    assert rows[0][:3] == ["name", "checked", "total"]
    for name, checked, total, *_, passed in rows[1:]:
        assert checked == total, f"{name} checked {checked} of {total} entries"
        assert passed == "1", f"{name} failed the full check"
