import json

import pytest

from esanet.cli import main

MINI_SETS = ["--set", "backbone=r18", "--set", "num_classes=4", "--set", "input_height=64",
             "--set", "input_width=64"]
TINY = ["--set", "data.train_samples=8", "--set", "data.val_samples=4", "--set", "train.epochs=1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--set", "train_samples=8",
                 "--set", "val_samples=4"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "--set", "epochs=1", "--quiet", "--seed", "3"]) == 0
    return root


def test_summary_outputs(tmp_path, capsys):
    assert main(["summary", "--out", str(tmp_path)] + MINI_SETS) == 0
    text = capsys.readouterr().out
    assert "encoder end (WxH): 2x2" in text and "ratio params 0.666667" in text
    d = json.loads((tmp_path / "summary.json").read_text())
    assert d["encoder_end"] == [2, 2] and (tmp_path / "summary.txt").exists()


def test_summary_from_config_file(tmp_path, capsys):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("backbone = r18\nblock = basic\ninput_height = 64\ninput_width = 64\n")
    assert main(["summary", "--config", str(cfg)]) == 0
    assert "r18-basic" in capsys.readouterr().out


@pytest.mark.parametrize("argv,needle", [
    (["summary", "--set", "input_height=100"], "input_height"),
    (["summary", "--set", "bogus=1"], "bogus"),
    (["summary", "--set", "noequals"], "noequals"),
    (["summary", "--config", "/nonexistent.cfg"], "/nonexistent.cfg"),
    (["eval", "--checkpoint", "/nonexistent"], "/nonexistent"),
    (["optimize", "--out", "/tmp/x"], "--checkpoint"),
])
def test_errors_exit_two_and_name_the_culprit(argv, needle, capsys):
    assert main(argv) == 2
    assert needle in capsys.readouterr().err


def test_train_writes_checkpoint_and_log(trained):
    run = trained / "run"
    assert (run / "checkpoint" / "meta.json").exists()
    assert "epoch 1 loss" in (run / "train_log.txt").read_text()


def test_train_repeat_with_seed_gives_identical_log(trained, tmp_path):
    assert main(["train", "--data", str(trained / "data"), "--out", str(tmp_path),
                 "--set", "epochs=1", "--quiet", "--seed", "3"]) == 0
    assert (tmp_path / "train_log.txt").read_text() == \
        (trained / "run" / "train_log.txt").read_text()


def test_train_generated_data_smoke(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)] + TINY) == 0
    assert "epoch    1" in capsys.readouterr().out


def test_train_rejects_data_overrides_for_disk_data(trained, tmp_path, capsys):
    assert main(["train", "--data", str(trained / "data"), "--out", str(tmp_path),
                 "--set", "data.val_samples=2"]) == 2
    assert "gen-data" in capsys.readouterr().err


def test_eval(trained, tmp_path):
    ck = str(trained / "run" / "checkpoint")
    for split in ("val", "train"):
        assert main(["eval", "--checkpoint", ck, "--split", split, "--data",
                     str(trained / "data"), "--out", str(tmp_path)]) == 0
        m = json.loads((tmp_path / f"metrics_{split}.json").read_text())
        assert 0 <= m["miou"] <= 1 and m["split"] == split


def test_optimize_and_idempotence(trained, tmp_path):
    ck = str(trained / "run" / "checkpoint")
    assert main(["optimize", "--checkpoint", ck, "--out", str(tmp_path / "o1")]) == 0
    r1 = json.loads((tmp_path / "o1" / "equivalence.json").read_text())
    assert r1["nodes_after"] < r1["nodes_before"] and r1["max_relative_deviation"] < 1e-4
    assert main(["optimize", "--graph", str(tmp_path / "o1" / "graph"),
                 "--out", str(tmp_path / "o2")]) == 0
    r2 = json.loads((tmp_path / "o2" / "equivalence.json").read_text())
    assert r2["nodes_before"] == r2["nodes_after"] == r1["nodes_after"]
    assert r2["max_relative_deviation"] == 0.0


def test_bench(trained, tmp_path):
    assert main(["bench", "--checkpoint", str(trained / "run" / "checkpoint"), "--reps", "5",
                 "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "bench.json").read_text())["primary"]
    for k in ("baseline", "optimized"):
        assert d[k]["reps"] == 5 and d[k]["p10"] <= d[k]["median"] <= d[k]["p90"]
    assert main(["bench", "--checkpoint", str(trained / "run" / "checkpoint"),
                 "--reps", "3"]) == 2


def test_verify_passes_and_detects_fault(tmp_path, capsys):
    assert main(["verify", "--instances", "2", "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "verify.json").read_text())
    assert d["passed"]
    capsys.readouterr()
    assert main(["verify", "--instances", "1", "--perturb-upsample", "0.01"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "bilinear" in out
