import json

import numpy as np
import pytest

from kwm.cli import main
from kwm.config import dump_kv, parse_kv
from kwm.data import read_manifest_csv
from kwm.features import read_features_csv, write_wav
from kwm.errors import ConfigError
from kwm.harness import ExperimentConfig
from kwm.model import ModelConfig, count_params, read_checkpoint
from kwm.synthetic import class_tone, make_speech_commands_tree

TINY = """\
# a deliberately tiny run
model.dim = 8
model.layers = 1
model.patch = 40x2
train.epochs = 2
train.batch_size = 32
train.warmup_epochs = 1
train.runs = 1
augment.n_time_masks = 1
data.task = keywords:yes,no
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return make_speech_commands_tree(tmp_path_factory.mktemp("sc"), speakers=30)


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_params(capsys, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("model.dim = 192\nmodel.layers = 12\nmodel.num_classes = 35\n")
    code, out, _ = run(capsys, "params", "--config", cfg)
    assert code == 0
    assert out["params"] == count_params(ModelConfig(dim=192, layers=12, num_classes=35))


def test_unknown_keys_are_usage_errors(capsys, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("model.width = 3\n")
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 2 and "model.width" in err
    cfg.write_text("optimizer.lr = 3\n")
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 2 and "optimizer.lr" in err


def test_experiment_config_round_trip():
    exp = ExperimentConfig.from_kv({"model.dim": "64", "train.lr0": "0.002", "data.task": "V1-30",
                                    "features.n_mels": "40", "augment.enabled": "false"})
    back = ExperimentConfig.from_kv(parse_kv(dump_kv(exp.to_kv())))
    assert back == exp
    assert back.model.dim == 64 and back.train.lr0 == 0.002 and not back.augment.enabled
    with pytest.raises(ConfigError):
        ExperimentConfig.from_kv({"data.task": "V9-12"})


def test_features(capsys, tmp_path):
    wav, csv = tmp_path / "a.wav", tmp_path / "a.csv"
    write_wav(wav, class_tone(3, 12, np.random.default_rng(0)))
    code, out, _ = run(capsys, "features", "--wav", wav, "--csv", csv)
    assert code == 0 and out["shape"] == [40, 98]
    assert read_features_csv(csv).shape == (40, 98)


def test_features_reports_bad_input(capsys, tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFX" + bytes(40))
    code, _, err = run(capsys, "features", "--wav", bad, "--csv", tmp_path / "x.csv")
    assert code == 2 and "RIFF" in err
    code, _, err = run(capsys, "features", "--wav", tmp_path / "missing.wav", "--csv", tmp_path / "x.csv")
    assert code == 1


def test_ablate_dry_run(capsys, tiny_cfg):
    code, out, _ = run(capsys, "ablate", "--axis", "directionality", "--config", tiny_cfg, "--dry-run")
    assert code == 0
    assert [c["label"] for c in out["cells"]] == ["mode=Bi-Bi", "mode=Fo-Bi", "mode=Fo-Fo"]
    # the forward-only mode drops the backward conv and SSM
    assert out["cells"][2]["params"] < out["cells"][0]["params"]


def test_train_needs_data(capsys, tiny_cfg, tmp_path):
    code, _, err = run(capsys, "train", "--config", tiny_cfg, "--out", tmp_path / "o")
    assert code == 2 and "--data" in err


def test_train_then_eval(capsys, corpus, tiny_cfg, tmp_path):
    out = tmp_path / "run"
    code, res, _ = run(capsys, "train", "--config", tiny_cfg, "--data", corpus, "--out", out)
    assert code == 0
    for name in ("ckpt_best.kwm", "report.json", "report_epochs.csv", "manifest.csv"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["test_accuracy"] == res["test_accuracy"]
    assert 0 <= res["test_accuracy"] <= 100
    manifest = read_manifest_csv(out / "manifest.csv")
    assert manifest.task.classes == ("yes", "no", "silence", "unknown")

    kv, _ = read_checkpoint(out / "ckpt_best.kwm")
    assert kv["model.num_classes"] == "4" and kv["data.task"] == "keywords:yes,no"

    # eval finds the dataset root recorded in the checkpoint and agrees with the report
    code, ev, _ = run(capsys, "eval", "--ckpt", out / "ckpt_best.kwm", "--split", "test")
    assert code == 0
    assert ev["examples"] == len(manifest.split("test"))
    assert ev["accuracy"] == pytest.approx(res["test_accuracy"])


def test_class_count_mismatch(capsys, corpus, tiny_cfg, tmp_path):
    tiny_cfg.write_text(TINY + "model.num_classes = 12\n")
    code, _, err = run(capsys, "train", "--config", tiny_cfg, "--data", corpus, "--out", tmp_path / "o")
    assert code == 2 and "num_classes" in err
