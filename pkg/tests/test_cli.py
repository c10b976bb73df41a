import json

import numpy as np
import pytest

from halluaudio import cli
from halluaudio.autodiff import Conv2d
from halluaudio.checkpoint import load_checkpoint
from halluaudio.fewshot import LossResult


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--seed", 3) == 0
    out = capsys.readouterr().out
    assert "seed=3" in out
    assert "FAIL" not in out


def test_gradcheck_names_corrupted_conv(monkeypatch, capsys):
    original = Conv2d.backward

    def broken(self, dout):
        g = original(self, dout)
        self.weight.grad *= 1.5
        return g

    monkeypatch.setattr(Conv2d, "backward", broken)
    assert run("gradcheck") == 1
    assert "conv2d" in capsys.readouterr().err


def test_prepare_idempotent_and_fingerprint(tiny_run, capsys):
    ini, out = tiny_run
    assert run("prepare", "--config", ini) == 0
    first = json.loads((out / "prepare.json").read_text())
    assert (first["computed"], first["hit"], first["shape"]) == (24, 0, [64, 64])
    assert len(list((out / "cache").glob("*.halu"))) == 24
    assert run("prepare", "--config", ini) == 0
    assert json.loads((out / "prepare.json").read_text())["computed"] == 0
    ini.write_text(ini.read_text().replace("hop = 256", "hop = 250"))
    assert run("prepare", "--config", ini) == 0
    again = json.loads((out / "prepare.json").read_text())
    assert again["computed"] == 24 and again["fingerprint"] != first["fingerprint"]


def test_prepare_reports_bad_file(tiny_run, capsys):
    ini, out = tiny_run
    data = ini.parent / "data"
    (data / "c0_0.wav").write_bytes(b"RIFF0000WAVEjunk")
    assert run("prepare", "--config", ini) == 1
    assert "c0_0.wav" in capsys.readouterr().err


def test_config_errors_exit_2_without_writes(tiny_run, tmp_path):
    ini, out = tiny_run
    ini.write_text(ini.read_text().replace("mask_mode = frequency", "mask_mode = spectral"))
    assert run("prepare", "--config", ini) == 2
    assert not out.exists()
    assert run("prepare", "--config", tmp_path / "missing.ini") == 2


def test_missing_dataset_is_config_error(tiny_run, monkeypatch):
    ini, out = tiny_run
    monkeypatch.setenv("HALLUAUDIO_DATA_ROOT", str(ini.parent / "nowhere"))
    assert run("prepare", "--config", ini) == 2
    assert not out.exists()


def test_train_requires_prepare(tiny_run):
    ini, _ = tiny_run
    assert run("train", "--config", ini) == 2


@pytest.fixture
def trained(tiny_run):
    ini, out = tiny_run
    assert run("prepare", "--config", ini) == 0
    assert run("train", "--config", ini) == 0
    return ini, out


def test_train_outputs(trained):
    ini, out = trained
    d = out / "train_frequency"
    log = (d / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,lr,loss,val_accuracy"
    assert len(log) == 3
    bank, masks, meta = load_checkpoint(d / "model.ckpt")
    assert meta["epoch"] == 2 and meta["seed"] == 0
    assert masks.names == ["low", "high"]
    assert bank.param_count() == 3 * (4 * 9 + 4 + 8 + 2 * (4 * 4 * 9 + 4 + 8))


def test_train_bitwise_deterministic(trained):
    ini, out = trained
    first = (out / "train_frequency" / "model.ckpt").read_bytes()
    assert run("train", "--config", ini, "--out", out, "--threads", 1) == 0
    assert (out / "train_frequency" / "model.ckpt").read_bytes() == first


def test_eval_csv_deterministic_and_compare(trained, capsys):
    ini, out = trained
    ckpt = out / "train_frequency" / "model.ckpt"
    assert run("eval", "--config", ini, "--checkpoint", ckpt) == 0
    cell = out / "eval_frequency_euclidean" / "2way1shot.csv"
    first = cell.read_bytes()
    assert len(first.splitlines()) == 1 + 12 * 2  # 3 novel classes x 4 clips x 2 repetitions
    summary = out / "eval_frequency_euclidean" / "summary.json"
    assert run("eval", "--config", ini, "--checkpoint", ckpt, "--compare", f"baseline={summary}") == 0
    assert cell.read_bytes() == first
    assert "Gain(freq.)" in capsys.readouterr().out


def test_eval_threads_same_csv(trained):
    ini, out = trained
    ckpt = out / "train_frequency" / "model.ckpt"
    assert run("eval", "--config", ini, "--checkpoint", ckpt, "--threads", 1) == 0
    a = (out / "eval_frequency_euclidean" / "2way1shot.csv").read_bytes()
    assert run("eval", "--config", ini, "--checkpoint", ckpt, "--threads", 3) == 0
    assert (out / "eval_frequency_euclidean" / "2way1shot.csv").read_bytes() == a


def test_eval_refuses_mismatched_checkpoint(trained, capsys):
    ini, out = trained
    ckpt = out / "train_frequency" / "model.ckpt"
    assert run("eval", "--config", ini, "--checkpoint", ckpt, "--mask-mode", "time") == 2
    assert "refusing" in capsys.readouterr().err


def test_eval_too_wide_cell(trained, capsys):
    ini, out = trained
    ckpt = out / "train_frequency" / "model.ckpt"
    assert run("eval", "--config", ini, "--checkpoint", ckpt, "--grid", "5x1") == 2
    assert "5-way" in capsys.readouterr().err


def test_importance(trained, capsys):
    ini, out = trained
    ckpt = out / "train_frequency" / "model.ckpt"
    assert run("importance", "--config", ini, "--checkpoint", ckpt) == 0
    rows = (out / "importance.csv").read_text().splitlines()
    assert rows[0] == "class_id,label,q_high,q_low,episodes,ratio"
    assert len(rows) == 4
    assert run("importance", "--config", ini, "--checkpoint", ckpt, "--classes", "tone99") == 2


def test_importance_refuses_time_model(trained):
    ini, out = trained
    assert run("train", "--config", ini, "--mask-mode", "time") == 0
    ckpt = out / "train_time" / "model.ckpt"
    assert run("importance", "--config", ini, "--checkpoint", ckpt, "--mask-mode", "time") == 2


def test_ablate_time(trained):
    ini, out = trained
    assert run("ablate-time", "--config", ini) == 0
    assert (out / "eval_time_euclidean" / "summary.json").is_file()


def test_nan_loss_aborts_with_diagnostic(tiny_run, monkeypatch):
    ini, out = tiny_run
    assert run("prepare", "--config", ini) == 0
    monkeypatch.setattr("halluaudio.training.episode_loss",
                        lambda *a, **k: LossResult(float("nan"), np.zeros((1, 2)), np.arange(2)))
    assert run("train", "--config", ini) == 1
    diag = json.loads((out / "train_frequency" / "diverged.json").read_text())
    assert diag["episode_id"] == 0 and diag["epoch"] == 0
