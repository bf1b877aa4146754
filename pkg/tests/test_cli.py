import csv
import json
from pathlib import Path

import numpy as np
import pytest

from fedflow import nn
from fedflow.cli import _SAMPLE, main
from fedflow.data import EightGaussians, make_rng, sample

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["train", str(CONFIGS / "smoke_vanilla.yaml"), "--output", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def untrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("init")
    text = (CONFIGS / "smoke_vanilla.yaml").read_text().replace("rounds: 500", "rounds: 0")
    cfg = out / "cfg.yaml"
    cfg.write_text(text)
    assert main(["train", str(cfg), "--output", str(out / "run")]) == 0
    return out / "run"


def test_train_rounds_zero_writes_initial_checkpoint(tmp_path):
    assert main(["train", str(CONFIGS / "rounds0.yaml"), "--output", str(tmp_path)]) == 0
    final = tmp_path / "checkpoints" / "final"
    assert (final / "theta.ffmp").exists() and (final / "phi.ffmp").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert _rows(tmp_path / "rounds.csv") == []


def test_bad_key_exits_2_naming_key(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("experiment: {name: x, seed: 0}\ntraining:\n  rounds: 3\n  batchsize: 8\n")
    assert main(["train", str(cfg), "--output", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "batchsize" in err and "bad.yaml:4" in err


def test_missing_config_and_bad_usage(tmp_path):
    assert main(["train", str(tmp_path / "nope.yaml")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["sample"])
    assert info.value.code == 2


def test_smoke_run_loss_decreases(smoke):
    rows = _rows(smoke / "rounds.csv")
    losses = np.array([float(r["loss"]) for r in rows])
    assert len({int(r["round"]) for r in rows}) == 500
    assert np.all(np.isfinite(losses))
    assert losses[-200:].mean() < losses[:50].mean()


def test_manifest_hashes_reproduce(smoke, tmp_path):
    assert main(["train", str(CONFIGS / "smoke_vanilla.yaml"), "--output", str(tmp_path)]) == 0
    a = json.loads((smoke / "manifest.json").read_text())
    b = json.loads((tmp_path / "manifest.json").read_text())
    assert a["config_hash"] == b["config_hash"] and a["master_seed"] == 0
    assert a["sha256"] == b["sha256"] and a["sha256"]


def test_sample_is_deterministic(smoke, tmp_path):
    ckpt = str(smoke / "checkpoints" / "final" / "theta.ffmp")
    for name in ("a.csv", "b.csv"):
        assert main(["sample", ckpt, "--nfe", "10", "--n", "50", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(_rows(tmp_path / "a.csv")) == 50


def test_sample_zero_field_nfe1_returns_source(untrained, tmp_path):
    zero = nn.zeros_like_arch(nn.MlpArch(2, 2, (64, 64), "relu", time_conditioned=True))
    src = untrained / "checkpoints" / "final" / "theta.ffmp"
    extra = nn.read_checkpoint(src.read_bytes(), zero.arch)[1]
    ckpt = tmp_path / "zero.ffmp"
    ckpt.write_bytes(nn.params_to_bytes(zero, extra))
    out = tmp_path / "s.csv"
    assert main(["sample", str(ckpt), "--nfe", "1", "--n", "20", "--seed", "4", "--out", str(out),
                 "--trajectory", str(tmp_path / "t.csv")]) == 0
    got = np.array([[float(r["x_1"]), float(r["x_2"])] for r in _rows(out)])
    want = sample(EightGaussians(), 20, make_rng(4, _SAMPLE))
    assert np.array_equal(got, want)


def test_trajectory_has_nfe_plus_one_rows(smoke, tmp_path):
    ckpt = str(smoke / "checkpoints" / "final" / "theta.ffmp")
    traj = tmp_path / "traj.csv"
    assert main(["sample", ckpt, "--nfe", "7", "--n", "5", "--out", str(tmp_path / "s.csv"),
                 "--trajectory", str(traj)]) == 0
    rows = _rows(traj)
    assert len(rows) == 5 * 8
    assert sorted({int(r["step"]) for r in rows}) == list(range(8))


def test_sample_rejects_garbage_checkpoint(tmp_path):
    bad = tmp_path / "bad.ffmp"
    bad.write_bytes(b"not a checkpoint")
    assert main(["sample", str(bad), "--out", str(tmp_path / "s.csv")]) == 2


def test_eval_empty_nfe_is_error(smoke, tmp_path):
    ckpt = str(smoke / "checkpoints" / "final" / "theta.ffmp")
    assert main(["eval", ckpt, "--nfe", "--out", str(tmp_path / "e.csv")]) == 2


def test_eval_deterministic_and_training_helps(smoke, untrained, tmp_path):
    args = ["--nfe", "2", "10", "--n-eval", "512", "--n-target", "512", "--seed", "1"]
    trained = str(smoke / "checkpoints" / "final" / "theta.ffmp")
    init = str(untrained / "checkpoints" / "final" / "theta.ffmp")
    assert main(["eval", trained, *args, "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["eval", trained, *args, "--out", str(tmp_path / "b.csv")]) == 0
    assert main(["eval", init, *args, "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    w_trained = [float(r["w2"]) for r in _rows(tmp_path / "a.csv")]
    w_init = [float(r["w2"]) for r in _rows(tmp_path / "c.csv")]
    assert all(t < u for t, u in zip(w_trained, w_init))


def test_resume_matches_uninterrupted(tmp_path):
    text = (CONFIGS / "smoke_vanilla.yaml").read_text()
    short = tmp_path / "short.yaml"
    short.write_text(text.replace("rounds: 500", "rounds: 20"))
    half = tmp_path / "half.yaml"
    half.write_text(text.replace("rounds: 500", "rounds: 10"))
    assert main(["train", str(short), "--output", str(tmp_path / "full")]) == 0
    assert main(["train", str(half), "--output", str(tmp_path / "half")]) == 0
    state = tmp_path / "half" / "checkpoints" / "final"
    assert main(["train", str(short), "--output", str(tmp_path / "resumed"), "--resume", str(state)]) == 0
    a = (tmp_path / "full" / "checkpoints" / "final" / "theta.ffmp").read_bytes()
    b = (tmp_path / "resumed" / "checkpoints" / "final" / "theta.ffmp").read_bytes()
    assert a == b


@pytest.mark.parametrize("suite", ["ot", "lemma1", "theorem1"])
def test_verify_suites_pass(suite, capsys):
    assert main(["verify", suite]) == 0
    out = capsys.readouterr().out
    assert suite in out


def test_verify_gradcheck_prints_error(capsys):
    assert main(["verify", "gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "gradcheck" in out and "40/40" in out
