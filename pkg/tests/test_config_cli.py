import csv

import pytest

from conftest import TINY
from ctmsr.cli import main
from ctmsr.config import ConfigError, from_dict, load_config
from ctmsr.trainer import load_checkpoint

TINY_TOML = """
[paths]
data = "data"
checkpoints = "ckpt"
reports = "reports"

[corpus]
n_images = 6
patch_size = 16

[backbone]
base_channels = 8
depth = 1
time_embed_dim = 8
channel_mult = [1, 1]

[train]
stage1_iters = 4
stage2_iters = 3
batch_size = 2
learning_rate = 1e-3
checkpoint_every = 2
"""


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "run.toml").write_text(TINY_TOML)
    return tmp_path


def test_shipped_configs_load():
    desk = load_config("configs/desk.toml")
    paper = load_config("configs/paper.toml")
    assert desk.train.curriculum.K == 5000
    assert (paper.train.stage1_iters, paper.train.batch_size) == (500_000, 32)
    assert paper.weights.lambda_dtm == 1.6


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown section"):
        from_dict({"optimizer": {}})
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict({"train": {"lr": 1}})
    with pytest.raises(ConfigError, match="s0"):
        from_dict({"schedule": {"total_steps": 3}, "curriculum": {"s0": 4, "s1": 3}})
    with pytest.raises(ConfigError, match="patch_size"):
        from_dict({"corpus": {"patch_size": 20}})
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_curriculum_k_defaults_to_stage1_iters():
    cfg = from_dict({"train": {"stage1_iters": 120}})
    assert cfg.train.curriculum.K == 120


def test_cli_pipeline(run_dir, capsys):
    cfg = str(run_dir / "run.toml")
    assert main(["generate-data", "--config", cfg]) == 0
    assert (run_dir / "data" / "manifest.jsonl").exists()
    assert main(["train-ct", "--config", cfg, "--seed", "1"]) == 0
    ct = run_dir / "ckpt" / "ct_final.ckpt"
    assert load_checkpoint(ct).k == 4
    assert (run_dir / "reports" / "train_ct_loss.csv").exists()
    assert (run_dir / "reports" / "train_ct_loss.png").exists()
    for cmd, tag in (("train-dtm", "dtm"), ("train-sds", "sds")):
        assert main([cmd, "--config", cfg]) == 0
        state = load_checkpoint(run_dir / "ckpt" / f"{tag}_final.ckpt")
        assert state.k == 7 and state.stage == "DTM"
    report = run_dir / "reports" / "eval.csv"
    assert main(["eval", "--checkpoint", str(ct), "--dataset", str(run_dir / "data"), "--report", str(report)]) == 0
    assert report.with_suffix(".png").exists()
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["id"] == "mean" and len(rows) == 2
    out = run_dir / "sr"
    assert main(["infer", "--checkpoint", str(ct), "--input", str(run_dir / "data" / "lr"), "--out", str(out),
                 "--noise", "zero"]) == 0
    assert len(list(out.glob("*_sr.png"))) == 6
    assert (out / "timing.csv").exists()
    assert "backbone calls" in capsys.readouterr().out


def test_cli_errors(run_dir, capsys, monkeypatch):
    assert main(["eval", "--checkpoint", str(run_dir / "missing.ckpt"), "--dataset", str(run_dir),
                 "--report", str(run_dir / "r.csv")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("ctmsr: error:") and err.count("\n") == 1
    with pytest.raises(SystemExit) as exc:
        main(["train-ct"])
    assert exc.value.code == 2
    (run_dir / "bad.toml").write_text("[nope]\n")
    assert main(["train-ct", "--config", str(run_dir / "bad.toml")]) == 1
    assert "unknown section" in capsys.readouterr().err


def test_seed_from_environment(run_dir, monkeypatch):
    monkeypatch.setenv("CTMSR_SEED", "5")
    cfg = str(run_dir / "run.toml")
    assert main(["generate-data", "--config", cfg]) == 0
    import json
    meta = json.loads((run_dir / "data" / "dataset.json").read_text())
    assert meta["seed"] == 5
