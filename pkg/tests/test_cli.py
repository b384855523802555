import os
import subprocess
import sys

import numpy as np
import pytest

from ddnet.cli import build_config, config_schema, main, parse_config_text, ConfigError
from ddnet.io import read_pgm, read_tensor
from ddnet.metrics import MetricsReport

TINY_RUN = """\
# tiny desk run
seed = 3
data.count = 10
scene.height = 16
scene.width = 16
model.channels = 4,8
model.stages = 1
train.epochs = 3
train.batch_size = 4
train.base_lr = 0.005
train.lr_milestones = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY_RUN)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def run_cli(*args, env=None):
    full = dict(os.environ, **(env or {}))
    return subprocess.run([sys.executable, "-m", "ddnet", *args], capture_output=True, text=True, env=full)


class TestConfig:
    def test_comments_and_blank_lines(self):
        assert parse_config_text("a = 1  # note\n\n# skip\nb=x\n") == {"a": "1", "b": "x"}

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="model.widths"):
            build_config({"model.widths": "4,8"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            build_config({"train.epochs": "many"})

    def test_seed_flows_to_training(self):
        assert build_config({"seed": "7"}).train.seed == 7
        assert "train.seed" not in config_schema()

    def test_invalid_combination(self):
        with pytest.raises(ConfigError):
            build_config({"model.channels": "8,4"})


class TestGenData:
    def test_counts_printed(self, tmp_path, capsys):
        assert main(["gen-data", "--set", "data.count=10", "--set", "scene.height=16", "--set", "scene.width=16",
                     "--out", str(tmp_path / "d")]) == 0
        assert "samples=10 train=8 test=2" in capsys.readouterr().out
        assert len(list((tmp_path / "d" / "frames").glob("*.pgm"))) == 10

    def test_refuses_non_empty(self, workspace, capsys):
        assert main(["gen-data", "--out", str(workspace / "data")]) == 1
        assert "--force" in capsys.readouterr().err

    def test_empty_request(self, tmp_path):
        assert main(["gen-data", "--set", "data.count=0", "--out", str(tmp_path / "d")]) == 1
        assert not (tmp_path / "d").exists()

    def test_sequence_layout(self, tmp_path):
        assert main(["gen-data", "--set", "data.kind=sequence", "--set", "data.count=2", "--set", "scene.height=16",
                     "--set", "scene.width=16", "--set", "scene.frames=3", "--out", str(tmp_path / "s")]) == 0
        assert len(list((tmp_path / "s" / "clips" / "0001" / "frames").glob("*.pgm"))) == 3


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.ckpt").is_file() and (run / "best.ckpt").is_file()
        lines = (run / "train.log").read_text().splitlines()
        assert len(lines) == 3 and all(k in lines[0] for k in ("epoch=0", "lr=", "loss=", "val_miou="))

    def test_resume_is_identical(self, workspace, tmp_path):
        cfg, data = str(workspace / "run.cfg"), str(workspace / "data")
        assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path), "--stop-after", "1"]) == 0
        assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path), "--resume"]) == 0
        assert (tmp_path / "checkpoint.ckpt").read_bytes() == (workspace / "run" / "checkpoint.ckpt").read_bytes()
        assert (tmp_path / "train.log").read_text().count("epoch=") == 3

    def test_bad_key(self, workspace, tmp_path, capsys):
        code = main(["train", "--set", "model.chanels=4,8", "--data", str(workspace / "data"), "--out", str(tmp_path)])
        assert code == 1 and "model.chanels" in capsys.readouterr().err

    def test_resume_without_checkpoint(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "run.cfg"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "none"), "--resume"]) == 1


class TestEval:
    def test_oracle_stub(self, workspace, tmp_path, capsys):
        rep = tmp_path / "m.txt"
        assert main(["eval", "--stub", "oracle", "--data", str(workspace / "data"), "--report", str(rep)]) == 0
        out = MetricsReport.parse(capsys.readouterr().out)
        assert out["miou"] == 1 and out["pd"] == 1 and out["fa"] == 0
        assert MetricsReport.parse(rep.read_text()) == out

    def test_threshold_sweep_keeps_probabilities(self, workspace, tmp_path, capsys):
        ck, data = str(workspace / "run" / "checkpoint.ckpt"), str(workspace / "data")
        reports, probs = [], []
        for k, th in enumerate(("0.05", "0.5", "0.95")):
            assert main(["eval", "--checkpoint", ck, "--data", data, "--threshold", th, "--report",
                         str(tmp_path / f"r{k}.txt"), "--probs-out", str(tmp_path / f"p{k}.ddn")]) == 0
            reports.append(MetricsReport.parse(capsys.readouterr().out))
            probs.append((tmp_path / f"p{k}.ddn").read_bytes())
        assert probs[0] == probs[1] == probs[2]
        assert len({(r["miou"], r["pd"], r["fa"]) for r in reports}) > 1
        assert reports[0]["auc"] == reports[2]["auc"]
        assert read_tensor(tmp_path / "p0.ddn").shape == (2, 1, 16, 16)

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(workspace / "data")]) == 1


class TestRoc:
    @pytest.mark.parametrize("stub,auc", [("oracle", 1.0), ("constant", 0.5)])
    def test_stubs(self, workspace, tmp_path, capsys, stub, auc):
        out = tmp_path / "roc.txt"
        assert main(["roc", "--stub", stub, "--data", str(workspace / "data"), "--out", str(out)]) == 0
        assert f"auc={auc:.6f}" in capsys.readouterr().out
        assert len(out.read_text().splitlines()) == 19 + 2

    def test_custom_thresholds(self, workspace, tmp_path):
        out = tmp_path / "roc.txt"
        assert main(["roc", "--stub", "constant", "--data", str(workspace / "data"), "--thresholds", "0.9,0.5,0.1",
                     "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 5

    def test_ascending_thresholds_rejected(self, workspace, tmp_path):
        assert main(["roc", "--stub", "constant", "--data", str(workspace / "data"), "--thresholds", "0.1,0.9",
                     "--out", str(tmp_path / "r.txt")]) == 1


class TestInfer:
    def test_single_image(self, workspace, tmp_path):
        ck = str(workspace / "run" / "best.ckpt")
        assert main(["infer", "--checkpoint", ck, "--input", str(workspace / "data" / "frames" / "0003.pgm"),
                     "--out", str(tmp_path)]) == 0
        prob, mask = read_pgm(tmp_path / "0003_prob.pgm"), read_pgm(tmp_path / "0003_mask.pgm")
        assert prob.shape == mask.shape == (16, 16) and set(np.unique(mask)) <= {0.0, 1.0}

    def test_std2net_clip(self, tmp_path):
        base = ["--set", "data.kind=sequence", "--set", "data.count=2", "--set", "scene.height=16", "--set",
                "scene.width=16", "--set", "scene.frames=5"]
        assert main(["gen-data", *base, "--out", str(tmp_path / "d")]) == 0
        assert main(["train", *base, "--set", "kind=std2net", "--set", "model.channels=4,8", "--set", "model.stages=1",
                     "--set", "train.epochs=1", "--set", "train.lr_milestones=", "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "r")]) == 0
        assert main(["infer", "--checkpoint", str(tmp_path / "r" / "best.ckpt"), "--input",
                     str(tmp_path / "d" / "clips" / "0000"), "--out", str(tmp_path / "o")]) == 0
        assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["0000_mask.pgm", "0000_prob.pgm"]

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert main(["infer", "--checkpoint", str(tmp_path / "x.ckpt"), "--input",
                     str(workspace / "data" / "frames" / "0000.pgm"), "--out", str(tmp_path / "o")]) == 1
        assert not (tmp_path / "o").exists()


class TestProcess:
    def test_help_lists_defaults(self):
        res = run_cli("train", "--help")
        flat = " ".join(res.stdout.split())
        assert res.returncode == 0
        assert "(default: test)" in flat and "(default: None)" in flat and "train.base_lr=0.0005" in res.stdout
        assert "model.channels=8,16,32,64" in res.stdout

    def test_check_bdm(self):
        res = run_cli("check", "bdm")
        assert res.returncode == 0 and "FAIL" not in res.stdout and "PASS bdm/" in res.stdout

    def test_check_unknown_suite(self):
        assert run_cli("check", "nope").returncode == 1

    @pytest.mark.parametrize("value,code", [("1", 0), ("0", 1), ("lots", 1)])
    def test_thread_cap(self, value, code):
        res = run_cli("bench", "--set", "model.channels=4,8", "--size", "16", "--iters", "1", env={"DDN_THREADS": value})
        assert res.returncode == code
        if code:
            assert "DDN_THREADS" in res.stderr
