"""Command-line behavior: exit codes, file outputs, config precedence,
determinism of checkpoint hashes and metric reports across reruns."""

import json
import re
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from modex.cli import main
from modex.config import RunConfig
from modex.data import load_dataset


@pytest.fixture()
def runner():
    return CliRunner()


SMALL = ["--set", "d_k=8", "--set", "heads=2", "--set", "layers=1",
         "--set", "ffn_dim=8", "--set", "mol_cap=3", "--set", "dis_cap=2",
         "--set", "inc_cap=3", "--set", "exc_cap=2", "--set", "batch_size=16",
         "--set", "epochs=2", "--set", "split_date=2010-02-01"]


def make_data(runner, tmp_path, n=60, seed=0, name="data.jsonl", sep="0.8"):
    path = tmp_path / name
    res = runner.invoke(main, ["synth", "--n", str(n), "--seed", str(seed),
                               "--separability", sep,
                               "--d-mol", "6", "--d-dis", "4", "--d-txt", "6",
                               "--out", str(path)])
    assert res.exit_code == 0, res.output
    return path


class TestSynth:
    def test_writes_loadable_file(self, runner, tmp_path):
        path = make_data(runner, tmp_path, n=10)
        manifest, records = load_dataset(path)
        assert manifest.record_count == 10
        assert len(records) == 10

    def test_deterministic_bytes(self, runner, tmp_path):
        a = make_data(runner, tmp_path, n=12, name="a.jsonl")
        b = make_data(runner, tmp_path, n=12, name="b.jsonl")
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_outputs_and_exit_zero(self, runner, tmp_path):
        data = make_data(runner, tmp_path)
        out = tmp_path / "run"
        res = runner.invoke(main, ["train", "--data", str(data),
                                   "--out-dir", str(out)] + SMALL)
        assert res.exit_code == 0, res.output
        assert (out / "checkpoint.bin").exists()
        assert (out / "config.yaml").exists()
        assert (out / "report.json").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["best_epoch"] >= 0
        # resolved config written next to outputs
        cfg = RunConfig.from_file(out / "config.yaml")
        assert cfg.d_k == 8

    def test_missing_data_exits_2(self, runner, tmp_path):
        res = runner.invoke(main, ["train", "--data", str(tmp_path / "nope.jsonl"),
                                   "--out-dir", str(tmp_path / "o")])
        assert res.exit_code == 2

    def test_bad_config_key_exits_2(self, runner, tmp_path):
        data = make_data(runner, tmp_path, n=20)
        res = runner.invoke(main, ["train", "--data", str(data),
                                   "--out-dir", str(tmp_path / "o"),
                                   "--set", "no_such_field=1"])
        assert res.exit_code == 2
        assert "no_such_field" in res.output

    def test_malformed_data_exits_1(self, runner, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"kind":"manifest","oops":true}\n')
        res = runner.invoke(main, ["train", "--data", str(bad),
                                   "--out-dir", str(tmp_path / "o")] + SMALL)
        assert res.exit_code == 1

    def test_same_seed_identical_checkpoint_hash(self, runner, tmp_path):
        data = make_data(runner, tmp_path)
        hashes = []
        for d in ("r1", "r2"):
            res = runner.invoke(main, ["train", "--data", str(data),
                                       "--out-dir", str(tmp_path / d)] + SMALL)
            assert res.exit_code == 0, res.output
            m = re.search(r"checkpoint sha256 ([0-9a-f]{64})", res.output)
            hashes.append(m.group(1))
        assert hashes[0] == hashes[1]
        assert (tmp_path / "r1/checkpoint.bin").read_bytes() == \
               (tmp_path / "r2/checkpoint.bin").read_bytes()

    def test_config_file_and_set_precedence(self, runner, tmp_path):
        data = make_data(runner, tmp_path, n=60)
        cfg_file = tmp_path / "cfg.yaml"
        yaml.safe_dump({"d_k": 8, "heads": 2, "layers": 1, "ffn_dim": 8,
                        "mol_cap": 3, "dis_cap": 2, "inc_cap": 3, "exc_cap": 2,
                        "batch_size": 16, "epochs": 5,
                        "split_date": "2010-02-01"}, cfg_file.open("w"))
        out = tmp_path / "prec"
        res = runner.invoke(main, ["train", "--data", str(data),
                                   "--config", str(cfg_file),
                                   "--set", "epochs=1",
                                   "--out-dir", str(out)])
        assert res.exit_code == 0, res.output
        cfg = RunConfig.from_file(out / "config.yaml")
        assert cfg.epochs == 1  # --set beats file
        assert cfg.d_k == 8    # file beats defaults


class TestEval:
    def train_once(self, runner, tmp_path):
        data = make_data(runner, tmp_path)
        out = tmp_path / "run"
        res = runner.invoke(main, ["train", "--data", str(data),
                                   "--out-dir", str(out)] + SMALL)
        assert res.exit_code == 0, res.output
        return data, out / "checkpoint.bin"

    def test_metrics_table_and_determinism(self, runner, tmp_path):
        data, ckpt = self.train_once(runner, tmp_path)
        args = ["eval", "--checkpoint", str(ckpt), "--data", str(data)]
        a = runner.invoke(main, args)
        b = runner.invoke(main, args)
        assert a.exit_code == 0, a.output
        assert a.output == b.output
        for name in ("f1", "pr_auc", "roc_auc"):
            assert name in a.output

    def test_writes_metrics_json(self, runner, tmp_path):
        data, ckpt = self.train_once(runner, tmp_path)
        out = tmp_path / "evalout"
        res = runner.invoke(main, ["eval", "--checkpoint", str(ckpt),
                                   "--data", str(data), "--out-dir", str(out)])
        assert res.exit_code == 0, res.output
        blob = json.loads((out / "metrics.json").read_text())
        assert set(["f1", "pr_auc", "roc_auc"]) <= set(blob)
        assert (out / "config.yaml").exists()

    def test_dim_mismatch_exits_2(self, runner, tmp_path):
        data, ckpt = self.train_once(runner, tmp_path)
        other = tmp_path / "wide.jsonl"
        res = runner.invoke(main, ["synth", "--n", "10", "--d-mol", "8",
                                   "--d-dis", "4", "--d-txt", "6",
                                   "--out", str(other)])
        assert res.exit_code == 0
        res = runner.invoke(main, ["eval", "--checkpoint", str(ckpt),
                                   "--data", str(other)])
        assert res.exit_code == 2
        assert "dims" in res.output

    def test_bootstrap_overrides(self, runner, tmp_path):
        data, ckpt = self.train_once(runner, tmp_path)
        res = runner.invoke(main, ["eval", "--checkpoint", str(ckpt),
                                   "--data", str(data),
                                   "--set", "bootstrap_reps=3",
                                   "--set", "bootstrap_fraction=0.9"])
        assert res.exit_code == 0, res.output
        assert "replicates 3 fraction 0.9" in res.output


class TestAblate:
    def test_grid_table_and_winner(self, runner, tmp_path):
        data = make_data(runner, tmp_path, n=50)
        out = tmp_path / "ab"
        res = runner.invoke(main, [
            "ablate", "--data", str(data), "--out-dir", str(out),
            "--cell", "loss_variant=bce_only",
            "--cell", "loss_variant=full"] + SMALL)
        assert res.exit_code == 0, res.output
        assert "winner:" in res.output
        table = json.loads((out / "ablation.json").read_text())
        assert len(table) == 2
        assert (out / "best.bin").exists()

    def test_empty_cell_spec_exits_2(self, runner, tmp_path):
        data = make_data(runner, tmp_path, n=20)
        res = runner.invoke(main, ["ablate", "--data", str(data),
                                   "--out-dir", str(tmp_path / "x"),
                                   "--cell", "nonsense"] + SMALL)
        assert res.exit_code == 2


class TestStats:
    def test_table_shape(self, runner, tmp_path):
        data = make_data(runner, tmp_path)
        out = tmp_path / "run"
        res = runner.invoke(main, ["train", "--data", str(data),
                                   "--out-dir", str(out)] + SMALL)
        assert res.exit_code == 0, res.output
        res = runner.invoke(main, ["stats", "--checkpoint",
                                   str(out / "checkpoint.bin"),
                                   "--data", str(data)])
        assert res.exit_code == 0, res.output
        lines = [l for l in res.output.splitlines() if l.strip()]
        assert lines[0].split()[:3] == ["mode", "group", "index"]
        assert any(l.startswith("mol") for l in lines[1:])
        assert any(l.startswith("crit") for l in lines[1:])

    def test_threshold_zero_all_ones(self, runner, tmp_path):
        data = make_data(runner, tmp_path)
        out = tmp_path / "t0"
        res = runner.invoke(main, ["train", "--data", str(data),
                                   "--out-dir", str(out),
                                   "--set", "select_threshold=0.0"] + SMALL)
        assert res.exit_code == 0, res.output
        res = runner.invoke(main, ["stats", "--checkpoint",
                                   str(out / "checkpoint.bin"),
                                   "--data", str(data)])
        assert res.exit_code == 0, res.output
        for line in res.output.splitlines()[1:]:
            parts = line.split()
            if parts and parts[0] in ("mol", "dis", "crit"):
                assert float(parts[4]) == 1.0, line
