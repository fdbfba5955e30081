"""End-to-end command-line workflows."""

import os

import pytest
import yaml

from mltfr.cli import main
from mltfr.experiment import read_metrics


def write_config(tmp_path, **overrides):
    payload = {
        "dataset": {
            "synthetic": {
                "n_users": 30, "n_items": 20, "n_clusters": 5,
                "seq_len": 6, "next_cluster_prob": 0.8, "seed": 3,
            },
        },
        "vocabularies": [
            {"source": "synthetic-clustered", "vocab_size": 30, "dim": 8,
             "n_clusters": 5, "spread": 0.1, "seed": 0},
        ],
        "filter": {"top_k": 4, "tau": 0.7},
        "backbone": {"style": "causal", "layers": 1, "heads": 2, "d_emb": 8,
                     "dropout": 0.0, "max_len": 6},
        "train": {"batch_size": 16, "lr": 0.01, "epochs_round1": 1,
                  "epochs_round2": 1, "seed": 0},
        "model": {"alpha": 0.2, "reprogram_heads": 2},
        "eval": {"k": 5},
        "variant": "full",
    }
    payload.update(overrides)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(payload))
    return path


class TestPrepareData:
    def test_writes_reindexed_outputs(self, tmp_path, capsys):
        raw = tmp_path / "raw.txt"
        raw.write_text("7 100 200 300 100\n9 200 300 100 400\n")
        config = write_config(tmp_path, dataset={"path": "raw.txt", "min_core": 2})
        out = tmp_path / "prepared"
        assert main(["prepare-data", "--config", str(config), "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "prepared 2 users" in stdout
        lines = (out / "interactions.txt").read_text().splitlines()
        assert lines[0] == "1 1 2 3 1"
        assert lines[1] == "2 2 3 1"
        items = dict(
            line.split("\t") for line in (out / "items.map").read_text().splitlines()
        )
        assert items == {"100": "1", "200": "2", "300": "3"}
        users = dict(
            line.split("\t") for line in (out / "users.map").read_text().splitlines()
        )
        assert users == {"7": "1", "9": "2"}


class TestTrainEvaluate:
    def test_train_then_evaluate_reproduces_metrics(self, tmp_path, capsys):
        config = write_config(tmp_path)
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(config), "--out", str(run_dir)]) == 0
        train_out = capsys.readouterr().out
        assert "HR@5" in train_out
        trained = read_metrics(run_dir / "metrics.txt")

        eval_dir = tmp_path / "eval"
        assert main([
            "evaluate", "--config", str(config),
            "--checkpoint", str(run_dir / "checkpoint"), "--out", str(eval_dir),
        ]) == 0
        restored = read_metrics(eval_dir / "metrics.txt")
        assert restored["hr@5"] == trained["hr@5"]
        assert restored["ndcg@5"] == trained["ndcg@5"]

    def test_seed_override_is_recorded(self, tmp_path):
        config = write_config(tmp_path)
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(config), "--seed", "42",
                     "--out", str(run_dir)]) == 0
        assert read_metrics(run_dir / "metrics.txt")["seed"] == "42"

    def test_missing_config_is_a_clean_failure(self, tmp_path, capsys):
        config = write_config(tmp_path, variant="hybrid")
        code = main(["train", "--config", str(config)])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestAblate:
    def test_prints_improvement(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["ablate", "--config", str(config), "--out", str(tmp_path / "ab")]) == 0
        stdout = capsys.readouterr().out
        assert "wo_sc" in stdout
        assert "full" in stdout
        assert "Imp." in stdout
        assert (tmp_path / "ab" / "full" / "metrics.txt").exists()
        assert (tmp_path / "ab" / "wo_sc" / "metrics.txt").exists()


class TestReport:
    def test_report_with_baseline(self, tmp_path, capsys):
        config = write_config(tmp_path)
        main(["train", "--config", str(config), "--out", str(tmp_path / "full")])
        main(["train", "--config", str(write_config(tmp_path, variant='backbone_only', vocabularies=[])),
              "--out", str(tmp_path / "base")])
        capsys.readouterr()
        assert main(["report", "--run", str(tmp_path / "full"),
                     "--baseline", str(tmp_path / "base")]) == 0
        stdout = capsys.readouterr().out
        assert "Imp." in stdout
        assert "full" in stdout


class TestSweepAndBench:
    def test_sweep_writes_csv(self, tmp_path, capsys):
        config = write_config(tmp_path, variant="wo_sc")
        out = tmp_path / "sweep"
        assert main(["sweep-experts", "--config", str(config),
                     "--max-experts", "2", "--out", str(out)]) == 0
        assert "n_experts=2" in capsys.readouterr().out
        assert (out / "sweep.csv").exists()

    def test_bench_moe_prints_fit(self, tmp_path, capsys):
        out = tmp_path / "bench"
        assert main(["bench-moe", "--max-experts", "2", "--repetitions", "1",
                     "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "linear fit" in stdout
        assert (out / "timing.csv").exists()
