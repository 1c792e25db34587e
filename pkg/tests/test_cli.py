import json

import numpy as np
import pytest

from ebmforge.lab.cli import main
from ebmforge.lab.config import ExperimentConfig
from ebmforge.replay import load_reservoir

SMALL = ["--dataset.size=300", "--energy.hidden=[8]", "--steps=4", "--batch_size=16", "--sampler.steps=5",
         "--sampler.step_size=0.05", "--replay.capacity=32", "--seed=1"]


@pytest.fixture
def checkpoint(tmp_path):
    assert main(["train", *SMALL, f"--output_dir={tmp_path}"]) == 0
    return tmp_path / "checkpoint.ebmc"


class TestCli:
    def test_train_writes_metrics(self, tmp_path, capsys):
        path = tmp_path / "m.jsonl"
        assert main(["train", *SMALL, "--metrics", str(path)]) == 0
        assert "trained 4 steps" in capsys.readouterr().out
        assert len(path.read_text().splitlines()) == 4

    def test_dump_config_applies_overrides(self, capsys):
        assert main(["train", "--preset", "true_cd_mixture", "--steps=7", "--dump-config"]) == 0
        cfg = ExperimentConfig.from_yaml(capsys.readouterr().out)
        assert cfg.steps == 7 and cfg.replay.policy == "true_cd"

    def test_config_file(self, tmp_path, capsys):
        ExperimentConfig(steps=2).save(tmp_path / "c.yaml")
        assert main(["train", "--config", str(tmp_path / "c.yaml"), "--dump-config"]) == 0
        assert ExperimentConfig.from_yaml(capsys.readouterr().out).steps == 2

    def test_unknown_override(self, capsys):
        assert main(["train", "--foo.bar=1"]) == 2
        assert "unknown config key: foo.bar" in capsys.readouterr().err

    def test_unknown_preset(self, capsys):
        assert main(["train", "--preset", "nope"]) == 2

    def test_sample(self, checkpoint, tmp_path, capsys):
        out, trace = tmp_path / "s.csv", tmp_path / "t.csv"
        assert main(["sample", "--checkpoint", str(checkpoint), "--n", "5", "--steps", "3", "--out", str(out),
                     "--trace", str(trace), "--transition", "mode_jump", "--period", "2"]) == 0
        assert "mode coverage" in capsys.readouterr().out
        assert np.loadtxt(out, delimiter=",", skiprows=1).shape == (5, 2)
        assert len(trace.read_text().splitlines()) == 1 + 4 * 5

    def test_sample_is_seeded(self, checkpoint, tmp_path):
        for name in ("a", "b"):
            main(["sample", "--checkpoint", str(checkpoint), "--n", "4", "--steps", "5", "--seed", "9",
                  "--out", str(tmp_path / name)])
        assert (tmp_path / "a").read_text() == (tmp_path / "b").read_text()

    def test_probe(self, checkpoint, capsys):
        assert main(["probe", "--checkpoint", str(checkpoint), "--n", "10", "--steps", "5"]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert 0.0 <= rep["noise_success"] <= 1.0 and rep["data_success"] > 0.0

    def test_grad_audit(self, tmp_path):
        out = tmp_path / "a.json"
        assert main(["grad-audit", *SMALL, "--energy.kind=quadratic", "--objective.grid_low=[-8,-8]",
                     "--objective.grid_high=[8,8]", "--objective.grid_nodes=61", "--out", str(out)]) == 0
        rows = json.loads(out.read_text())["records"]
        assert len(rows) == 4 and all(-1.0 <= r["oracle_cosine"] <= 1.0 for r in rows)

    def test_grad_audit_needs_grid(self, capsys):
        assert main(["grad-audit", *SMALL]) == 2

    def test_entropy_check(self, capsys):
        assert main(["entropy-check", "--n", "2000", "--calibrate"]) == 0
        assert abs(json.loads(capsys.readouterr().out)["error"]) < 0.1

    def test_dump_grid(self, checkpoint, tmp_path):
        out = tmp_path / "g.csv"
        assert main(["dump-grid", "--checkpoint", str(checkpoint), "--resolution", "5", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 1 + 25

    def test_buffer_round_trip(self, checkpoint, tmp_path, capsys):
        snap = tmp_path / "r.ebmr"
        assert main(["buffer", "save", "--checkpoint", str(checkpoint), "--file", str(snap)]) == 0
        assert load_reservoir(snap).capacity == 32
        capsys.readouterr()
        assert main(["buffer", "load", "--file", str(snap)]) == 0
        assert json.loads(capsys.readouterr().out)["size"] == 32

    def test_missing_file(self, tmp_path, capsys):
        assert main(["buffer", "load", "--file", str(tmp_path / "missing")]) == 2

    def test_stray_arguments(self):
        with pytest.raises(SystemExit):
            main(["entropy-check", "--bogus=1"])
