import gzip
import json
import struct

import numpy as np
import pytest

from ebmforge.diffcore import ParamSet
from ebmforge.energies import MixtureEnergy, QuadraticEnergy
from ebmforge.lab.config import ConfigError, ExperimentConfig, apply_overrides, default_seed
from ebmforge.lab.data import IdxFormatError, load_idx, mixture2d, synthetic_digits
from ebmforge.lab.diagnostics import mixing_rate, mode_coverage, spurious_minima_probe
from ebmforge.lab.metrics import FIELDS, MetricsLog, MetricsRecord, emit_metrics, parse_metrics
from ebmforge.lab.optim import AdamHyper, AdamState, adam_step, clip_by_global_norm
from ebmforge.lab.presets import PRESETS
from ebmforge.lab.train import TrainingError, load_checkpoint, save_checkpoint, train
from ebmforge.sampling import SamplerConfig


def write_idx(path, images, magic=0x803, opener=open):
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">IIII", magic, n, h, w) + images.tobytes())


def small_config(*extra):
    return apply_overrides(ExperimentConfig(), [
        "dataset.size=500", "energy.hidden=[8]", "steps=6", "batch_size=16", "sampler.steps=5",
        "sampler.step_size=0.05", "replay.capacity=64", "seed=3", *extra])


class TestConfig:
    def test_yaml_round_trip_is_a_fixed_point(self):
        cfg = PRESETS["true_cd_mixture"]()
        text = cfg.to_yaml()
        again = ExperimentConfig.from_yaml(text)
        assert again == cfg
        assert again.to_yaml() == text

    def test_save_load(self, tmp_path):
        cfg = small_config("objective.variant=cd_kl")
        cfg.save(tmp_path / "c.yaml")
        assert ExperimentConfig.load(tmp_path / "c.yaml") == cfg

    def test_overrides(self):
        cfg = apply_overrides(ExperimentConfig(), ["--sampler.step_size=0.5", "energy.hidden=[3,4]",
                                                   "sampler.adjusted=true", "sampler.clamp=[0,1]"])
        assert cfg.sampler.step_size == 0.5 and cfg.energy.hidden == [3, 4]
        assert cfg.sampler.adjusted is True and cfg.sampler.clamp == [0.0, 1.0]

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(ExperimentConfig(), ["sampler.nope=1"])
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"samplr": {}})

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), ["steps=many"])
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), ["replay.policy=magic"])

    def test_seed_from_environment(self, monkeypatch):
        monkeypatch.setenv("EBMFORGE_SEED", "41")
        assert default_seed() == 41 and ExperimentConfig().seed == 41
        monkeypatch.setenv("EBMFORGE_SEED", "x")
        with pytest.raises(ConfigError):
            default_seed()
        monkeypatch.delenv("EBMFORGE_SEED")
        assert default_seed() == 0


class TestMetrics:
    def records(self):
        return [MetricsRecord(i, 1.0 * i, 2.0, 3.0, 0.1, mode_coverage=0.5 if i else None, wall_time=0.01 * i)
                for i in range(1, 4)]

    def test_empty_log(self, tmp_path):
        with pytest.raises(ValueError, match="nothing to emit"):
            emit_metrics(MetricsLog(), tmp_path / "m.csv")

    def test_csv_layout(self, tmp_path):
        emit_metrics(MetricsLog(self.records()), tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert len(lines) == 4
        assert lines[0].split(",") == FIELDS

    @pytest.mark.parametrize("fmt", ["csv", "jsonl"])
    def test_round_trip(self, tmp_path, fmt):
        log = MetricsLog(self.records())
        path = tmp_path / f"m.{fmt}"
        emit_metrics(log, path, fmt)
        assert list(parse_metrics(path)) == list(log)

    def test_jsonl_lines_parse(self, tmp_path):
        emit_metrics(MetricsLog(self.records()), tmp_path / "m.jsonl", "jsonl")
        rows = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [1, 2, 3]

    def test_steps_increase(self):
        log = MetricsLog(self.records())
        with pytest.raises(ValueError):
            log.append(MetricsRecord(2, 0.0, 0.0, 0.0, 0.0))


class TestIdx:
    images = np.array([[[0, 255], [128, 1]], [[10, 20], [30, 40]]])

    def test_two_image_fixture(self, tmp_path):
        write_idx(tmp_path / "x.idx", self.images)
        np.testing.assert_array_equal(load_idx(tmp_path / "x.idx"), self.images / 255.0)

    def test_gzip(self, tmp_path):
        write_idx(tmp_path / "x.idx.gz", self.images, opener=gzip.open)
        np.testing.assert_array_equal(load_idx(tmp_path / "x.idx.gz"), self.images / 255.0)

    def test_label_magic_rejected(self, tmp_path):
        write_idx(tmp_path / "y.idx", self.images, magic=0x801)
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(tmp_path / "y.idx")

    def test_truncated_payload(self, tmp_path):
        blob = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5)
        (tmp_path / "t.idx").write_bytes(blob)
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(tmp_path / "t.idx")

    def test_downsample_and_limit(self, tmp_path):
        imgs = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28))
        write_idx(tmp_path / "m.idx", imgs)
        out = load_idx(tmp_path / "m.idx", downsample_to_14=True, limit=2)
        assert out.shape == (2, 14, 14)
        want = (imgs[:2] / 255.0).reshape(2, 14, 2, 14, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(out, want, atol=1e-15)

    def test_synthetic_digits(self):
        ds = synthetic_digits(50, rng=np.random.default_rng(0))
        assert ds.points.shape == (50, 64) and ds.image_shape == (8, 8)
        assert 0.0 <= ds.points.min() and ds.points.max() <= 1.0


class TestAdam:
    def test_first_step_is_about_lr(self):
        p = ParamSet({"w": np.array([1.0, -2.0])})
        g = ParamSet({"w": np.array([0.03, -0.05])})
        new, state, info = adam_step(p, g, AdamState.zeros(p), AdamHyper(lr=1e-3))
        np.testing.assert_allclose(new["w"] - p["w"], [-1e-3, 1e-3], rtol=1e-5)
        assert state.t == 1 and not info["skipped"]

    def test_clip(self):
        g = ParamSet({"a": np.array([0.6, 0.8])})
        clipped, norm = clip_by_global_norm(g, 0.1)
        assert norm == pytest.approx(1.0) and clipped.norm() == pytest.approx(0.1)
        same, _ = clip_by_global_norm(g, 10.0)
        assert same is g

    def test_inputs_untouched(self):
        p = ParamSet({"w": np.ones(3)})
        g = ParamSet({"w": np.full(3, 0.5)})
        s = AdamState.zeros(p)
        before = (p.flatten().copy(), g.flatten().copy(), s.m.flatten().copy(), s.v.flatten().copy())
        adam_step(p, g, s)
        after = (p.flatten(), g.flatten(), s.m.flatten(), s.v.flatten())
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_non_finite_skipped(self):
        p = ParamSet({"w": np.ones(2)})
        s = AdamState.zeros(p)
        new, s2, info = adam_step(p, ParamSet({"w": np.array([np.nan, 1.0])}), s)
        assert info["skipped"] and new is p and s2 is s


class TestDiagnostics:
    modes = mixture2d().modes

    def test_coverage(self):
        assert mode_coverage(self.modes, self.modes, 0.75) == 1.0
        assert mode_coverage(np.repeat(self.modes[:1], 100, axis=0), self.modes, 0.75) == 1 / 8
        uniform = np.random.default_rng(0).uniform(-6, 6, size=(20000, 2))
        assert mode_coverage(uniform, self.modes, 0.75) == 1.0

    def test_mixing_rate(self):
        assert mixing_rate(np.repeat(self.modes[:1], 50, axis=0), self.modes) == 0.0
        alternating = self.modes[np.arange(1001) % 2]
        assert mixing_rate(alternating, self.modes) == 1000.0
        with pytest.raises(ValueError):
            mixing_rate(np.zeros((0, 2)), self.modes)

    def test_probe_infinite_delta(self):
        rng = np.random.default_rng(0)
        rep = spurious_minima_probe(QuadraticEnergy([0.0, 0.0]), rng.normal(size=(10, 2)), rng.normal(size=(10, 2)),
                                    SamplerConfig(0.1, steps=10), rng, delta=np.inf)
        assert rep.noise_success == 1.0 and rep.data_success == 1.0

    def test_probe_on_ground_truth_mixture(self):
        truth = MixtureEnergy.ring(8, 4.0, 0.25)
        rng = np.random.default_rng(1)
        data = mixture2d(n=300, rng=rng).points
        noise = rng.uniform(-6, 6, size=(300, 2))
        rep = spurious_minima_probe(truth, noise, data, SamplerConfig(0.01, steps=2000, adjusted=True), rng)
        assert abs(rep.noise_success - rep.data_success) < 0.1


class TestTrain:
    def test_zero_steps_leave_model_unchanged(self):
        cfg = small_config("steps=0")
        res = train(cfg)
        fresh = train(small_config("steps=0"))
        assert res.model.params.equal(fresh.model.params) and len(res.metrics) == 0

    def test_exact_nll_recovers_gaussian_mean(self):
        cfg = apply_overrides(ExperimentConfig(), [
            "dataset.kind=mixture2d", "dataset.modes=1", "dataset.radius=1.0", "dataset.std=0.5",
            "energy.kind=quadratic", "objective.variant=exact_nll", "objective.grid_low=[-8,-8]",
            "objective.grid_high=[8,8]", "objective.grid_nodes=81", "steps=500", "batch_size=1024",
            "optimizer.lr=3e-3", "log_every=100", "seed=0"])
        res = train(cfg)
        np.testing.assert_allclose(res.model.params["mean"], res.dataset.points.mean(axis=0), atol=1e-2)

    @pytest.mark.parametrize("variant", ["mcmc_nll", "cd_star", "cd_kl"])
    def test_determinism(self, variant):
        a = train(small_config(f"objective.variant={variant}"))
        b = train(small_config(f"objective.variant={variant}"))
        assert a.model.params.equal(b.model.params)
        assert a.metrics.without_time() == b.metrics.without_time()

    @pytest.mark.parametrize("variant", ["mcmc_nll", "cd_kl"])
    def test_resume_matches_uninterrupted(self, tmp_path, variant):
        full = train(small_config(f"objective.variant={variant}", "steps=8"))
        half = train(small_config(f"objective.variant={variant}", "steps=4"))
        save_checkpoint(half, tmp_path / "c.ebmc")
        resumed = train(small_config(f"objective.variant={variant}", "steps=8"), resume=str(tmp_path / "c.ebmc"))
        assert resumed.model.params.equal(full.model.params)
        assert resumed.metrics.without_time() == full.metrics.without_time()

    def test_clipped_norm_never_exceeds_threshold(self):
        res = train(small_config("steps=20", "optimizer.lr=0.01"))
        assert max(res.metrics.column("grad_norm_clipped")) <= 0.1 + 1e-12

    def test_non_finite_energy_is_reported(self):
        cfg = small_config("sampler.step_size=1e6", "sampler.steps=30", "energy.kind=quadratic",
                           "replay.noise_low=-1e3", "replay.noise_high=1e3")
        with np.errstate(all="ignore"), pytest.raises(TrainingError, match="non-finite"):
            train(cfg)

    def test_checkpoint_files(self, tmp_path):
        res = train(small_config(f"output_dir={tmp_path}", "checkpoint_every=3"))
        blob = (tmp_path / "checkpoint.ebmc").read_bytes()
        assert blob[:4] == b"EBMC"
        assert (tmp_path / "checkpoint_0000003.ebmc").exists()
        assert len(parse_metrics(tmp_path / "metrics.csv")) == len(res.metrics)
        back = load_checkpoint(tmp_path / "checkpoint.ebmc")
        assert back.model.params.equal(res.model.params) and back.step == 6
        (tmp_path / "bad.ebmc").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "bad.ebmc")

    def test_resume_rejects_changed_config(self, tmp_path):
        save_checkpoint(train(small_config("steps=2")), tmp_path / "c.ebmc")
        with pytest.raises(ValueError, match="differs"):
            train(small_config("steps=4", "sampler.steps=9"), resume=str(tmp_path / "c.ebmc"))
