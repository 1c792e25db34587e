import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebmforge.replay import (MAGIC, DataCD, NoiseDist, NoiseReservoir, Persistent, Reservoir, init_reservoir,
                             load_reservoir, push_finals, sample_inits, save_reservoir)


def binomial_band(p, n, k=3.0):
    half = k * np.sqrt(p * (1 - p) / n)
    return p - half, p + half


class TestInit:
    def test_noise_reservoir_filled(self):
        res = init_reservoir(NoiseReservoir(NoiseDist(3, 0.0, 1.0)), 10, np.random.default_rng(0))
        s = res.states()
        assert s.shape == (10, 3)
        assert s.min() >= 0.0 and s.max() <= 1.0

    def test_data_policies_store_members(self):
        data = np.arange(10.0).reshape(5, 2)
        for policy in (DataCD(data), Persistent(data)):
            res = init_reservoir(policy, 10, np.random.default_rng(0))
            members = {tuple(r) for r in data}
            assert len(res) == 10
            assert all(tuple(r) in members for r in res.states())

    def test_default_configuration(self):
        p = NoiseReservoir(NoiseDist(2))
        assert p.noise_reinit_prob == 0.01
        assert DataCD(np.zeros((1, 2))).reset_prob == 0.1
        assert init_reservoir(p, 10000, np.random.default_rng(0)).capacity == 10000

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            DataCD(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            NoiseReservoir(NoiseDist(2), noise_reinit_prob=1.5)
        with pytest.raises(ValueError):
            Persistent(np.zeros((1, 2)), reset_to_data_prob=-0.1)
        with pytest.raises(ValueError):
            Reservoir(0, 2)


class TestSampleInits:
    def setup_method(self):
        self.data = np.random.default_rng(0).normal(size=(50, 2)) + 100.0

    def _reservoir(self, prob):
        policy = NoiseReservoir(NoiseDist(2, -1.0, 1.0), prob)
        res = Reservoir(20, 2, policy)
        res.fill(self.data[:20])                  # tagged: far from the noise box
        return res

    def test_all_fresh(self):
        out, fresh = self._reservoir(1.0).sample(500, np.random.default_rng(0))
        assert fresh.all()
        assert np.abs(out).max() <= 1.0

    def test_none_fresh(self):
        res = self._reservoir(0.0)
        out = sample_inits(res, 500, np.random.default_rng(0))
        stored = {tuple(r) for r in res.states()}
        assert all(tuple(r) in stored for r in out)

    def test_reinit_rate(self):
        _, fresh = self._reservoir(0.1).sample(100000, np.random.default_rng(1))
        lo, hi = binomial_band(0.1, 100000)
        assert lo <= fresh.mean() <= hi
        assert abs(fresh.mean() - 0.1) <= 0.005

    def test_data_reset_rate(self):
        res = init_reservoir(DataCD(self.data, reset_prob=0.3), 100, np.random.default_rng(0))
        _, fresh = res.sample(20000, np.random.default_rng(2))
        lo, hi = binomial_band(0.3, 20000)
        assert lo <= fresh.mean() <= hi

    def test_uniform_with_replacement(self):
        res = self._reservoir(0.0)
        out = res.sample(40000, np.random.default_rng(3))[0]
        _, counts = np.unique(out[:, 0], return_counts=True)
        assert len(counts) == 20
        assert counts.min() > 1700 and counts.max() < 2300

    def test_errors(self):
        with pytest.raises(ValueError):
            self._reservoir(0.0).sample(0, np.random.default_rng(0))
        with pytest.raises(ValueError, match="empty"):
            Reservoir(3, 1).sample(1, np.random.default_rng(0))


class TestPush:
    def test_fifo_eviction(self):
        res = Reservoir(3, 1)
        for v in "abcd":
            res.push([[float(ord(v))]])
        assert [chr(int(x)) for x in res.states()[:, 0]] == ["b", "c", "d"]

    def test_empty_push_is_noop(self):
        res = Reservoir(3, 2)
        res.push(np.zeros((1, 2)))
        res.push(np.zeros((0, 2)))
        res.push([])
        assert len(res) == 1 and res.pushes == 1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            Reservoir(3, 2).push(np.zeros((1, 3)))

    def test_oversized_push_keeps_newest(self):
        res = Reservoir(3, 1)
        res.push(np.arange(5.0)[:, None])
        np.testing.assert_array_equal(res.states()[:, 0], [2.0, 3.0, 4.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 20), st.lists(st.integers(0, 8), min_size=1, max_size=60))
    def test_fifo_against_list_model(self, capacity, sizes):
        res = Reservoir(capacity, 1)
        model, counter = [], 0
        for n in sizes:
            batch = np.arange(counter, counter + n, dtype=float)[:, None]
            counter += n
            res.push(batch)
            model = (model + batch[:, 0].tolist())[-capacity:]
            assert len(res) <= capacity
            np.testing.assert_array_equal(res.states()[:, 0], model)

    def test_interleaved_rounds_never_exceed_capacity(self):
        rng = np.random.default_rng(0)
        res = init_reservoir(NoiseReservoir(NoiseDist(2), 0.05), 64, rng)
        for _ in range(1000):
            x = res.sample(int(rng.integers(1, 40)), rng)[0]
            push_finals(res, x + 1.0, rng)
            assert len(res) <= 64

    def test_classic_cd_never_returns_chain_states(self):
        data = np.random.default_rng(0).normal(size=(30, 2))
        rng = np.random.default_rng(1)
        res = init_reservoir(DataCD(data, reset_prob=1.0), 50, rng)
        members = {tuple(r) for r in data}
        for _ in range(200):
            x = res.sample(16, rng)[0]
            assert all(tuple(r) in members for r in x)
            push_finals(res, x + 0.5, rng)           # chain outputs, never data

    def test_persistent_full_reset(self):
        data = np.zeros((4, 1))
        rng = np.random.default_rng(0)
        res = init_reservoir(Persistent(data, full_reset_every=3), 5, rng)
        push_finals(res, np.ones((2, 1)), rng)
        push_finals(res, np.ones((2, 1)), rng)
        assert res.states().sum() == 4.0
        push_finals(res, np.ones((2, 1)), rng)
        assert res.states().sum() == 0.0 and len(res) == 5 and res.pushes == 3


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        res = Reservoir(10, 3)
        res.push(np.random.default_rng(0).normal(size=(13, 3)))
        path = tmp_path / "r.ebmr"
        save_reservoir(res, path)
        back = load_reservoir(path)
        assert back.capacity == 10 and back.dim == 3
        np.testing.assert_array_equal(back.states(), res.states())

    def test_header_layout(self, tmp_path):
        res = Reservoir(7, 2)
        res.push(np.ones((2, 2)))
        path = tmp_path / "r.ebmr"
        save_reservoir(res, path)
        blob = path.read_bytes()
        assert blob[:4] == MAGIC == b"EBMR"
        assert struct.unpack("<III", blob[4:16]) == (1, 7, 2)
        assert len(blob) == 16 + 2 * 2 * 8

    def test_corrupt_files(self, tmp_path):
        bad = tmp_path / "bad.ebmr"
        bad.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            load_reservoir(bad)
        trunc = tmp_path / "trunc.ebmr"
        trunc.write_bytes(MAGIC + struct.pack("<III", 1, 4, 2) + bytes(12))
        with pytest.raises(ValueError, match="truncated"):
            load_reservoir(trunc)
        ver = tmp_path / "ver.ebmr"
        ver.write_bytes(MAGIC + struct.pack("<III", 9, 4, 2))
        with pytest.raises(ValueError, match="version"):
            load_reservoir(ver)
