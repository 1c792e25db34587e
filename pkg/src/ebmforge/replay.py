"""Chain-initialization reservoir.

One bounded FIFO hosts all three regimes; they differ only in the policy:

* ``DataCD`` - filled with data, each draw replaced by a fresh data point with
  ``reset_prob``. ``reset_prob=1`` is classic CD-t.
* ``Persistent`` - filled with data, draws are previous chain finals (PCD),
  optionally reset to data, and optionally wiped back to data every
  ``full_reset_every`` pushes.
* ``NoiseReservoir`` - filled with noise, each draw replaced by fresh noise
  with ``noise_reinit_prob``. Chains started here approximate the model
  density, so the resulting objective is maximum likelihood rather than CD.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

__all__ = [
    "NoiseDist", "DataCD", "Persistent", "NoiseReservoir", "InitPolicy", "Reservoir",
    "init_reservoir", "sample_inits", "push_finals", "save_reservoir", "load_reservoir",
    "MAGIC", "VERSION",
]

MAGIC = b"EBMR"
VERSION = 1


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass
class NoiseDist:
    """Uniform noise on [low, high]^dim."""

    dim: int
    low: float = 0.0
    high: float = 1.0

    def sample(self, n, rng):
        return rng.uniform(self.low, self.high, size=(n, self.dim))


def _as_dataset(data):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("dataset is empty")
    return data


@dataclass
class DataCD:
    dataset: np.ndarray
    reset_prob: float = 0.1

    def __post_init__(self):
        self.dataset = _as_dataset(self.dataset)
        _check_prob("reset_prob", self.reset_prob)

    label = "true_cd"

    @property
    def fresh_prob(self):
        return self.reset_prob

    def fresh(self, n, rng):
        return self.dataset[rng.integers(len(self.dataset), size=n)]

    base = fresh


@dataclass
class Persistent:
    dataset: np.ndarray
    reset_to_data_prob: float = 0.0
    full_reset_every: Optional[int] = None

    def __post_init__(self):
        self.dataset = _as_dataset(self.dataset)
        _check_prob("reset_to_data_prob", self.reset_to_data_prob)
        if self.full_reset_every is not None and self.full_reset_every < 1:
            raise ValueError("full_reset_every must be >= 1")

    label = "persistent_cd"

    @property
    def fresh_prob(self):
        return self.reset_to_data_prob

    def fresh(self, n, rng):
        return self.dataset[rng.integers(len(self.dataset), size=n)]

    base = fresh


@dataclass
class NoiseReservoir:
    noise: NoiseDist
    noise_reinit_prob: float = 0.01

    def __post_init__(self):
        _check_prob("noise_reinit_prob", self.noise_reinit_prob)

    label = "noise_reservoir"

    @property
    def fresh_prob(self):
        return self.noise_reinit_prob

    def fresh(self, n, rng):
        return self.noise.sample(n, rng)

    base = fresh


InitPolicy = Union[DataCD, Persistent, NoiseReservoir]


class Reservoir:
    """Bounded FIFO of chain states (ring buffer, oldest evicted first)."""

    def __init__(self, capacity: int, dim: int, policy: Optional[InitPolicy] = None):
        if capacity <= 0:
            raise ValueError("capacity must be > 0")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.policy = policy
        self._buf = np.zeros((self.capacity, self.dim))
        self._start = 0
        self._size = 0
        self.pushes = 0

    def __len__(self):
        return self._size

    def states(self) -> np.ndarray:
        """Stored states, oldest first (a copy)."""
        idx = (self._start + np.arange(self._size)) % self.capacity
        return self._buf[idx].copy()

    def push(self, finals) -> None:
        finals = np.asarray(finals, dtype=np.float64)
        if finals.size == 0:
            return
        finals = np.atleast_2d(finals)
        if finals.shape[1] != self.dim:
            raise ValueError(f"push: expected dimension {self.dim}, got {finals.shape[1]}")
        if len(finals) >= self.capacity:
            self._buf[:] = finals[-self.capacity:]
            self._start, self._size = 0, self.capacity
        else:
            end = (self._start + self._size) % self.capacity
            idx = (end + np.arange(len(finals))) % self.capacity
            self._buf[idx] = finals
            overflow = max(0, self._size + len(finals) - self.capacity)
            self._start = (self._start + overflow) % self.capacity
            self._size = min(self.capacity, self._size + len(finals))
        self.pushes += 1

    def fill(self, states) -> None:
        self._start, self._size = 0, 0
        self.push(states)
        self.pushes = 0

    def sample(self, batch_size, rng):
        """Return ``(inits, fresh_mask)``: uniform draws with replacement, each
        independently swapped for a fresh policy draw with the policy's probability."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self._size == 0:
            raise ValueError("reservoir is empty")
        idx = rng.integers(self._size, size=batch_size)
        out = self._buf[(self._start + idx) % self.capacity].copy()
        p = self.policy.fresh_prob if self.policy is not None else 0.0
        fresh = rng.random(batch_size) < p
        if fresh.any():
            out[fresh] = self.policy.fresh(int(fresh.sum()), rng)
        return out, fresh


def init_reservoir(policy: InitPolicy, capacity: int, rng, dim: Optional[int] = None) -> Reservoir:
    """Fill a new reservoir to capacity from the policy's base distribution."""
    if isinstance(policy, NoiseReservoir):
        dim = policy.noise.dim
    else:
        dim = policy.dataset.shape[1]
    res = Reservoir(capacity, dim, policy)
    res.fill(policy.base(capacity, rng))
    return res


def sample_inits(reservoir: Reservoir, batch_size: int, rng) -> np.ndarray:
    return reservoir.sample(batch_size, rng)[0]


def push_finals(reservoir: Reservoir, finals, rng=None) -> None:
    """Append chain finals; a ``Persistent`` policy with ``full_reset_every``
    refills from data on that schedule (needs ``rng``)."""
    reservoir.push(finals)
    every = getattr(reservoir.policy, "full_reset_every", None)
    if every and np.asarray(finals).size and reservoir.pushes % every == 0:
        if rng is None:
            raise ValueError("full reset needs an rng")
        pushes = reservoir.pushes
        reservoir.fill(reservoir.policy.base(reservoir.capacity, rng))
        reservoir.pushes = pushes


def save_reservoir(reservoir: Reservoir, path) -> None:
    """Header: b"EBMR", version u32, capacity u32, dim u32 (little-endian);
    then the stored states, oldest first, as little-endian f64."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", VERSION, reservoir.capacity, reservoir.dim))
        fh.write(reservoir.states().astype("<f8").tobytes())


def load_reservoir(path, policy: Optional[InitPolicy] = None) -> Reservoir:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ValueError("not a reservoir snapshot (bad magic)")
    version, capacity, dim = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise ValueError(f"unsupported reservoir snapshot version {version}")
    payload = blob[16:]
    if dim == 0 or len(payload) % (8 * dim):
        raise ValueError("truncated reservoir payload")
    states = np.frombuffer(payload, dtype="<f8").reshape(-1, dim)
    if len(states) > capacity:
        raise ValueError("snapshot holds more states than its capacity")
    res = Reservoir(capacity, dim, policy)
    if len(states):
        res.fill(states.astype(np.float64))
    return res
