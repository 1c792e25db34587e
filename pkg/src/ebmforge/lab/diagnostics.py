"""Mode coverage, mixing rate and the spurious-minima probe."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..energies import EnergyModel
from ..sampling import SamplerConfig, run_chain

__all__ = ["nearest_mode", "mode_coverage", "mixing_rate", "ProbeReport", "spurious_minima_probe"]


def nearest_mode(samples, modes) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    modes = np.atleast_2d(modes)
    flat = samples.reshape(-1, modes.shape[1])
    d2 = ((flat[:, None, :] - modes[None]) ** 2).sum(-1)
    return np.argmin(d2, axis=1).reshape(samples.shape[:-1])


def mode_coverage(samples, modes, radius) -> float:
    """Fraction of modes with at least one sample within ``radius``."""
    samples = np.atleast_2d(samples)
    modes = np.atleast_2d(modes)
    d2 = ((samples[:, None, :] - modes[None]) ** 2).sum(-1)
    return float(np.mean(np.any(d2 <= radius * radius, axis=0)))


def mixing_rate(trajectory, modes) -> float:
    """Nearest-mode membership changes per 1000 steps.

    ``trajectory`` is ``(T, d)`` for one chain or ``(T, n, d)`` for several;
    the rate is averaged over chains.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.shape[0] == 0:
        raise ValueError("empty trajectory")
    if traj.shape[0] == 1:
        return 0.0
    labels = nearest_mode(traj, modes)
    changes = np.sum(labels[1:] != labels[:-1], axis=0)
    return float(np.mean(changes) * 1000.0 / (traj.shape[0] - 1))


@dataclass
class ProbeReport:
    noise_success: float
    data_success: float
    delta: float
    reference_energy: float
    noise_final_energy: np.ndarray
    data_final_energy: np.ndarray
    noise_finals: np.ndarray
    data_finals: np.ndarray


def spurious_minima_probe(model: EnergyModel, noise_inits, data_inits, sampler_config: SamplerConfig,
                          rng, delta: Optional[float] = None, reference: str = "chains") -> ProbeReport:
    """Run the same sampler from noise and from data and compare final energies.

    A chain succeeds when its final energy lies within ``delta`` of the
    reference level. ``reference="chains"`` (default) takes the median final
    energy of the data-initialized chains, i.e. the level that chains started
    on data settle at under this sampler; ``reference="data"`` takes the
    median energy of ``data_inits`` themselves. The default ``delta`` is the
    larger distance from the reference to the 5th or 95th percentile of the
    same energies.
    """
    if reference not in ("chains", "data"):
        raise ValueError("reference must be 'chains' or 'data'")
    data_inits = np.atleast_2d(data_inits)
    noise_finals = run_chain(noise_inits, model, sampler_config, rng).final
    data_finals = run_chain(data_inits, model, sampler_config, rng).final
    en = model.energy(noise_finals)
    ed = model.energy(data_finals)
    base = ed if reference == "chains" else model.energy(data_inits)
    ref = float(np.median(base))
    if delta is None:
        lo, hi = np.percentile(base, [5, 95])
        delta = float(max(ref - lo, hi - ref))

    def ok(e):
        return 1.0 if delta == np.inf else float(np.mean(np.abs(e - ref) <= delta))

    return ProbeReport(ok(en), ok(ed), delta, ref, en, ed, noise_finals, data_finals)
