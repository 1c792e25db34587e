"""Desk-scale experiment presets.

``spurious_minima_config`` / ``spurious_minima_study``
    Data-started reservoir (true CD) versus noise-started reservoir (maximum
    likelihood) on an 8-mode ring. The energy is a tabulated grid: each node
    only affects its own cells, so regions the chains never visit keep their
    initial values, much as far-from-data regions of a high-dimensional
    network are unconstrained by training near the data.

``mixing_config`` / ``test_time_mixing``
    Mode-jump transitions (a teleport among the known mixture modes, standing
    in for data-augmentation transitions) at train time, applied to every init
    drawn from the reservoir, and at test time, every ``period`` steps.

``mnist_config`` / ``digits_config``
    Raster settings in the practical sampling regime (large step, tiny
    noise). That regime is not a valid MCMC approximation; it is what the
    raster experiments use.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..sampling import SamplerConfig, TransitionOp, run_chain
from .config import ExperimentConfig, apply_overrides
from .diagnostics import ProbeReport, mixing_rate, mode_coverage, spurious_minima_probe
from .train import TrainResult, train

__all__ = [
    "BOX", "spurious_minima_config", "probe_sampler", "StudyResult", "spurious_minima_study",
    "mixing_config", "test_time_mixing", "mnist_config", "digits_config", "PRESETS",
]

BOX = 9.0          # half-width of the sampling box around the radius-4 ring


def spurious_minima_config(policy: str, seed: int = 0, steps: int = 5000) -> ExperimentConfig:
    """Identical budgets for both init policies; only ``replay.policy`` differs.

    The learning rate is above the 1e-4 default: grid node values are raw
    energies and need to move by tens of nats within the budget.
    """
    nodes = int(round(2 * BOX / 0.5)) + 1
    return apply_overrides(ExperimentConfig(), [
        f"replay.policy={policy}", f"seed={seed}", f"steps={steps}", "batch_size=64",
        "dataset.kind=mixture2d", "dataset.modes=8", "dataset.radius=4.0", "dataset.std=0.25",
        "energy.kind=grid", f"energy.grid_nodes={nodes}", f"energy.grid_low={-BOX}", f"energy.grid_high={BOX}",
        f"replay.noise_low={-BOX}", f"replay.noise_high={BOX}",
        "sampler.step_size=0.01", "sampler.steps=20", f"sampler.clamp=[{-BOX},{BOX}]",
        "optimizer.lr=0.01", "log_every=250",
    ])


def probe_sampler(steps: int = 5000) -> SamplerConfig:
    """Long, low-temperature test chains (sigma^2 / step = 0.2)."""
    return SamplerConfig(step_size=0.05, noise_std=0.1, steps=steps, clamp=(-BOX, BOX))


@dataclass
class StudyResult:
    policy: str
    seed: int
    probe: ProbeReport
    coverage: float            # mode coverage of the noise-initialized finals
    result: TrainResult


def spurious_minima_study(policy: str, seed: int = 0, steps: int = 5000, n_probe: int = 500,
                          probe_steps: int = 5000) -> StudyResult:
    res = train(spurious_minima_config(policy, seed, steps))
    rng = np.random.default_rng([seed, 7])
    noise = rng.uniform(-BOX, BOX, size=(n_probe, 2))
    data = res.dataset.batch(n_probe, rng)
    report = spurious_minima_probe(res.model, noise, data, probe_sampler(probe_steps), rng)
    cov = mode_coverage(report.noise_finals, res.dataset.modes, 3 * res.dataset.mode_std)
    return StudyResult(policy, seed, report, cov, res)


def mixing_config(seed: int = 0, augment: bool = False, steps: int = 300) -> ExperimentConfig:
    """Short noise-reservoir run; ``augment`` mode-jumps every init drawn."""
    base = spurious_minima_config("noise_reservoir", seed, steps)
    return apply_overrides(base, ["batch_size=32", "replay.capacity=2000", "log_every=10",
                                  "sampler.transition=mode_jump", f"sampler.augment_inits={str(augment).lower()}"])


def test_time_mixing(model, modes, inits, seeds, steps: int = 10000, period: int = 100,
                     step_size: float = 0.01, clamp=(-BOX, BOX)):
    """Per-chain mixing rates without and with mode-jump transitions.

    Chain ``i`` uses ``seeds[i]`` in both conditions (paired comparison).
    Returns two arrays of transitions per 1000 steps.
    """
    plain_cfg = SamplerConfig.theoretical(step_size, steps, clamp=clamp)
    jump_cfg = SamplerConfig.theoretical(step_size, steps, clamp=clamp,
                                         transition=TransitionOp.mode_jump(modes), period=period)
    plain, jump = [], []
    for x0, s in zip(np.atleast_2d(inits), seeds):
        for cfg, out in ((plain_cfg, plain), (jump_cfg, jump)):
            traj = run_chain(x0, model, cfg, np.random.default_rng(int(s)), trace=True).trajectory
            out.append(mixing_rate(traj, modes))
    return np.array(plain), np.array(jump)


def mnist_config(path: str, downsample: bool = True, seed: Optional[int] = None) -> ExperimentConfig:
    """Raster run on an IDX image file: 60-step chains, step 10, noise 0.005,
    elastic warps of every init drawn from the reservoir."""
    over = ["dataset.kind=idx_file", f"dataset.path={path}", f"dataset.downsample={str(downsample).lower()}",
            "energy.kind=mlp", "energy.hidden=[256,128]", "energy.spectral_norm=true",
            "sampler.step_size=10.0", "sampler.noise_std=0.005", "sampler.steps=60", "sampler.clamp=[0.0,1.0]",
            "sampler.transition=elastic_deformation", "sampler.transition_amplitude=0.5",
            "sampler.augment_inits=true", "replay.noise_low=0.0", "replay.noise_high=1.0",
            "replay.capacity=10000", "replay.noise_reinit_prob=0.01", "steps=20000", "batch_size=64"]
    if seed is not None:
        over.append(f"seed={seed}")
    return apply_overrides(ExperimentConfig(), over)


def digits_config(seed: Optional[int] = None) -> ExperimentConfig:
    over = ["dataset.kind=synthetic_digits", "dataset.size=5000", "energy.hidden=[64,64]",
            "sampler.step_size=10.0", "sampler.noise_std=0.005", "sampler.steps=60", "sampler.clamp=[0.0,1.0]",
            "sampler.transition=elastic_deformation", "sampler.grid_spacing=4", "sampler.transition_amplitude=0.5",
            "sampler.augment_inits=true", "replay.noise_low=0.0", "replay.noise_high=1.0",
            "steps=2000", "batch_size=64"]
    if seed is not None:
        over.append(f"seed={seed}")
    return apply_overrides(ExperimentConfig(), over)


PRESETS = {
    "true_cd_mixture": lambda seed=0: spurious_minima_config("true_cd", seed),
    "noise_reservoir_mixture": lambda seed=0: spurious_minima_config("noise_reservoir", seed),
    "augmented_mixture": lambda seed=0: mixing_config(seed, augment=True),
    "digits": lambda seed=0: digits_config(seed),
}
