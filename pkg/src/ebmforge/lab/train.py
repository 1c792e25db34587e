"""Training loop, model/dataset construction and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..diffcore import ParamSet
from ..energies import (CompositeEnergy, Downsample, EnergyModel, GridEnergy, Identity, MlpEnergy,
                        QuadraticEnergy, SpectralState)
from ..objectives import ObjectiveSpec, QuadratureError, QuadratureGrid, SampleBank, compute_gradient, cosine, exact_nll_grad
from ..replay import DataCD, NoiseDist, NoiseReservoir, Persistent, Reservoir, init_reservoir, push_finals
from ..sampling import SamplerConfig, TransitionOp
from .config import ExperimentConfig
from .data import Dataset, load_idx, mixture2d, rings2d, synthetic_digits
from .diagnostics import mode_coverage, nearest_mode
from .metrics import MetricsLog, MetricsRecord, emit_metrics
from .optim import AdamHyper, AdamState, adam_step

log = logging.getLogger(__name__)

__all__ = [
    "TrainingError", "TrainResult", "build_dataset", "build_energy", "build_policy", "build_sampler",
    "build_objective", "train", "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"EBMC"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------- construction

def build_dataset(spec, seed) -> Dataset:
    rng = np.random.default_rng([seed, 1])
    if spec.kind == "mixture2d":
        return mixture2d(spec.modes, spec.radius, spec.std, spec.size, rng)
    if spec.kind == "rings2d":
        return rings2d(tuple(spec.ring_radii), spec.std, spec.size, rng)
    if spec.kind == "synthetic_digits":
        return synthetic_digits(spec.size, rng=rng)
    images = load_idx(spec.path, downsample_to_14=spec.downsample, limit=spec.limit)
    n, h, w = images.shape
    return Dataset(images.reshape(n, h * w), image_shape=(h, w))


def build_energy(spec, dataset: Dataset, seed) -> EnergyModel:
    d = dataset.dim
    if spec.kind == "quadratic":
        mean = np.zeros(d) if spec.init_mean is None else np.asarray(spec.init_mean, dtype=np.float64)
        return QuadraticEnergy(mean)
    if spec.kind == "grid":
        if d > 2:
            raise ValueError("grid energy needs d <= 2")
        values = spec.init_scale * np.random.default_rng([seed, 2]).standard_normal((spec.grid_nodes,) * d)
        return GridEnergy([spec.grid_low] * d, [spec.grid_high] * d, values)
    widths = [d] + list(spec.hidden) + [1]
    base = MlpEnergy(widths, seed=seed, activation=spec.activation, spectral_norm=spec.spectral_norm,
                     image_shape=dataset.image_shape)
    if not spec.scales:
        return base
    if dataset.image_shape is None:
        raise ValueError("multi-scale energies need raster data")
    h, w = dataset.image_shape
    models, transforms = [base], [Identity()]
    for i, f in enumerate(spec.scales):
        t = Downsample((h, w), f)
        models.append(MlpEnergy([t.out_dim(d)] + list(spec.hidden) + [1], seed=seed + 1 + i,
                                activation=spec.activation, spectral_norm=spec.spectral_norm))
        transforms.append(t)
    return CompositeEnergy(models, transforms)


def build_policy(spec, dataset: Dataset):
    if spec.policy == "noise_reservoir":
        return NoiseReservoir(NoiseDist(dataset.dim, spec.noise_low, spec.noise_high), spec.noise_reinit_prob)
    if spec.policy == "true_cd":
        return DataCD(dataset.points, spec.reset_prob)
    return Persistent(dataset.points, spec.reset_to_data_prob, spec.full_reset_every)


def build_transition(spec, dataset: Dataset) -> Optional[TransitionOp]:
    if spec.transition is None:
        return None
    if spec.transition == "gaussian_jitter":
        return TransitionOp.jitter(spec.transition_scale)
    if spec.transition == "mode_jump":
        if dataset.modes is None:
            raise ValueError("mode_jump needs a dataset with known modes")
        return TransitionOp.mode_jump(dataset.modes)
    if dataset.image_shape is None:
        raise ValueError("elastic_deformation needs raster data")
    return TransitionOp.elastic(dataset.image_shape, spec.transition_amplitude, spec.grid_spacing)


def build_sampler(spec, dataset: Dataset) -> SamplerConfig:
    return SamplerConfig(step_size=spec.step_size, noise_std=spec.noise_std, steps=spec.steps,
                         adjusted=spec.adjusted, clamp=None if spec.clamp is None else tuple(spec.clamp),
                         transition=None if spec.augment_inits else build_transition(spec, dataset),
                         period=spec.period)


def build_grid(spec, dim) -> Optional[QuadratureGrid]:
    if spec.grid_low is None or spec.grid_high is None or dim > 2:
        return None
    return QuadratureGrid(spec.grid_low, spec.grid_high, spec.grid_nodes)


def build_objective(spec, dim) -> ObjectiveSpec:
    return ObjectiveSpec(spec.variant, spec.kl_sign, spec.kl_weight, spec.k_backprop,
                         spec.entropy_bank_size, build_grid(spec, dim))


# ------------------------------------------------------------- model state

def _mlps(model):
    if isinstance(model, CompositeEnergy):
        for m in model.models:
            yield from _mlps(m)
    elif isinstance(model, MlpEnergy):
        yield model


def _spectral_arrays(model):
    out = []
    for i, m in enumerate(_mlps(model)):
        for k, st in (m.spectral or {}).items():
            out += [(f"spectral.{i}.{k}.u", st.u), (f"spectral.{i}.{k}.v", st.v)]
    return out


def _set_spectral(model, arrays):
    for i, m in enumerate(_mlps(model)):
        if m.spectral:
            m.spectral = {k: SpectralState(arrays[f"spectral.{i}.{k}.u"], arrays[f"spectral.{i}.{k}.v"])
                          for k in m.spectral}


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: EnergyModel
    metrics: MetricsLog
    reservoir: Optional[Reservoir]
    bank: Optional[SampleBank]
    adam: AdamState
    rng: np.random.Generator
    step: int
    dataset: Dataset
    config: ExperimentConfig


def _setup(config: ExperimentConfig) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    dataset = build_dataset(config.dataset, config.seed)
    model = build_energy(config.energy, dataset, config.seed)
    reservoir = bank = None
    if config.objective.variant != "exact_nll":
        reservoir = init_reservoir(build_policy(config.replay, dataset), config.replay.capacity, rng)
    if config.objective.variant == "cd_kl":
        bank = SampleBank(config.objective.entropy_bank_size, dataset.dim)
    return TrainResult(model, MetricsLog(), reservoir, bank, AdamState.zeros(model.params), rng, 0,
                       dataset, config)


def _record(step, est, info, model, data, dataset, grid, config, t0):
    norms = est.norms()
    rec = MetricsRecord(step=step, grad_norm_positive=norms["positive"], grad_norm_negative=norms["negative"],
                        grad_norm_total=norms["total"], grad_norm_clipped=info["clipped_norm"],
                        grad_norm_kl_entropy=norms.get("kl_entropy"), grad_norm_kl_opt=norms.get("kl_opt"))
    rec.mean_data_energy = float(np.mean(model.energy(data)))
    if est.samples is not None:
        rec.mean_sample_energy = float(np.mean(model.energy(est.samples)))
        if dataset.modes is not None:
            radius = 3 * dataset.mode_std if dataset.mode_std else np.inf
            rec.mode_coverage = mode_coverage(est.samples, dataset.modes, radius)
            moved = nearest_mode(est.inits, dataset.modes) != nearest_mode(est.samples, dataset.modes)
            rec.mode_transition_rate = float(np.mean(moved)) * 1000.0 / max(config.sampler.steps, 1)
    if grid is not None and est.variant != "exact_nll":
        try:
            rec.oracle_cosine = cosine(est.total, exact_nll_grad(model, data, grid))
        except QuadratureError:
            rec.oracle_cosine = None        # model mass leaks out of the box; no oracle
    rec.wall_time = time.perf_counter() - t0
    for name in ("mean_data_energy", "mean_sample_energy"):
        v = getattr(rec, name)
        if v is not None and not math.isfinite(v):
            raise TrainingError(f"non-finite {name.replace('_', ' ')} at step {step}: "
                                f"grad norms {norms}; lower the sampler step size or learning rate")
    return rec


def train(config: ExperimentConfig, resume: Optional[str] = None) -> TrainResult:
    """Run ``config.steps`` optimizer steps (continuing from ``resume`` if given).

    Each step: data batch -> reservoir inits -> chains -> gradient -> Adam ->
    push finals. With ``output_dir`` set, metrics and a final checkpoint are
    written there, plus a checkpoint every ``checkpoint_every`` steps.
    """
    config.validate()
    state = load_checkpoint(resume, config) if resume else _setup(config)
    spec = build_objective(config.objective, state.dataset.dim)
    sampler = build_sampler(config.sampler, state.dataset)
    init_op = build_transition(config.sampler, state.dataset) if config.sampler.augment_inits else None
    hyper = AdamHyper(**vars(config.optimizer))
    oracle_grid = spec.grid if spec.variant != "exact_nll" else None
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
    t0 = time.perf_counter()
    rng, model = state.rng, state.model
    for step in range(state.step, config.steps):
        data = state.dataset.batch(config.batch_size, rng)
        est = compute_gradient(spec, model, data, state.reservoir, sampler, rng, bank=state.bank,
                               init_transition=init_op)
        params, state.adam, info = adam_step(model.params, est.total, state.adam, hyper)
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            state.metrics.append(_record(step + 1, est, info, model, data, state.dataset,
                                         oracle_grid, config, t0))
        model = model.with_params(params)
        model.refresh(rng)
        if est.samples is not None:
            push_finals(state.reservoir, est.samples, rng)
        state.model, state.step = model, step + 1
        if config.output_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(config.output_dir, f"checkpoint_{state.step:07d}.ebmc"))
    if config.output_dir:
        save_checkpoint(state, os.path.join(config.output_dir, "checkpoint.ebmc"))
        if len(state.metrics):
            emit_metrics(state.metrics, os.path.join(config.output_dir, f"metrics.{config.metrics_format}"),
                         config.metrics_format)
    return state


# --------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainResult, path) -> None:
    """Binary checkpoint: b"EBMC", u32 version, u32 header length (little-endian),
    a JSON header, then every array as little-endian f64 in header order."""
    arrays = [(f"param.{k}", v) for k, v in state.model.params.items()]
    arrays += [(f"adam.m.{k}", v) for k, v in state.adam.m.items()]
    arrays += [(f"adam.v.{k}", v) for k, v in state.adam.v.items()]
    arrays += _spectral_arrays(state.model)
    if state.reservoir is not None:
        arrays.append(("reservoir", state.reservoir.states()))
    if state.bank is not None:
        arrays.append(("bank", state.bank.states().reshape(-1, state.bank.dim)))
    header = {
        "step": state.step,
        "config": state.config.to_dict(),
        "rng": state.rng.bit_generator.state,
        "adam_t": state.adam.t,
        "reservoir_pushes": state.reservoir.pushes if state.reservoir is not None else None,
        "bank_pushes": state.bank.pushes if state.bank is not None else None,
        "metrics": [vars(r) for r in state.metrics],
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    blob = json.dumps(header).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, config: Optional[ExperimentConfig] = None) -> TrainResult:
    """Restore a training state. A ``config`` passed for resuming may differ
    from the saved one only in ``steps`` and ``output_dir``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    saved = ExperimentConfig.from_dict(header["config"])
    if config is None:
        config = saved
    elif replace(config, steps=0, output_dir=None) != replace(saved, steps=0, output_dir=None):
        raise ValueError("resume config differs from the checkpointed one beyond steps/output_dir")
    arrays, off = {}, 12 + hlen
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(blob):
            raise ValueError("truncated checkpoint payload")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n

    state = _setup(replace(config))
    names = list(state.model.params)
    model = state.model.with_params(ParamSet((k, arrays[f"param.{k}"]) for k in names))
    _set_spectral(model, arrays)
    state.model = model
    state.adam = AdamState(ParamSet((k, arrays[f"adam.m.{k}"]) for k in names),
                           ParamSet((k, arrays[f"adam.v.{k}"]) for k in names), header["adam_t"])
    if state.reservoir is not None:
        state.reservoir.fill(arrays["reservoir"])
        state.reservoir.pushes = header["reservoir_pushes"]
    if state.bank is not None:
        if len(arrays["bank"]):
            state.bank.fill(arrays["bank"])
        state.bank.pushes = header["bank_pushes"]
    state.rng.bit_generator.state = header["rng"]
    state.metrics = MetricsLog(MetricsRecord(**r) for r in header["metrics"])
    state.step = header["step"]
    return state
