"""Langevin / MALA chains, augmentation transitions, and differentiable chain tails.

All step functions work on a batch of rows ``(n, d)``; every row is an
independent chain driven by the same generator. ``run_chains`` gives each
chain its own generator when per-chain reproducibility is needed.

The update is ``x' = x - (step_size / 2) * grad_x E(x) + noise_std * xi``.
``noise_std`` is an independent knob; ``SamplerConfig.theoretical`` ties it
to ``sqrt(step_size)``, the only coupling under which the unadjusted chain
approximates the model density as the step shrinks. Large steps with tiny
noise (e.g. 10 and 0.005) are not a valid MCMC approximation.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .energies import EnergyModel

__all__ = [
    "SamplingError", "TransitionOp", "SamplerConfig", "Chain", "ChainStats", "ChainResult",
    "DiffChainResult", "langevin_step", "mala_step", "mala_log_accept", "run_chain",
    "run_chains", "run_chain_differentiable", "apply_transition", "ou_stationary_variance",
]


class SamplingError(RuntimeError):
    pass


@dataclass
class TransitionOp:
    """A jump applied to chain states every ``period`` steps.

    kinds: ``gaussian_jitter`` (``scale``), ``elastic_deformation``
    (``image_shape``, ``grid_spacing``, ``amplitude`` in pixels) and
    ``mode_jump`` (``modes``): translate the state from its nearest mode to a
    uniformly drawn mode. ``mode_jump`` is a low-dimensional stand-in for
    semantic image augmentations.
    """

    kind: str
    scale: float = 0.0
    image_shape: Optional[tuple] = None
    grid_spacing: int = 4
    amplitude: float = 0.0
    modes: Optional[np.ndarray] = None

    KINDS = ("gaussian_jitter", "elastic_deformation", "mode_jump")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown transition kind '{self.kind}'")
        if self.image_shape is not None:
            self.image_shape = tuple(int(v) for v in self.image_shape)
        if self.modes is not None:
            self.modes = np.atleast_2d(np.asarray(self.modes, dtype=np.float64))
        if self.kind == "mode_jump" and self.modes is None:
            raise ValueError("mode_jump needs modes")
        if self.kind == "elastic_deformation" and self.image_shape is None:
            raise ValueError("elastic_deformation needs image_shape")

    @classmethod
    def jitter(cls, scale):
        return cls("gaussian_jitter", scale=scale)

    @classmethod
    def elastic(cls, image_shape, amplitude, grid_spacing=4):
        return cls("elastic_deformation", image_shape=image_shape, amplitude=amplitude,
                   grid_spacing=grid_spacing)

    @classmethod
    def mode_jump(cls, modes):
        return cls("mode_jump", modes=modes)

    def to_dict(self):
        d = asdict(self)
        d["modes"] = None if self.modes is None else self.modes.tolist()
        d["image_shape"] = None if self.image_shape is None else list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SamplerConfig:
    step_size: float
    noise_std: Optional[float] = None       # None -> sqrt(step_size)
    steps: int = 60
    adjusted: bool = False
    clamp: Optional[tuple] = None          # (low, high), scalars or per-dimension
    transition: Optional[TransitionOp] = None
    period: int = 100

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.clamp is not None:
            self.clamp = tuple(self.clamp)

    @classmethod
    def theoretical(cls, step_size, steps, **kw):
        return cls(step_size=step_size, noise_std=math.sqrt(step_size), steps=steps, **kw)

    @property
    def noise(self) -> float:
        return math.sqrt(self.step_size) if self.noise_std is None else float(self.noise_std)


@dataclass
class Chain:
    """One chain with its own random stream."""

    state: np.ndarray
    seed: int
    age: int = 0
    accept_count: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        self.state = np.array(self.state, dtype=np.float64)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def acceptance_rate(self):
        return self.accept_count / self.age if self.age else float("nan")


@dataclass
class ChainStats:
    mean_energy: float
    acceptance_rate: float
    energy_trace: Optional[np.ndarray] = None


@dataclass
class ChainResult:
    final: np.ndarray
    trajectory: Optional[np.ndarray]
    stats: ChainStats


def _clamp(x, clamp):
    if clamp is None:
        return x
    return np.clip(x, clamp[0], clamp[1])


def _energy_grad(model, x):
    e, g = model.energy_and_grad_x(x)
    if not np.all(np.isfinite(g)):
        bad = int(np.argmax(~np.all(np.isfinite(g), axis=-1)))
        raise SamplingError(f"non-finite grad_x E at row {bad}: energy={np.ravel(e)[bad]!r}, "
                            f"position={x[bad]!r}")
    return e, g


def langevin_step(x, model: EnergyModel, step_size, noise_std, rng, clamp=None, noise=None):
    """One unadjusted Langevin step. ``noise`` overrides the standard-normal draw."""
    if not step_size > 0 or noise_std < 0:
        raise ValueError("need step_size > 0 and noise_std >= 0")
    x = np.asarray(x, dtype=np.float64)
    _, g = _energy_grad(model, x)
    xi = rng.standard_normal(x.shape) if noise is None else noise
    return _clamp(x - 0.5 * step_size * g + noise_std * xi, clamp)


def mala_log_accept(x, y, model, step_size, ex=None, gx=None, ey=None, gy=None):
    """Log Metropolis-Hastings ratio for moving each row of ``x`` to ``y``."""
    if ex is None:
        ex, gx = _energy_grad(model, x)
    if ey is None:
        ey, gy = _energy_grad(model, y)
    fwd = y - x + 0.5 * step_size * gx
    bwd = x - y + 0.5 * step_size * gy
    log_q_fwd = -np.sum(fwd * fwd, axis=-1) / (2 * step_size)
    log_q_bwd = -np.sum(bwd * bwd, axis=-1) / (2 * step_size)
    return (-ey + log_q_bwd) - (-ex + log_q_fwd)


def mala_step(x, model: EnergyModel, step_size, rng, noise=None, _cache=None):
    """One MALA step on each row; proposal noise std is sqrt(step_size).

    Returns ``(x_new, accepted)`` with a boolean mask per row.
    """
    if not step_size > 0:
        raise ValueError("step_size must be > 0")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None] if single else x
    ex, gx = _cache if _cache is not None else _energy_grad(model, x2)
    xi = rng.standard_normal(x2.shape) if noise is None else np.reshape(noise, x2.shape)
    y = x2 - 0.5 * step_size * gx + math.sqrt(step_size) * xi
    ey, gy = _energy_grad(model, y)
    log_a = mala_log_accept(x2, y, model, step_size, ex, gx, ey, gy)
    if not np.all(np.isfinite(log_a) | (log_a == -np.inf)):
        raise SamplingError("non-finite MALA acceptance ratio")
    u = rng.random(x2.shape[0])
    acc = np.log(u) < log_a
    new = np.where(acc[:, None], y, x2)
    new_e = np.where(acc, ey, ex)
    new_g = np.where(acc[:, None], gy, gx)
    if _cache is not None:
        return new, acc, (new_e, new_g)
    return (new[0], acc[0]) if single else (new, acc)


def ou_stationary_variance(step_size, noise_std, curvature=1.0):
    """Exact stationary variance of the unadjusted chain on E = curvature * x^2 / 2."""
    a = 1.0 - 0.5 * step_size * curvature
    if abs(a) >= 1:
        return float("inf")
    return noise_std ** 2 / (1.0 - a * a)


# --------------------------------------------------------------- transitions

def _elastic_field(h, w, spacing, amplitude, rng):
    gh = int(math.ceil((h - 1) / spacing)) + 1
    gw = int(math.ceil((w - 1) / spacing)) + 1
    coarse = amplitude * rng.standard_normal((2, gh, gw))
    ys = np.arange(h) / spacing
    xs = np.arange(w) / spacing
    y0 = np.minimum(np.floor(ys).astype(int), gh - 2) if gh > 1 else np.zeros(h, int)
    x0 = np.minimum(np.floor(xs).astype(int), gw - 2) if gw > 1 else np.zeros(w, int)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    c = coarse
    return ((1 - ty) * (1 - tx) * c[:, y0][:, :, x0] + (1 - ty) * tx * c[:, y0][:, :, x1]
            + ty * (1 - tx) * c[:, y1][:, :, x0] + ty * tx * c[:, y1][:, :, x1])


def _splat(img, disp):
    """Push each pixel's mass to its displaced position with bilinear weights."""
    h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ty = np.clip(yy + disp[0], 0, h - 1)
    tx = np.clip(xx + disp[1], 0, w - 1)
    y0 = np.minimum(np.floor(ty).astype(int), h - 2)
    x0 = np.minimum(np.floor(tx).astype(int), w - 2)
    fy, fx = ty - y0, tx - x0
    out = np.zeros_like(img)
    np.add.at(out, (y0, x0), img * (1 - fy) * (1 - fx))
    np.add.at(out, (y0, x0 + 1), img * (1 - fy) * fx)
    np.add.at(out, (y0 + 1, x0), img * fy * (1 - fx))
    np.add.at(out, (y0 + 1, x0 + 1), img * fy * fx)
    return out


def apply_transition(x, op: TransitionOp, rng):
    """Apply ``op`` independently to each row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if op.kind == "gaussian_jitter":
        out = x2 + op.scale * rng.standard_normal(x2.shape)
    elif op.kind == "mode_jump":
        modes = op.modes
        if modes.shape[1] != x2.shape[1]:
            raise ValueError(f"mode_jump: modes have dimension {modes.shape[1]}, state {x2.shape[1]}")
        near = np.argmin(((x2[:, None, :] - modes[None]) ** 2).sum(-1), axis=1)
        target = rng.integers(len(modes), size=len(x2))
        out = x2 - modes[near] + modes[target]
    else:
        h, w = op.image_shape
        if x2.shape[1] != h * w or h < 2 or w < 2:
            raise ValueError(f"elastic_deformation: layout {op.image_shape} does not match dimension {x2.shape[1]}")
        out = np.empty_like(x2)
        for i, row in enumerate(x2):
            disp = _elastic_field(h, w, op.grid_spacing, op.amplitude, rng)
            out[i] = _splat(row.reshape(h, w), disp).ravel()
    return out[0] if single else out


# -------------------------------------------------------------------- chains

def run_chain(init, model: EnergyModel, config: SamplerConfig, rng, trace=False, energy_trace=False):
    """Run ``config.steps`` steps from ``init`` (one row or a batch)."""
    x = np.array(init, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    n = x.shape[0]
    traj = [x.copy()] if trace else None
    etrace = []
    accepted = 0
    cache = None
    lam, sig = config.step_size, config.noise
    for s in range(1, config.steps + 1):
        if config.adjusted:
            if cache is None:
                cache = _energy_grad(model, x)
            x, acc, cache = mala_step(x, model, lam, rng, _cache=cache)
            accepted += int(acc.sum())
            if config.clamp is not None:
                clamped = _clamp(x, config.clamp)
                if not np.array_equal(clamped, x):
                    x, cache = clamped, None
        else:
            x = langevin_step(x, model, lam, sig, rng, clamp=config.clamp)
        if config.transition is not None and s % config.period == 0:
            x = _clamp(apply_transition(x, config.transition, rng), config.clamp)
            cache = None
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"chain state became non-finite at step {s}")
        if trace:
            traj.append(x.copy())
        if energy_trace:
            etrace.append(cache[0].copy() if cache is not None else model.energy(x))
    final_e = cache[0] if cache is not None else model.energy(x)
    stats = ChainStats(
        mean_energy=float(np.mean(final_e)),
        acceptance_rate=accepted / (n * config.steps) if config.adjusted and config.steps else float("nan"),
        energy_trace=np.array(etrace) if energy_trace else None,
    )
    trajectory = None
    if trace:
        trajectory = np.stack(traj)
        if single:
            trajectory = trajectory[:, 0]
    return ChainResult(x[0] if single else x, trajectory, stats)


def _advance(chain: Chain, model, config: SamplerConfig):
    res = run_chain(chain.state, model, config, chain.rng)
    chain.state = res.final
    chain.age += config.steps
    if config.adjusted:
        chain.accept_count += int(round(res.stats.acceptance_rate * config.steps))
    return chain


def run_chains(inits, model, config: SamplerConfig, seeds, workers: int = 1):
    """Run one independent chain per row of ``inits``, each with its own seed.

    Results are ordered by chain index and do not depend on ``workers``.
    """
    chains = [Chain(state=row, seed=int(s)) for row, s in zip(np.atleast_2d(inits), seeds)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda c: _advance(c, model, config), chains))
    else:
        for c in chains:
            _advance(c, model, config)
    return chains


@dataclass
class DiffChainResult:
    final: Node                     # on the tape when k_backprop > 0
    theta: dict                     # parameter leaves the tail was built against
    prefix: np.ndarray              # state entering the recorded tail
    noises: list                    # standard-normal draws used on the tail
    accepts: list
    jumps: dict = field(default_factory=dict)   # tail step -> transition displacement


def run_chain_differentiable(init, model: EnergyModel, config: SamplerConfig, k_backprop: int, rng,
                             theta=None, max_tape_elements: int = 5_000_000,
                             prefix=None, noises=None, accepts=None, jumps=None):
    """Run the chain with its last ``k_backprop`` steps recorded on the tape.

    Noise on the tail is drawn once and held constant, so d(final)/d(theta)
    is well defined and includes the path through grad_x E (second order).
    Earlier steps are plain numpy and carry no gradient.

    Passing ``prefix``/``noises``/``accepts``/``jumps`` from an earlier result replays
    the tail with the same randomness (used by finite-difference oracles).
    """
    if k_backprop < 0 or k_backprop > config.steps:
        raise ValueError("need 0 <= k_backprop <= steps")
    x0 = np.atleast_2d(np.array(init, dtype=np.float64))
    if k_backprop * x0.size > max_tape_elements:
        raise SamplingError(f"tape guard: k_backprop * state size = {k_backprop * x0.size} "
                            f"exceeds {max_tape_elements}")
    if theta is None:
        theta = model.params.leaves()
    lam, sig = config.step_size, config.noise
    head = config.steps - k_backprop
    if prefix is None:
        if head:
            x0 = run_chain(x0, model, replace(config, steps=head), rng).final
        prefix = x0
        replay = False
    else:
        replay = True
    noises = list(noises) if replay else []
    accepts = list(accepts) if replay else []
    jumps = dict(jumps or {}) if replay else {}
    x = dc.constant(prefix)
    for j in range(k_backprop):
        s = head + j + 1
        xin = x if x.requires_grad else dc.leaf(x.value)
        e = model.build(xin, theta)
        g = dc.gradient(dc.sum(e), xin, create_graph=True)
        if not replay:
            noises.append(rng.standard_normal(prefix.shape))
        xi = noises[j]
        y = xin - (0.5 * lam) * g + (sig if not config.adjusted else math.sqrt(lam)) * xi
        if config.adjusted:
            if not replay:
                log_a = mala_log_accept(xin.value, y.value, model.with_params(
                    dc.ParamSet((k, v.value) for k, v in theta.items())), lam)
                accepts.append(np.log(rng.random(prefix.shape[0])) < log_a)
            m = accepts[j].astype(np.float64)[:, None]
            y = y * m + xin * (1.0 - m)
        if config.clamp is not None:
            lo, hi = config.clamp
            clipped = np.clip(y.value, lo, hi)
            keep = (clipped == y.value).astype(np.float64)
            y = y * keep + clipped * (1.0 - keep)
        if config.transition is not None and s % config.period == 0:
            # the jump is a constant displacement; the path derivative passes straight through
            if not replay:
                jumped = _clamp(apply_transition(y.value, config.transition, rng), config.clamp)
                jumps[j] = jumped - y.value
            y = y + jumps[j]
        x = y
    return DiffChainResult(final=x, theta=theta, prefix=prefix, noises=noises, accepts=accepts,
                           jumps=jumps)
