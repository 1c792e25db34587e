"""Energy functions E_theta(x) built on the diffcore tape.

States are always flat float64 rows: a batch is ``(n, d)``. Raster models
know their ``(h, w)`` layout and reshape internally. ``build`` returns the
per-row energies ``(n,)``; convenience methods wrap it for numpy callers.
"""
from __future__ import annotations

import copy
import csv
import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamSet

__all__ = [
    "EnergyModel", "QuadraticEnergy", "MixtureEnergy", "GridEnergy", "MlpEnergy",
    "CompositeEnergy", "Identity", "Downsample", "compose", "downsample",
    "spectral_normalize", "SpectralState", "dump_energy_grid",
]


class EnergyModel:
    """Base class: subclasses set ``params`` and ``dim`` and implement ``build``."""

    params: ParamSet
    dim: int

    def build(self, x: Node, theta: Mapping[str, Node]) -> Node:
        raise NotImplementedError

    # ---- numpy conveniences

    def _rows(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.dim:
            raise ValueError(f"{type(self).__name__}: expected dimension {self.dim}, got shape {x.shape}")
        return x2, single

    def energy(self, x):
        x2, single = self._rows(x)
        with dc.no_grad():
            e = self.build(dc.constant(x2), self.params.constants()).value
        return float(e[0]) if single else np.array(e)

    def energy_and_grad_x(self, x):
        x2, single = self._rows(x)
        xl = dc.leaf(x2)
        e = self.build(xl, self.params.constants())
        g = dc.gradient(dc.sum(e), xl).value
        if single:
            return float(e.value[0]), g[0]
        return np.array(e.value), g

    def grad_x(self, x):
        return self.energy_and_grad_x(x)[1]

    def grad_theta(self, x) -> ParamSet:
        """Mean over rows of grad_theta E(x)."""
        x2, _ = self._rows(x)
        theta = self.params.leaves()
        loss = dc.mean(self.build(dc.constant(x2), theta))
        return ParamSet((k, v.value) for k, v in dc.gradient(loss, theta).items())

    def with_params(self, params: ParamSet) -> "EnergyModel":
        if list(params) != list(self.params):
            raise ValueError("parameter names do not match the model")
        out = copy.copy(self)
        out.params = ParamSet(params)
        return out

    def refresh(self, rng=None) -> None:
        """Hook for per-step state updates (spectral-norm power iteration)."""


class QuadraticEnergy(EnergyModel):
    """E(x) = 0.5 (x - mean)^T P (x - mean) + offset, with ``mean`` learnable."""

    def __init__(self, mean, precision=None, offset=0.0):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.dim = mean.size
        P = np.eye(self.dim) if precision is None else np.atleast_2d(np.asarray(precision, dtype=np.float64))
        if P.shape != (self.dim, self.dim) or not np.allclose(P, P.T):
            raise ValueError("precision must be a symmetric (d, d) matrix")
        if np.min(np.linalg.eigvalsh(P)) <= 0:
            raise ValueError("precision must be positive definite")
        self.precision = P
        self.offset = float(offset)
        self.params = ParamSet({"mean": mean})

    @property
    def covariance(self):
        return np.linalg.inv(self.precision)

    def log_partition(self) -> float:
        _, logdet = np.linalg.slogdet(self.precision)
        return 0.5 * self.dim * np.log(2 * np.pi) - 0.5 * logdet - self.offset

    def build(self, x, theta):
        diff = x - dc.reshape(theta["mean"], (1, self.dim))
        quad = dc.sum(diff * (diff @ self.precision), axis=1)
        e = 0.5 * quad
        return e + self.offset if self.offset else e


class MixtureEnergy(EnergyModel):
    """E(x) = -log sum_k w_k N(x; mu_k, s_k^2 I); normalized, so log Z = 0."""

    def __init__(self, weights, means, variances):
        w = np.asarray(weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        var = np.broadcast_to(np.asarray(variances, dtype=np.float64), w.shape).copy()
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if means.shape[0] != w.size or np.any(var <= 0):
            raise ValueError("need one mean and one positive variance per component")
        self.dim = means.shape[1]
        self.variances = var
        self.log_weights = np.log(w)
        self.params = ParamSet({"means": means})

    @property
    def modes(self):
        return self.params["means"]

    @classmethod
    def ring(cls, k=8, radius=4.0, std=0.25):
        ang = 2 * np.pi * np.arange(k) / k
        means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return cls(np.full(k, 1.0 / k), means, np.full(k, std ** 2))

    def build(self, x, theta):
        mu = theta["means"]                                   # (K, d)
        sq = dc.sum(dc.square(dc.reshape(x, (x.shape[0], 1, self.dim))
                              - dc.reshape(mu, (1,) + mu.shape)), axis=2)   # (n, K)
        logc = self.log_weights - 0.5 * self.dim * np.log(2 * np.pi * self.variances)
        return -dc.logsumexp(sq * (-0.5 / self.variances) + logc, axis=1)

    def sample(self, n, rng):
        k = rng.choice(self.log_weights.size, size=n, p=np.exp(self.log_weights))
        sd = np.sqrt(self.variances[k])[:, None]
        return self.modes[k] + sd * rng.standard_normal((n, self.dim))


class GridEnergy(EnergyModel):
    """Multilinear interpolation of tabulated node energies on a box (d = 1 or 2).

    The node values are the parameters. Outside the box the energy is the
    interpolant at the nearest box point plus ``0.5 * wall * dist**2``, so the
    density is confined to the box for all practical purposes.
    """

    def __init__(self, low, high, values, wall=1e8):
        self.low = np.atleast_1d(np.asarray(low, dtype=np.float64))
        self.high = np.atleast_1d(np.asarray(high, dtype=np.float64))
        values = np.asarray(values, dtype=np.float64)
        self.dim = self.low.size
        if self.dim not in (1, 2) or values.ndim != self.dim or np.any(np.array(values.shape) < 2):
            raise ValueError("GridEnergy supports d in {1, 2} with >= 2 nodes per axis")
        if np.any(self.high <= self.low):
            raise ValueError("empty box")
        self.resolution = values.shape
        self.wall = float(wall)
        self.params = ParamSet({"values": values})

    @property
    def spacing(self):
        return (self.high - self.low) / (np.array(self.resolution) - 1)

    def node_coords(self):
        axes = [np.linspace(self.low[i], self.high[i], self.resolution[i]) for i in range(self.dim)]
        return axes

    def build(self, x, theta):
        xv = x.value
        n = xv.shape[0]
        clipped = np.clip(xv, self.low, self.high)
        outside = clipped != xv
        # position inside the box; constant where clipped so the wall takes over
        inside_mask = (~outside).astype(np.float64)
        pos = x * inside_mask + clipped * (1.0 - inside_mask)
        u = (pos - self.low) / self.spacing                  # fractional node coordinate
        cell = np.minimum(np.floor(u.value), np.array(self.resolution) - 2).astype(int)
        cell = np.maximum(cell, 0)
        frac = u - cell.astype(np.float64)                   # (n, d)
        flat_values = dc.reshape(theta["values"], (int(np.prod(self.resolution)),))
        strides = np.array([int(np.prod(self.resolution[i + 1:])) for i in range(self.dim)])
        cols = dc.transpose(frac)
        hi = [dc.gather(cols, ax) for ax in range(self.dim)]   # (n,) per axis
        lo = [1.0 - f for f in hi]
        total = None
        for corner in itertools.product((0, 1), repeat=self.dim):
            corner = np.array(corner)
            idx = (cell + corner) @ strides
            weight = None
            for ax in range(self.dim):
                w = hi[ax] if corner[ax] else lo[ax]
                weight = w if weight is None else weight * w
            term = weight * dc.gather(flat_values, idx)
            total = term if total is None else total + term
        if np.any(outside):
            excess = x - clipped
            total = total + (0.5 * self.wall) * dc.sum(dc.square(excess * (1.0 - inside_mask)), axis=1)
        return total

    def _direct(self, x):
        # Same interpolant as ``build`` without the tape: energy and grad_x.
        x2, single = self._rows(x)
        vals = self.params["values"]
        res = np.array(self.resolution)
        clipped = np.clip(x2, self.low, self.high)
        inside = clipped == x2
        u = (clipped - self.low) / self.spacing
        cell = np.maximum(np.minimum(np.floor(u), res - 2).astype(int), 0)
        frac = u - cell
        energy = np.zeros(len(x2))
        grad = np.zeros_like(x2)
        for corner in itertools.product((0, 1), repeat=self.dim):
            corner = np.array(corner)
            v = vals[tuple((cell + corner).T)]
            w = np.where(corner, frac, 1.0 - frac)           # (n, d) per-axis weights
            sign = np.where(corner, 1.0, -1.0) / self.spacing
            if self.dim == 1:
                energy += v * w[:, 0]
                grad[:, 0] += v * sign[0]
            else:
                energy += v * w[:, 0] * w[:, 1]
                grad[:, 0] += v * w[:, 1] * sign[0]
                grad[:, 1] += v * w[:, 0] * sign[1]
        grad *= inside
        excess = (x2 - clipped) * ~inside
        energy += 0.5 * self.wall * np.sum(excess ** 2, axis=1)
        grad += self.wall * excess
        return energy, grad, single

    def energy(self, x):
        e, _, single = self._direct(x)
        return float(e[0]) if single else e

    def energy_and_grad_x(self, x):
        e, g, single = self._direct(x)
        return (float(e[0]), g[0]) if single else (e, g)


class MlpEnergy(EnergyModel):
    """Dense energy: softplus (or tanh) hidden layers, linear scalar output.

    Weights start at N(0, 1/fan_in), biases at 0. With ``spectral_norm`` each
    weight matrix is divided by a persistent power-iteration estimate of its
    top singular value, with the gradient flowing through the estimate.
    """

    def __init__(self, widths: Sequence[int], seed=0, activation="softplus", spectral_norm=False,
                 image_shape=None):
        widths = list(widths)
        if len(widths) < 2 or widths[-1] != 1:
            raise ValueError("widths must start at the input dimension and end at 1")
        if activation not in ("softplus", "tanh"):
            raise ValueError("activation must be softplus or tanh (twice differentiable)")
        self.widths = widths
        self.dim = widths[0]
        self.activation = activation
        self.image_shape = image_shape
        rng = np.random.default_rng(seed)
        items = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            items.append((f"W{i}", rng.normal(0.0, 1.0 / np.sqrt(fi), size=(fi, fo))))
            items.append((f"b{i}", np.zeros(fo)))
        self.params = ParamSet(items)
        self.spectral = None
        if spectral_norm:
            self.spectral = {f"W{i}": SpectralState.init(fi, fo, rng)
                             for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:]))}

    def refresh(self, rng=None):
        if self.spectral:
            self.spectral = {k: st.step(self.params[k]) for k, st in self.spectral.items()}

    def with_params(self, params):
        out = super().with_params(params)
        if self.spectral:
            out.spectral = dict(self.spectral)
        return out

    def build(self, x, theta):
        act = dc.softplus if self.activation == "softplus" else dc.tanh
        h = x
        layers = len(self.widths) - 1
        for i in range(layers):
            W = theta[f"W{i}"]
            if self.spectral:
                st = self.spectral[f"W{i}"]
                sigma = dc.sum(W * np.outer(st.u, st.v))
                W = W * dc.power(sigma, -1.0)
            h = h @ W + theta[f"b{i}"]
            if i < layers - 1:
                h = act(h)
        return dc.reshape(h, (x.shape[0],))


# ---------------------------------------------------------------- composition

class Identity:
    def __call__(self, x: Node) -> Node:
        return x

    def in_dim(self, model_dim):
        return model_dim

    def out_dim(self, d):
        return d


@dataclass(frozen=True)
class Downsample:
    """Average-pool a flat (h*w) raster by ``factor``; output is flat again."""

    shape: tuple
    factor: int

    def __call__(self, x: Node) -> Node:
        return downsample(x, self.factor, self.shape)

    def in_dim(self, model_dim):
        return self.shape[0] * self.shape[1]

    def out_dim(self, d):
        h, w = self.shape
        return (h // self.factor) * (w // self.factor)


def downsample(x, factor: int, shape=None):
    """Average pooling by ``factor``.

    With ``shape=None`` the input is a raster ``(h, w)`` (array or node) and a
    raster comes back. With ``shape=(h, w)`` the input holds flat rows
    ``(n, h*w)`` and flat rows come back.
    """
    node = dc.as_node(x)
    if shape is None:
        h, w = node.shape[-2:]
        if h % factor or w % factor:
            raise ValueError(f"downsample: extents {(h, w)} not divisible by {factor}")
        out = dc.avg_pool2d(node, factor)
        return out if isinstance(x, Node) else out.value
    h, w = shape
    if h % factor or w % factor:
        raise ValueError(f"downsample: extents {(h, w)} not divisible by {factor}")
    n = node.shape[0]
    out = dc.avg_pool2d(dc.reshape(node, (n, h, w)), factor)
    return dc.reshape(out, (n, (h // factor) * (w // factor)))


class CompositeEnergy(EnergyModel):
    """Sum of member energies, each applied to a transformed input.

    exp(-sum_i E_i(T_i x)) is the (unnormalized) product of the members'
    densities. Parameters are namespaced ``"<index>.<name>"``.
    """

    def __init__(self, models, transforms=None):
        models = list(models)
        transforms = [Identity() for _ in models] if transforms is None else list(transforms)
        if not models or len(models) != len(transforms):
            raise ValueError("compose: need one transform per model")
        dims = {t.in_dim(m.dim) for m, t in zip(models, transforms)}
        if len(dims) != 1:
            raise ValueError("compose: members disagree on the input dimension")
        self.dim = dims.pop()
        for m, t in zip(models, transforms):
            if t.out_dim(self.dim) != m.dim:
                raise ValueError("compose: transform output does not match model input")
        self.models = models
        self.transforms = transforms
        self._sync_params()

    def _sync_params(self):
        self.params = ParamSet(
            (f"{i}.{k}", v) for i, m in enumerate(self.models) for k, v in m.params.items())

    def with_params(self, params):
        out = copy.copy(self)
        out.models = []
        for i, m in enumerate(self.models):
            prefix = f"{i}."
            sub = ParamSet((k[len(prefix):], v) for k, v in params.items() if k.startswith(prefix))
            out.models.append(m.with_params(sub))
        out.params = ParamSet(params)
        return out

    def refresh(self, rng=None):
        for m in self.models:
            m.refresh(rng)

    def build(self, x, theta):
        total = None
        for i, (m, t) in enumerate(zip(self.models, self.transforms)):
            prefix = f"{i}."
            sub = {k[len(prefix):]: v for k, v in theta.items() if k.startswith(prefix)}
            e = m.build(t(x), sub)
            total = e if total is None else total + e
        return total


def compose(models, transforms=None) -> CompositeEnergy:
    return CompositeEnergy(models, transforms)


# ------------------------------------------------------- spectral normalization

@dataclass(frozen=True)
class SpectralState:
    """Persistent left/right singular-vector estimates for one weight matrix."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, rows, cols, rng):
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v))

    def step(self, W, iters=1) -> "SpectralState":
        u, v = self.u, self.v
        for _ in range(iters):
            v = W.T @ u
            nv = np.linalg.norm(v)
            if nv == 0:
                return self
            v = v / nv
            u = W @ v
            nu = np.linalg.norm(u)
            if nu == 0:
                return self
            u = u / nu
        return SpectralState(u, v)

    def sigma(self, W) -> float:
        return float(self.u @ W @ self.v)


def spectral_normalize(weight, iters: int = 1, state: SpectralState | None = None, rng=None):
    """Return ``(W / sigma_hat, new_state, ok)``.

    ``sigma_hat`` is the power-iteration estimate after ``iters`` more
    iterations from ``state``. A zero matrix comes back unchanged with
    ``ok=False``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    W = np.asarray(weight, dtype=np.float64)
    if state is None:
        state = SpectralState.init(W.shape[0], W.shape[1], rng or np.random.default_rng(0))
    new = state.step(W, iters)
    sigma = new.sigma(W)
    if not np.any(W) or sigma == 0.0:
        warnings.warn("spectral_normalize: zero matrix left unchanged", RuntimeWarning)
        return W.copy(), state, False
    return W / sigma, new, True


# ------------------------------------------------------------------- dumping

def dump_energy_grid(model: EnergyModel, low, high, resolution, path) -> np.ndarray:
    """Write node energies of a 2-D model as CSV rows ``x,y,E``; return the (n, 3) table."""
    if model.dim != 2:
        raise ValueError("dump_energy_grid needs a 2-D model")
    rx, ry = (resolution, resolution) if np.isscalar(resolution) else resolution
    xs = np.linspace(low[0], high[0], rx)
    ys = np.linspace(low[1], high[1], ry)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    table = np.column_stack([pts, model.energy(pts)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "E"])
        w.writerows(table.tolist())
    return table
