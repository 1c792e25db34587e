"""Gradient estimators for MCMC-trained energy models.

Every estimator reports its phases separately:

* positive   grad E_data[E_theta(x)]
* negative   -grad E_samples[E_theta(x)] with samples detached. With exact
             model samples this is the NLL negative phase; with chains started
             from data it is the CD divergence phase. Same arithmetic, different
             provenance.
* kl_entropy, kl_opt
             the two halves of the CD auxiliary term -KL[q_t || p_stopgrad],
             differentiated through the last ``k_backprop`` chain steps.

Sign convention for the auxiliary term. ``"correct"`` follows the CD
derivation: it minimizes the chain's entropy and raises the energy of chain
outputs through the sampler. ``"flipped"`` is the widely used variant with
the opposite sign: it spreads chain outputs apart and lowers their energy
through the sampler, which helps the chains approach the model density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from . import diffcore as dc
from .diffcore import Node, ParamSet
from .energies import EnergyModel
from .replay import Reservoir
from .sampling import (DiffChainResult, SamplerConfig, TransitionOp, apply_transition, run_chain,
                       run_chain_differentiable)

__all__ = [
    "QuadratureError", "QuadratureGrid", "ObjectiveSpec", "GradientEstimate", "SampleBank",
    "positive_phase_grad", "negative_phase_grad", "exact_log_partition", "exact_nll",
    "exact_nll_grad", "model_expectation", "knn_entropy", "knn_entropy_constant",
    "calibrate_knn_entropy", "entropy_repel_grad", "kl_opt_grad", "compute_gradient",
    "GaussianChainOracle", "gaussian_kl", "cd_star_circulation", "cosine",
]

VARIANTS = ("exact_nll", "mcmc_nll", "cd_star", "cd_kl")
NN_EPS = 1e-8


class QuadratureError(ValueError):
    pass


def _grads_to_params(grads) -> ParamSet:
    return ParamSet((k, v.value) for k, v in grads.items())


def cosine(a, b) -> float:
    a = a.flatten() if isinstance(a, ParamSet) else np.ravel(a)
    b = b.flatten() if isinstance(b, ParamSet) else np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------- the phases

def positive_phase_grad(model: EnergyModel, data_batch) -> ParamSet:
    data_batch = np.atleast_2d(data_batch)
    if len(data_batch) == 0:
        raise ValueError("empty data batch")
    return model.grad_theta(data_batch)


def negative_phase_grad(model: EnergyModel, sample_batch) -> ParamSet:
    """-(1/m) sum_j grad_theta E(x_j); the samples are constants."""
    sample_batch = np.atleast_2d(np.asarray(sample_batch, dtype=np.float64))
    if len(sample_batch) == 0:
        raise ValueError("empty sample batch")
    theta = model.params.leaves()
    loss = -dc.mean(model.build(dc.stop_gradient(dc.constant(sample_batch)), theta))
    return _grads_to_params(dc.gradient(loss, theta))


# ----------------------------------------------------------------- quadrature

@dataclass
class QuadratureGrid:
    """Tensor-product grid on an axis-aligned box (d <= 2)."""

    low: tuple
    high: tuple
    nodes: int = 401
    rule: str = "trapezoid"
    tail_tol: float = 1e-6

    def __post_init__(self):
        self.low = tuple(np.atleast_1d(np.asarray(self.low, dtype=np.float64)).tolist())
        self.high = tuple(np.atleast_1d(np.asarray(self.high, dtype=np.float64)).tolist())
        if len(self.low) != len(self.high) or len(self.low) > 2:
            raise ValueError("quadrature supports d <= 2")
        if self.rule not in ("trapezoid", "simpson"):
            raise ValueError("rule must be trapezoid or simpson")
        if self.rule == "simpson" and self.nodes % 2 == 0:
            raise ValueError("simpson needs an odd node count")

    @property
    def dim(self):
        return len(self.low)

    def _axis(self, lo, hi, n):
        x = np.linspace(lo, hi, n)
        h = (hi - lo) / (n - 1)
        if self.rule == "trapezoid":
            w = np.full(n, h)
            w[[0, -1]] = h / 2
        else:
            w = np.full(n, 2 * h / 3)
            w[1::2] = 4 * h / 3
            w[[0, -1]] = h / 3
        return x, w

    def points_and_log_weights(self, low=None, high=None, nodes=None):
        low = self.low if low is None else low
        high = self.high if high is None else high
        nodes = self.nodes if nodes is None else nodes
        axes = [self._axis(lo, hi, nodes) for lo, hi in zip(low, high)]
        grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        w = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        return pts, np.log(w)

    def enlarged(self, margin=0.25):
        lo, hi = np.array(self.low), np.array(self.high)
        pad = margin * (hi - lo)
        span = (hi - lo + 2 * pad) / (hi - lo)
        n = int(round((self.nodes - 1) * float(np.max(span)))) + 1
        if self.rule == "simpson" and n % 2 == 0:
            n += 1
        return tuple(lo - pad), tuple(hi + pad), n


def _log_z(model, grid, low=None, high=None, nodes=None):
    pts, logw = grid.points_and_log_weights(low, high, nodes)
    if model.dim != grid.dim:
        raise ValueError(f"grid dimension {grid.dim} does not match model dimension {model.dim}")
    a = -model.energy(pts) + logw
    m = np.max(a)
    return m + np.log(np.sum(np.exp(a - m))), pts, a


def exact_log_partition(model: EnergyModel, grid: QuadratureGrid) -> float:
    """log of the integral of exp(-E) over the grid box.

    Raises ``QuadratureError`` when a box enlarged by 25% per side holds more
    than ``grid.tail_tol`` extra relative mass.
    """
    logz, _, _ = _log_z(model, grid)
    lo, hi, n = grid.enlarged()
    logz_big, pts, a = _log_z(model, grid, lo, hi, n)
    # mass at enlarged-box nodes strictly outside the original box; comparing
    # the two totals instead would count the edge half-weights as tail
    tol = 1e-9 * (np.array(grid.high) - np.array(grid.low))
    outside = np.any((pts < np.array(grid.low) - tol) | (pts > np.array(grid.high) + tol), axis=1)
    tail = float(np.sum(np.exp(a[outside] - logz_big))) if np.any(outside) else 0.0
    if tail > grid.tail_tol:
        raise QuadratureError(f"box too small: estimated tail mass {tail:.3g} > {grid.tail_tol:g}")
    return float(logz)


def model_expectation(model, grid):
    """Quadrature nodes and normalized weights of p_theta on the grid."""
    logz, pts, a = _log_z(model, grid)
    return pts, np.exp(a - logz)


def exact_nll(model, data_batch, grid) -> float:
    return float(np.mean(model.energy(np.atleast_2d(data_batch))) + exact_log_partition(model, grid))


def exact_nll_grad(model: EnergyModel, data_batch, grid: QuadratureGrid, return_phases=False):
    """E_data[grad E] - E_p[grad E], the model expectation taken by quadrature."""
    exact_log_partition(model, grid)          # tail guard
    pts, w = model_expectation(model, grid)
    keep = w > 0
    pos = positive_phase_grad(model, data_batch)
    theta = model.params.leaves()
    loss = -dc.sum(model.build(dc.constant(pts[keep]), theta) * w[keep])
    neg = _grads_to_params(dc.gradient(loss, theta))
    total = pos + neg
    return (total, pos, neg) if return_phases else total


# ------------------------------------------------------------------ entropy

def _nn_distances(samples):
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise ValueError("knn_entropy needs at least 2 samples")
    dist, _ = cKDTree(x).query(x, k=2)
    return dist[:, 1]


def knn_entropy(samples, constant: float = 0.0, strict: bool = False) -> float:
    """(1/n) sum_i log(n * NN_i) + constant, NN_i the leave-one-out Euclidean
    nearest-neighbour distance. Zero distances are floored at 1e-8
    (or raise with ``strict``)."""
    nn = _nn_distances(samples)
    if strict and np.any(nn == 0):
        raise ValueError("duplicate points")
    n = len(nn)
    return float(np.mean(np.log(n * np.maximum(nn, NN_EPS))) + constant)


def knn_entropy_constant(n: int, d: int = 1) -> float:
    """Asymptotic Kozachenko-Leonenko offset for ``knn_entropy`` in ``d`` dims.

    Only exact for d = 1 (``knn_entropy`` drops the factor d on log NN).
    """
    log_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1)
    return float(digamma(n) - digamma(1) + log_ball - math.log(n))


def calibrate_knn_entropy(n: int, d: int = 1, rng=None, reps: int = 20) -> float:
    """Empirical offset: minus the mean estimate on uniform [0,1]^d samples
    (true entropy 0), averaged over ``reps`` draws of size ``n``."""
    rng = np.random.default_rng(0) if rng is None else rng
    est = [knn_entropy(rng.random((n, d))) for _ in range(reps)]
    return -float(np.mean(est))


class SampleBank(Reservoir):
    """Recent negative samples used as the entropy repeller set."""

    def __init__(self, size: int, dim: int):
        super().__init__(size, dim, policy=None)


def _as_params(grads, wrt):
    if isinstance(wrt, Node):
        return grads.value
    if isinstance(grads, dict):
        return _grads_to_params(grads)
    return [g.value for g in grads]


def entropy_repel_grad(finals: Node, wrt, bank, eps: float = NN_EPS):
    """Gradient of -mean_i log NN(x_i, B) through ``finals``.

    The nearest bank entry is chosen on values and held fixed; the distance is
    sqrt(|x - b|^2 + eps^2) so coincident points stay finite.
    """
    b = bank.states() if isinstance(bank, Reservoir) else np.atleast_2d(np.asarray(bank, dtype=np.float64))
    if len(b) == 0:
        raise ValueError("sample bank is empty")
    x = finals if finals.ndim == 2 else dc.reshape(finals, (1, -1) if finals.ndim == 1 else (1, 1))
    if x.shape[1] != b.shape[1]:
        raise ValueError("bank dimension mismatch")
    _, idx = cKDTree(b).query(x.value, k=1)
    diff = x - b[idx]
    dist = dc.sqrt(dc.sum(dc.square(diff), axis=1) + eps * eps)
    loss = -dc.mean(dc.log(dist))
    return _as_params(dc.gradient(loss, wrt), wrt)


def kl_opt_grad(model: EnergyModel, chain: DiffChainResult):
    """Gradient of -mean E_{frozen theta}(x_t(theta)): the path through the
    sampler is live, the energy's own parameters are held constant."""
    if not isinstance(chain.final, Node):
        raise ValueError("finals lack a differentiable tail")
    loss = -dc.mean(model.build(chain.final, model.params.constants()))
    return _as_params(dc.gradient(loss, chain.theta), chain.theta)


# -------------------------------------------------------------- the assembly

@dataclass
class ObjectiveSpec:
    variant: str = "mcmc_nll"
    kl_sign: str = "correct"
    kl_weight: float = 1.0
    k_backprop: int = 1
    entropy_bank_size: int = 1000
    grid: Optional[QuadratureGrid] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown objective variant '{self.variant}'")
        if self.kl_sign not in ("correct", "flipped"):
            raise ValueError("kl_sign must be 'correct' or 'flipped'")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.variant == "exact_nll" and self.grid is None:
            raise ValueError("exact_nll needs a quadrature grid")


@dataclass
class GradientEstimate:
    variant: str
    positive: ParamSet
    negative: ParamSet
    total: ParamSet
    kl_entropy: Optional[ParamSet] = None
    kl_opt: Optional[ParamSet] = None
    samples: Optional[np.ndarray] = None
    fresh: Optional[np.ndarray] = None
    inits: Optional[np.ndarray] = None      # reservoir draws, before any init transition
    provenance: dict = field(default_factory=dict)

    def norms(self) -> dict:
        out = {"positive": self.positive.norm(), "negative": self.negative.norm(),
               "total": self.total.norm()}
        if self.kl_entropy is not None:
            out["kl_entropy"] = self.kl_entropy.norm()
            out["kl_opt"] = self.kl_opt.norm()
        return out


def _provenance(spec, reservoir):
    label = getattr(getattr(reservoir, "policy", None), "label", None)
    info = {"variant": spec.variant, "init_policy": label}
    if spec.variant in ("cd_star", "cd_kl"):
        # chains that do not start on data optimize likelihood, whatever the loss is called
        info["effective_objective"] = "cd" if label in ("true_cd", "persistent_cd") else "nll"
    elif spec.variant == "mcmc_nll":
        info["effective_objective"] = "nll"
    else:
        info["effective_objective"] = "exact_nll"
    return info


def compute_gradient(spec: ObjectiveSpec, model: EnergyModel, data_batch, reservoir: Optional[Reservoir],
                     sampler_config: Optional[SamplerConfig], rng, bank: Optional[SampleBank] = None,
                     batch_size: Optional[int] = None,
                     init_transition: Optional[TransitionOp] = None) -> GradientEstimate:
    """Assemble one parameter gradient for ``spec``.

    Sampled variants draw ``batch_size`` (default: data batch size) inits from
    the reservoir and run the chains; finals come back in ``samples`` for the
    caller to push. ``cd_kl`` also needs a ``bank``; an empty bank is seeded
    with the inits. ``init_transition`` perturbs every init drawn from the
    reservoir before its chain starts (train-time augmentation).
    """
    data_batch = np.atleast_2d(data_batch)
    prov = _provenance(spec, reservoir)
    phase = "positive"
    try:
        pos = positive_phase_grad(model, data_batch)
        if spec.variant == "exact_nll":
            phase = "negative"
            total, _, neg = exact_nll_grad(model, data_batch, spec.grid, return_phases=True)
            return GradientEstimate(spec.variant, pos, neg, total, provenance=prov)

        phase = "sampling"
        m = batch_size or len(data_batch)
        stored, fresh = reservoir.sample(m, rng)
        inits = stored if init_transition is None else apply_transition(stored, init_transition, rng)
        if spec.variant != "cd_kl":
            finals = run_chain(inits, model, sampler_config, rng).final
            phase = "negative"
            neg = negative_phase_grad(model, finals)
            return GradientEstimate(spec.variant, pos, neg, pos + neg, samples=finals, fresh=fresh,
                                    inits=stored, provenance=prov)

        chain = run_chain_differentiable(inits, model, sampler_config, spec.k_backprop, rng)
        finals = np.array(chain.final.value)
        phase = "negative"
        neg = negative_phase_grad(model, finals)
        if bank is None:
            raise ValueError("cd_kl needs a SampleBank")
        if len(bank) == 0:
            bank.push(inits)
        phase = "kl_entropy"
        repel = entropy_repel_grad(chain.final, chain.theta, bank)
        phase = "kl_opt"
        opt = kl_opt_grad(model, chain)
        if spec.kl_sign == "correct":
            kl_ent, kl_o = repel.scale(-1.0), opt
        else:
            kl_ent, kl_o = repel, opt.scale(-1.0)
        bank.push(finals)
        total = pos + neg
        if spec.kl_weight:
            total = total + (kl_ent + kl_o).scale(spec.kl_weight)
        return GradientEstimate(spec.variant, pos, neg, total, kl_entropy=kl_ent, kl_opt=kl_o,
                                samples=finals, fresh=fresh, inits=stored, provenance=prov)
    except Exception as err:
        raise RuntimeError(f"{spec.variant}: {phase} phase failed: {err}") from err


# ------------------------------------------------ closed-form Gaussian chains

def gaussian_kl(m1, v1, m2, v2) -> float:
    """KL[N(m1, v1) || N(m2, v2)] in one dimension."""
    return 0.5 * (math.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0)


@dataclass
class GaussianChainOracle:
    """Chains on E = precision * (x - theta)^2 / 2 started from N(m0, v0).

    Each kernel is linear-Gaussian, x' = a x + b + c xi, so every marginal q_t
    is Gaussian with mean/variance given by a two-term recursion.

    ``kernel="ula"``: the unadjusted step with noise sqrt(step_size). Its
    stationary variance is 1 / (precision (1 - step_size precision / 4)),
    not 1 / precision.
    ``kernel="exact"``: the exact Ornstein-Uhlenbeck flow over the same time
    step; it leaves p_theta invariant.
    """

    precision: float = 1.0
    step_size: float = 0.1
    kernel: str = "exact"

    def coefficients(self, theta):
        p, lam = self.precision, self.step_size
        if self.kernel == "ula":
            a = 1.0 - 0.5 * lam * p
            c2 = lam
        elif self.kernel == "exact":
            a = math.exp(-0.5 * lam * p)
            c2 = -math.expm1(-lam * p) / p
        else:
            raise ValueError("kernel must be 'ula' or 'exact'")
        return a, theta * (1.0 - a), c2

    def marginal(self, theta, m0, v0, t):
        a, b, c2 = self.coefficients(theta)
        m, v = m0, v0
        for _ in range(t):
            m, v = a * m + b, a * a * v + c2
        return m, v

    def kl_to_model(self, theta, m0, v0, t) -> float:
        m, v = self.marginal(theta, m0, v0, t)
        return gaussian_kl(m, v, theta, 1.0 / self.precision)

    def nll_loss(self, theta, data_mean, data_var) -> float:
        """KL[p_data || p_theta] (the NLL up to the data entropy)."""
        return gaussian_kl(data_mean, data_var, theta, 1.0 / self.precision)

    def cd_loss(self, theta, data_mean, data_var, t) -> float:
        return self.nll_loss(theta, data_mean, data_var) - self.kl_to_model(theta, data_mean, data_var, t)


def cd_star_circulation(data_mean=0.0, data_var=1.0, t=5, step_size=0.2, center=(0.5, 0.3),
                        half_width=0.3, points=400, field_kind="cd_star"):
    """Line integral of an expected update field around a square loop in
    (theta, log precision) space; zero for any gradient field.

    ``field_kind``: ``"cd_star"`` (data-started t-step exact-kernel chains) or
    ``"nll"`` (exact model expectation).
    """

    def field_at(theta, rho):
        p = math.exp(rho)
        g_pos = np.array([-p * (data_mean - theta), 0.5 * p * (data_var + (data_mean - theta) ** 2)])
        if field_kind == "nll":
            mq, vq = theta, 1.0 / p
        else:
            mq, vq = GaussianChainOracle(p, step_size, "exact").marginal(theta, data_mean, data_var, t)
        g_neg = np.array([-p * (mq - theta), 0.5 * p * (vq + (mq - theta) ** 2)])
        return g_pos - g_neg

    cx, cy = center
    h = half_width
    corners = [(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h), (cx - h, cy - h)]
    total = 0.0
    s = (np.arange(points) + 0.5) / points
    for (x0, y0), (x1, y1) in zip(corners[:-1], corners[1:]):
        d = np.array([x1 - x0, y1 - y0])
        for si in s:
            total += field_at(x0 + si * d[0], y0 + si * d[1]) @ d / points
    return float(total)
