"""Adam with global-norm gradient clipping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..diffcore import ParamSet

log = logging.getLogger(__name__)

__all__ = ["AdamHyper", "AdamState", "adam_step", "clip_by_global_norm"]


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.1


@dataclass(frozen=True)
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamSet):
        return cls(params.zeros_like(), params.zeros_like(), 0)


def clip_by_global_norm(grads: ParamSet, max_norm: float):
    norm = grads.norm()
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        return grads.scale(max_norm / norm), norm
    return grads, norm


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, hyper: AdamHyper = AdamHyper()):
    """Return ``(params, state, info)``; inputs are left untouched.

    A non-finite gradient skips the update (``info["skipped"]``).
    """
    raw_norm = grads.norm()
    if not math.isfinite(raw_norm):
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.t + 1)
        return params, state, {"skipped": True, "grad_norm": raw_norm, "clipped_norm": float("nan")}
    g, _ = clip_by_global_norm(grads, hyper.grad_clip)
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    m = state.m.combine(g, lambda m_, g_: b1 * m_ + (1 - b1) * g_)
    v = state.v.combine(g, lambda v_, g_: b2 * v_ + (1 - b2) * g_ * g_)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = ParamSet(
        (k, p - hyper.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + hyper.eps)) for k, p in params.items())
    return new, AdamState(m, v, t), {"skipped": False, "grad_norm": raw_norm, "clipped_norm": g.norm()}
