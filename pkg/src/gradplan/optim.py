"""Adam with bias correction and global-norm gradient clipping over named parameter dicts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError

Params = dict[str, np.ndarray]


@dataclass
class AdamState:
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float, epsilon: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999) -> tuple[Params, AdamState]:
    """One Adam update. Returns new parameter and state dicts; inputs are not mutated.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if not (g.shape == m.shape == v.shape == p.shape):
            raise ShapeError("adam_step", [p.shape, g.shape, m.shape, v.shape], name)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + epsilon)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
