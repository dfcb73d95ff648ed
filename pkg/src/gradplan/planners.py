"""Planners over a differentiable model: Grad-MPC, CEM and Policy+Grad-MPC.

All planners take a model following the protocol in :mod:`gradplan.models`
and roll it forward with mean (noise-free) transitions. Candidates are
processed in fixed-size blocks. Block ``b`` at iteration ``i`` draws its noise
from a stream keyed by ``(seed, *key, tag, b, i)``, so a run with ``J``
candidates sees the first ``J`` rows of the same draws as any larger run, and
the result never depends on how blocks are spread over workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .agents import lambda_returns
from .autodiff import Node
from .config import PlannerConfig

_TAG_INIT = 1
_TAG_CEM = 2


@dataclass
class ActionPlan:
    actions: np.ndarray  # (H, m)
    ret: float


@dataclass
class PlanResult:
    best: ActionPlan
    candidates: np.ndarray  # (J, H, m) final candidate actions
    returns: np.ndarray  # (J,) final returns

    @property
    def action(self) -> np.ndarray:
        return self.best.actions[0]


def worker_count() -> int:
    """Threads used for candidate blocks (``GRADPLAN_WORKERS``, default 1)."""
    try:
        return max(1, int(os.environ.get("GRADPLAN_WORKERS", "1")))
    except ValueError:
        return 1


def _map_blocks(fn: Callable[[int], object], n_blocks: int, workers: int | None) -> list:
    workers = worker_count() if workers is None else max(1, workers)
    if workers == 1 or n_blocks == 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(min(workers, n_blocks)) as pool:
        return list(pool.map(fn, range(n_blocks)))


def _noise(key: Sequence[int], tag: int, block: int, iteration: int, shape) -> np.ndarray:
    return np.random.default_rng([*key, tag, block, iteration]).standard_normal(shape)


def _clip(a, cfg: PlannerConfig) -> np.ndarray:
    return np.clip(a, cfg.action_low, cfg.action_high)


def imagine_return(start, actions, model, objective="reward", discount: float = 1.0) -> Node:
    """Discounted objective of an action sequence rolled out from ``start``.

    ``actions`` is (..., H, m) with leading axes matching the batch of
    ``start``. With ``objective="reward"`` the result is ``sum_i discount^i r_i``
    over the H transitions. Passing a value function ``v`` (features -> value)
    gives ``sum_{i<H} discount^i r_i + discount^H v(s_H)``. ``0^0`` is taken as 1.
    """
    if isinstance(actions, ActionPlan):
        actions = actions.actions
    actions = ad._wrap(actions)
    if actions.ndim < 2:
        raise ad.ShapeError("imagine_return", [actions.shape], "actions must be (..., H, m)")
    horizon = actions.shape[-2]
    state, total = start, 0.0
    for i in range(horizon):
        state, reward = model.transition(state, actions[..., i, :])
        total = total + (discount ** i) * reward
    if objective != "reward":
        total = total + (discount ** horizon) * objective(model.features(state))
    return ad._wrap(total)


def imagine_lambda_return(start, actions, model, value_fn, discount: float, lam: float) -> Node:
    """Lambda-return of the first imagined state under an action sequence."""
    actions = ad._wrap(actions)
    state = start
    rewards, values = [], [value_fn(model.features(start))]
    for i in range(actions.shape[-2]):
        state, reward = model.transition(state, actions[..., i, :])
        rewards.append(reward)
        values.append(value_fn(model.features(state)))
    return ad._wrap(lambda_returns(rewards, values, lam, discount)[0])


# --- Grad-MPC -----------------------------------------------------------------


def optimize_grad_mpc(belief, model, cfg: PlannerConfig, objective="reward", key: Sequence[int] = (),
                      workers: int | None = None) -> PlanResult:
    """Gradient ascent on the return of ``cfg.candidates`` plans; keeps the best.

    Plans start from N(0, 1) clipped to the bounds. Each iteration takes one
    step along the return gradient with the scheduled step size and clips
    again. Returns are re-evaluated after the last step, and the plan with the
    highest final return wins (first index on ties).
    """
    H, m, bs = cfg.horizon, model.action_dim, cfg.block_size
    stream = (cfg.seed, *key)
    n_blocks = math.ceil(cfg.candidates / bs)

    def run_block(b):
        start = model.expand(belief, bs)
        a = _clip(_noise(stream, _TAG_INIT, b, 0, (bs, H, m)), cfg)
        for i in range(cfg.iterations):
            acts = ad.variable(a)
            ret = imagine_return(start, acts, model, objective, cfg.discount)
            g = ad.backward(ad.sum(ret)).get(acts)
            if g is None:
                g = np.zeros_like(a)
            a = _clip(a + cfg.learning_rate(i) * g, cfg)
        final = imagine_return(start, a, model, objective, cfg.discount).value
        return a, final

    blocks = _map_blocks(run_block, n_blocks, workers)
    cands = np.concatenate([b[0] for b in blocks])[:cfg.candidates]
    returns = np.concatenate([b[1] for b in blocks])[:cfg.candidates]
    scores = np.where(np.isfinite(returns), returns, -np.inf)
    j = int(np.argmax(scores))
    return PlanResult(ActionPlan(cands[j].copy(), float(returns[j])), cands, returns)


def plan_grad_mpc(belief, model, objective="reward", cfg: PlannerConfig | None = None,
                  key: Sequence[int] = (), workers: int | None = None) -> np.ndarray:
    """First action of the best Grad-MPC plan."""
    return optimize_grad_mpc(belief, model, cfg or PlannerConfig(), objective, key, workers).action


# --- CEM ----------------------------------------------------------------------


@dataclass
class CemResult:
    mean: np.ndarray  # (H, m)
    var: np.ndarray  # (H, m)
    history: list  # per-iteration (mean, var) after refit

    @property
    def action(self) -> np.ndarray:
        return np.clip(self.mean[0], -1.0, 1.0)


VAR_FLOOR = 1e-6


def optimize_cem(belief, model, cfg: PlannerConfig, objective="reward", key: Sequence[int] = (),
                 workers: int | None = None) -> CemResult:
    """Cross-entropy method with the standard elite refit.

    Each iteration samples plans from a diagonal Gaussian (clipped to the
    bounds), scores them without gradients and refits the mean and
    elementwise variance to the top ``cfg.top_k``. Variances are floored at
    ``1e-6``.
    """
    H, m, bs = cfg.horizon, model.action_dim, cfg.block_size
    stream = (cfg.seed, *key)
    n_blocks = math.ceil(cfg.candidates / bs)
    mean, var = np.zeros((H, m)), np.ones((H, m))
    history = []
    for i in range(cfg.iterations):
        mu, sd = mean, np.sqrt(var)

        def run_block(b, mu=mu, sd=sd, i=i):
            a = _clip(mu + sd * _noise(stream, _TAG_CEM, b, i, (bs, H, m)), cfg)
            return a, imagine_return(model.expand(belief, bs), a, model, objective, cfg.discount).value

        blocks = _map_blocks(run_block, n_blocks, workers)
        cands = np.concatenate([b[0] for b in blocks])[:cfg.candidates]
        returns = np.concatenate([b[1] for b in blocks])[:cfg.candidates]
        scores = np.where(np.isfinite(returns), returns, -np.inf)
        elites = cands[np.argsort(-scores, kind="stable")[:cfg.top_k]]
        mean = elites.mean(axis=0)
        var = np.maximum(elites.var(axis=0), VAR_FLOOR)
        history.append((mean, var))
    return CemResult(mean, var, history)


def plan_cem(belief, model, objective="reward", cfg: PlannerConfig | None = None,
             key: Sequence[int] = (), workers: int | None = None) -> np.ndarray:
    cfg = cfg or PlannerConfig()
    return _clip(optimize_cem(belief, model, cfg, objective, key, workers).mean[0], cfg)


# --- Policy + Grad-MPC ----------------------------------------------------------


def policy_rollout_actions(belief, model, policy, horizon: int) -> np.ndarray:
    """Actions (H, m) obtained by unrolling ``policy`` through the model from ``belief``."""
    state, actions = belief, []
    for _ in range(horizon):
        a = np.clip(ad._wrap(policy(model.features(state))).value, -1.0, 1.0)
        actions.append(a)
        state, _ = model.transition(state, Node(a))
    return np.stack(actions)


def refine_policy_plan(belief, model, policy, value_fn, cfg: PlannerConfig,
                       iterations: int | None = None) -> ActionPlan:
    """Start from the policy's plan and ascend its lambda-return."""
    iters = cfg.iterations if iterations is None else iterations
    a = policy_rollout_actions(belief, model, policy, cfg.horizon)
    for i in range(iters):
        acts = ad.variable(a)
        ret = imagine_lambda_return(belief, acts, model, value_fn, cfg.discount, cfg.lambda_)
        g = ad.backward(ad.sum(ret)).get(acts)
        if g is None:
            g = np.zeros_like(a)
        a = _clip(a + cfg.learning_rate(i, iters) * g, cfg)
    ret = imagine_lambda_return(belief, a, model, value_fn, cfg.discount, cfg.lambda_)
    return ActionPlan(a, float(np.sum(ret.value)))


def plan_policy_grad_mpc(belief, model, policy, value_fn, cfg: PlannerConfig | None = None,
                         iterations: int | None = None) -> np.ndarray:
    """First action of the refined policy plan; ``iterations=0`` returns the policy's action."""
    return refine_policy_plan(belief, model, policy, value_fn, cfg or PlannerConfig(), iterations).actions[0]


def add_exploration_noise(action, scale: float, rng: np.random.Generator, low: float = -1.0,
                          high: float = 1.0) -> np.ndarray:
    action = np.asarray(action, dtype=float)
    if scale == 0:
        return action.copy()
    return np.clip(action + scale * rng.standard_normal(action.shape), low, high)
