"""Actor-critic in latent imagination.

The policy is a tanh-squashed MLP and the value function is a plain MLP, both on
model features. Values are trained towards lambda-returns computed on imagined
rollouts; the policy ascends those same returns through the differentiable model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .config import TrainConfig
from .nn import as_constants, as_variables, collect_grads, init_mlp, mlp
from .optim import AdamState, adam_step, clip_by_global_norm

# Keeps tanh outputs strictly inside the open action interval even when saturated.
_ACTION_SCALE = 1.0 - 1e-6


@dataclass
class Policy:
    params: dict
    n_layers: int = 3

    def __call__(self, features, params=None) -> Node:
        p = as_constants(self.params) if params is None else params
        return _ACTION_SCALE * mlp(p, "policy", features, self.n_layers, activation=ad.relu, output=ad.tanh)

    def act(self, features) -> np.ndarray:
        return self(features).value


@dataclass
class ValueFunction:
    params: dict
    n_layers: int = 3

    def __call__(self, features, params=None) -> Node:
        p = as_constants(self.params) if params is None else params
        return mlp(p, "value", features, self.n_layers)[..., 0]


def init_policy(rng: np.random.Generator, feature_dim: int, action_dim: int, hidden: int = 64,
                n_layers: int = 3) -> Policy:
    sizes = [feature_dim] + [hidden] * (n_layers - 1) + [action_dim]
    return Policy(init_mlp(rng, "policy", sizes), n_layers)


def init_value(rng: np.random.Generator, feature_dim: int, hidden: int = 64, n_layers: int = 3) -> ValueFunction:
    sizes = [feature_dim] + [hidden] * (n_layers - 1) + [1]
    return ValueFunction(init_mlp(rng, "value", sizes), n_layers)


# --- returns ------------------------------------------------------------------


def v_k_n(rewards, values, tau: int, k: int, discount: float, horizon: int, start: int = 0):
    """k-step bootstrapped return from ``tau``.

    ``rewards[n]`` is earned by the transition out of state ``n`` and
    ``values[n]`` estimates state ``n``. The return sums discounted rewards up
    to ``h = min(tau + k, start + horizon)`` and bootstraps with ``values[h]``.
    Works on floats, arrays or graph nodes.
    """
    end = start + horizon
    if not start <= tau < end:
        raise IndexError(f"tau={tau} outside [{start}, {end})")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rewards) < end or len(values) < end + 1:
        raise IndexError("need rewards up to start+horizon-1 and values up to start+horizon")
    h = min(tau + k, end)
    total = 0.0
    for n in range(tau, h):
        total = total + discount ** (n - tau) * rewards[n]
    return total + discount ** (h - tau) * values[h]


def lambda_return(rewards, values, tau: int, lam: float, discount: float, horizon: int, start: int = 0):
    """Exponentially weighted mix of the k-step returns, written out term by term."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    mix = 0.0
    for n in range(1, horizon):
        mix = mix + lam ** (n - 1) * v_k_n(rewards, values, tau, n, discount, horizon, start)
    return (1.0 - lam) * mix + lam ** (horizon - 1) * v_k_n(rewards, values, tau, horizon, discount, horizon, start)


def lambda_returns(rewards, values, lam: float, discount: float) -> list:
    """Lambda-returns for every ``tau`` in one backward sweep.

    With ``H = len(rewards)`` this equals ``lambda_return(..., tau, lam,
    discount, H - tau, start=tau)``: each return mixes the k-step returns that
    end at the same final state ``H``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    horizon = len(rewards)
    if len(values) != horizon + 1:
        raise ValueError("need one more value than rewards")
    out = [None] * horizon
    nxt = values[horizon]
    for tau in range(horizon - 1, -1, -1):
        nxt = rewards[tau] + discount * ((1.0 - lam) * values[tau + 1] + lam * nxt)
        out[tau] = nxt
    return out


# --- training -----------------------------------------------------------------


def imagine(model, start, policy: Policy, horizon: int, policy_params=None):
    """Roll ``policy`` forward in ``model``; returns states ``0..H`` and rewards ``0..H-1``."""
    states, rewards = [start], []
    state = start
    for _ in range(horizon):
        action = policy(model.features(state), policy_params)
        state, reward = model.transition(state, action)
        states.append(state)
        rewards.append(reward)
    return states, rewards


def value_loss(value: ValueFunction, features: list, targets: list, params=None) -> Node:
    """Mean of ``0.5 (v(s_tau) - target_tau)^2``; inputs and targets are treated as constants."""
    terms = [ad.mean(ad.square(value(ad.detach(f), params) - ad.detach(t))) for f, t in zip(features, targets)]
    return 0.5 * ad.mean(ad.stack(terms))


@dataclass
class ActorCriticState:
    policy: Policy
    value: ValueFunction
    policy_adam: AdamState = field(default_factory=AdamState)
    value_adam: AdamState = field(default_factory=AdamState)


def train_actor_critic(model, start, ac: ActorCriticState, cfg: TrainConfig,
                       grad_clip: float = 100.0) -> tuple[ActorCriticState, dict]:
    """One actor and one critic update from a batch of (detached) start states.

    The actor loss is the negated mean lambda-return over batch and horizon,
    differentiated through the model and policy; the value parameters are held
    fixed inside it. The critic regresses on the same returns with gradients
    stopped.
    """
    horizon = cfg.imagination_horizon
    pvars = as_variables(ac.policy.params)
    states, rewards = imagine(model, start, ac.policy, horizon, pvars)
    feats = [model.features(s) for s in states]
    values = [ac.value(f) for f in feats]
    returns = lambda_returns(rewards, values, cfg.lambda_, cfg.discount)
    actor_loss = -ad.mean(ad.stack(returns))
    pgrads, pnorm = clip_by_global_norm(collect_grads(pvars, ad.backward(actor_loss)), grad_clip)
    new_pp, padam = adam_step(ac.policy.params, pgrads, ac.policy_adam, cfg.actor_learning_rate, cfg.adam_epsilon)

    vvars = as_variables(ac.value.params)
    vloss = value_loss(ac.value, feats[:-1], returns, vvars)
    vgrads, vnorm = clip_by_global_norm(collect_grads(vvars, ad.backward(vloss)), grad_clip)
    new_vp, vadam = adam_step(ac.value.params, vgrads, ac.value_adam, cfg.value_learning_rate, cfg.adam_epsilon)

    new = ActorCriticState(Policy(new_pp, ac.policy.n_layers), ValueFunction(new_vp, ac.value.n_layers), padam, vadam)
    trace = {"actor_loss": float(actor_loss.value), "value_loss": float(vloss.value),
             "policy_grad_norm": pnorm, "value_grad_norm": vnorm}
    return new, trace
