"""Differentiable dynamics the planners roll out.

Every model exposes the same duck-typed surface:

``transition(state, action) -> (next_state, reward)``
    one agent-level step; ``reward`` has the batch shape of ``state``.
``features(state) -> Node``
    input vector for policy and value networks.
``expand(state, n)``
    replicate an unbatched state into a batch of ``n``.
``action_dim``

:class:`RssmDynamics` wraps a learned world model (mean prior transitions). The
analytic models reproduce an environment's physics, action repeat included,
and are used where the tests need the true model.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .envs import CartpoleEnv, LQREnv, PointReacherEnv
from .world_model import LatentState, RssmParams, prior_step, reward_mean


def _repeat_rows(x: Node, n: int) -> Node:
    v = np.asarray(x.value).reshape(-1)
    return Node(np.repeat(v[None, :], n, axis=0))


class RssmDynamics:
    def __init__(self, params: RssmParams):
        self.params = params.as_constants()
        self.action_dim = params.config.action_dim

    def transition(self, state: LatentState, action):
        nxt = prior_step(state, action, self.params, noise=None)
        return nxt, reward_mean(self.params, nxt.features())

    def features(self, state: LatentState) -> Node:
        return state.features()

    def expand(self, state: LatentState, n: int) -> LatentState:
        return state.expand(n)


class LinearDynamics:
    """x' = A x + B u, reward -(x'Qx + u'Ru)."""

    def __init__(self, A, B, Q, R):
        self.A, self.B, self.Q, self.R = (np.asarray(m, dtype=float) for m in (A, B, Q, R))
        self.action_dim = self.B.shape[1]

    @classmethod
    def from_env(cls, env: LQREnv | None = None) -> "LinearDynamics":
        env = env or LQREnv()
        return cls(env.A, env.B, env.Q, env.R)

    def transition(self, state, action):
        x, u = ad._wrap(state), ad._wrap(action)
        reward = -(ad.sum((x @ self.Q) * x, axis=-1) + ad.sum((u @ self.R) * u, axis=-1))
        return x @ self.A.T + u @ self.B.T, reward

    def features(self, state) -> Node:
        return ad._wrap(state)

    def expand(self, state, n: int) -> Node:
        return _repeat_rows(ad._wrap(state), n)


class PointReacherDynamics:
    """Point-mass physics with the environment's action repeat."""

    def __init__(self, repeat: int = 4, env: PointReacherEnv | None = None):
        self.env = env or PointReacherEnv()
        self.repeat = repeat
        self.action_dim = 2

    def transition(self, state, action):
        x, u = ad._wrap(state), ad._wrap(action)
        e = self.env
        p, v, g = x[..., 0:2], x[..., 2:4], x[..., 4:6]
        reward = 0.0
        for _ in range(self.repeat):
            d = p - g
            reward = reward - ad.sqrt(ad.sum(d * d, axis=-1) + 1e-12)
            v = v + e.dt * (e.gain * u - e.damping * v)
            p = p + e.dt * v
        return ad.concat([p, v, g], axis=-1), reward

    def features(self, state) -> Node:
        x = ad._wrap(state)
        return ad.concat([x[..., 0:4], x[..., 4:6] - x[..., 0:2]], axis=-1)

    def expand(self, state, n: int) -> Node:
        return _repeat_rows(ad._wrap(state), n)


class CartpoleDynamics:
    """Cartpole physics with the environment's action repeat.

    The sparse reward is a step function of the angle, so it contributes no
    gradient; the dense reward is ``cos(theta)``.
    """

    def __init__(self, sparse: bool = False, repeat: int = 8):
        self.sparse = sparse
        self.repeat = repeat
        self.action_dim = 1
        self._cos_limit = float(np.cos(CartpoleEnv.upright_angle))

    def transition(self, state, action):
        x, u = ad._wrap(state), ad._wrap(action)
        env = CartpoleEnv
        pos, theta, vel, omega = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        force = u[..., 0] * env.force_scale
        reward = 0.0
        for _ in range(self.repeat):
            x_acc, theta_acc = env.accelerations(theta, omega, force, sin=ad.sin, cos=ad.cos)
            vel = vel + env.dt * x_acc
            omega = omega + env.dt * theta_acc
            pos = pos + env.dt * vel
            theta = theta + env.dt * omega
            if self.sparse:
                reward = reward + Node((np.cos(theta.value) > self._cos_limit).astype(float))
            else:
                reward = reward + ad.cos(theta)
        return ad.stack([pos, theta, vel, omega], axis=-1), reward

    def features(self, state) -> Node:
        x = ad._wrap(state)
        theta = x[..., 1]
        return ad.stack([x[..., 0], ad.cos(theta), ad.sin(theta), x[..., 2], x[..., 3]], axis=-1)

    def expand(self, state, n: int) -> Node:
        return _repeat_rows(ad._wrap(state), n)


def true_model(env):
    """Analytic model matching ``env`` (an :class:`~gradplan.envs.ActionRepeat` or base env)."""
    base = getattr(env, "env", env)
    repeat = env.spec.action_repeat
    if isinstance(base, LQREnv):
        if repeat != 1:
            raise ValueError("the analytic LQR model assumes no action repeat")
        return LinearDynamics.from_env(base)
    if isinstance(base, PointReacherEnv):
        return PointReacherDynamics(repeat, base)
    if isinstance(base, CartpoleEnv):
        return CartpoleDynamics(base.sparse, repeat)
    raise ValueError(f"no analytic model for {env.spec.name}")
