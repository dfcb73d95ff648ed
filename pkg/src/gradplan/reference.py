"""Hand-designed cartpole controller and a value network fitted to it.

These supply the "competent policy" and its value function for checking the
Policy+Grad-MPC planner on the sparse swing-up task without first training an
actor-critic agent.

The controller pumps energy into the pole until it nears the top and then
hands over to a discrete LQR regulator designed on the agent-level (action
repeat included) linearisation around the upright equilibrium.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .agents import ValueFunction, init_value
from .envs import CartpoleEnv, riccati_recursion
from .nn import as_variables, collect_grads
from .optim import AdamState, adam_step


def _agent_step(x: np.ndarray, u: float, repeat: int) -> np.ndarray:
    env = CartpoleEnv
    pos, theta, vel, omega = x
    for _ in range(repeat):
        x_acc, theta_acc = env.accelerations(theta, omega, env.force_scale * u)
        vel = vel + env.dt * x_acc
        omega = omega + env.dt * theta_acc
        pos = pos + env.dt * vel
        theta = theta + env.dt * omega
    return np.array([pos, theta, vel, omega])


def balance_gain(repeat: int = 8, q=(1.0, 20.0, 1.0, 1.0), r: float = 1.0, steps: int = 500) -> np.ndarray:
    """Steady-state LQR gain K (u = -K x) for the upright equilibrium at agent level."""
    eps = 1e-6
    x0 = np.zeros(4)
    A = np.zeros((4, 4))
    for i in range(4):
        d = np.zeros(4)
        d[i] = eps
        A[:, i] = (_agent_step(x0 + d, 0.0, repeat) - _agent_step(x0 - d, 0.0, repeat)) / (2 * eps)
    B = ((_agent_step(x0, eps, repeat) - _agent_step(x0, -eps, repeat)) / (2 * eps))[:, None]
    _, K = riccati_recursion(A, B, np.diag(q), np.array([[r]]), steps)
    return K[0]


@dataclass
class SwingUpController:
    """Energy-based swing-up plus LQR balance, acting on (x, cos, sin, x_dot, theta_dot) features."""

    gain: np.ndarray
    energy_gain: float = 5.0
    switch_cos: float = math.cos(math.radians(20.0))
    offset: float = 0.0

    @classmethod
    def build(cls, repeat: int = 8, offset: float = 0.0) -> "SwingUpController":
        return cls(balance_gain(repeat), offset=offset)

    def perturbed(self, offset: float) -> "SwingUpController":
        return SwingUpController(self.gain, self.energy_gain, self.switch_cos, offset)

    def _single(self, f: np.ndarray) -> float:
        pos, c, s, vel, omega = f
        theta = math.atan2(s, c)
        env = CartpoleEnv
        if c > self.switch_cos:
            u = -float(np.ravel(self.gain) @ np.array([pos, theta, vel, omega]))
        else:
            m, l = env.pole_mass, env.half_length
            inertia = (4.0 / 3.0) * m * l * l
            energy = 0.5 * inertia * omega * omega + m * env.gravity * l * (c - 1.0)
            # drive energy to the upright level; pull the cart back towards the centre
            u = self.energy_gain * (0.0 - energy) * (-omega * c) - 0.1 * pos - 0.1 * vel
        return float(np.clip(u + self.offset, -1.0, 1.0))

    def __call__(self, features) -> np.ndarray:
        f = np.asarray(ad._wrap(features).value, dtype=float)
        if f.ndim == 1:
            return np.array([self._single(f)])
        flat = f.reshape(-1, f.shape[-1])
        return np.array([[self._single(row)] for row in flat]).reshape(f.shape[:-1] + (1,))


def _features(x: np.ndarray) -> np.ndarray:
    pos, theta, vel, omega = x
    return np.array([pos, math.cos(theta), math.sin(theta), vel, omega])


def collect_value_data(controller: SwingUpController, n_starts: int = 60, length: int = 125, horizon: int = 400,
                       discount: float = 0.99, repeat: int = 8, seed: int = 0):
    """Features and discounted sparse returns along controller rollouts from varied start states.

    Each rollout is extended ``horizon`` steps past the recorded ``length`` so
    the Monte-Carlo targets are not truncated early.
    """
    rng = np.random.default_rng([seed, 0x7A1])
    limit = math.cos(CartpoleEnv.upright_angle)
    feats, targets = [], []
    for _ in range(n_starts):
        x = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-math.pi, math.pi),
                      rng.uniform(-1.0, 1.0), rng.uniform(-2.0, 2.0)])
        states, rewards = [], []
        for _ in range(length + horizon):
            states.append(x)
            u = controller._single(_features(x))
            r = 0.0
            pos, theta, vel, omega = x
            for _ in range(repeat):
                x_acc, theta_acc = CartpoleEnv.accelerations(theta, omega, CartpoleEnv.force_scale * u)
                vel += CartpoleEnv.dt * x_acc
                omega += CartpoleEnv.dt * theta_acc
                pos += CartpoleEnv.dt * vel
                theta += CartpoleEnv.dt * omega
                r += 1.0 if math.cos(theta) > limit else 0.0
            x = np.array([pos, theta, vel, omega])
            rewards.append(r)
        ret, returns = 0.0, np.zeros(len(rewards))
        for t in range(len(rewards) - 1, -1, -1):
            ret = rewards[t] + discount * ret
            returns[t] = ret
        feats.extend(_features(s) for s in states[:length])
        targets.extend(returns[:length])
    return np.array(feats), np.array(targets)


@dataclass
class ScaledValue:
    """Value network trained on normalised targets; calling it returns values in return units."""

    net: ValueFunction
    scale: float

    def __call__(self, features, params=None):
        return self.net(features, params) * self.scale


def fit_value(features: np.ndarray, targets: np.ndarray, steps: int = 3000, batch: int = 256, hidden: int = 64,
              lr: float = 3e-3, seed: int = 0) -> ScaledValue:
    """Least-squares regression of an MLP value network on (features, targets)."""
    rng = np.random.default_rng([seed, 0xF17])
    scale = float(max(np.max(np.abs(targets)), 1e-8))
    net = init_value(rng, features.shape[-1], hidden)
    params, adam = net.params, AdamState()
    for _ in range(steps):
        idx = rng.integers(len(features), size=batch)
        nodes = as_variables(params)
        pred = net(ad.Node(features[idx]), nodes)
        loss = ad.mean(ad.square(pred - targets[idx] / scale))
        grads = collect_grads(nodes, ad.backward(loss))
        params, adam = adam_step(params, grads, adam, lr, 1e-8)
    return ScaledValue(ValueFunction(params, net.n_layers), scale)
