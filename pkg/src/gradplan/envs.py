"""Low-dimensional control environments and the LQR Riccati oracle.

Environments are functional state machines: ``reset(seed)`` and
``step(state, action)`` never mutate their inputs, and a trajectory is fully
determined by the seed and the action sequence (observation noise is drawn from
a stream keyed by ``(seed, step)``).

Constants (all fixed, never randomised):

lqr
    x' = A x + B u with A = [[1, 0.1], [0, 1]], B = [[0], [0.5]];
    reward -(x'Qx + u'Ru) on the pre-step state, Q = diag(1, 0.1), R = [[3]].
    x0 ~ U[-1, 1]^2, episode 12 steps, no action repeat.
point_reacher
    2-D point mass, dt 0.05, v' = v + dt (2 u - v), p' = p + dt v'.
    Start p ~ U[-0.1, 0.1]^2 at rest, target at distance U[0.5, 1.5] in a
    uniform direction. Reward -|p - target| (pre-step). Observation
    (p, v, target - p). Action repeat 4.
cartpole_swingup / cartpole_swingup_sparse
    Cart 1.0 kg, pole 0.1 kg, half-length 0.5 m, g 9.8, force 10 u N,
    dt 0.01, semi-implicit Euler. Pole starts hanging (theta = pi) with
    U[-0.05, 0.05] perturbations of x, theta, and both velocities.
    Observation (x, cos theta, sin theta, x_dot, theta_dot). Dense reward
    cos(theta) in [-1, 1]; sparse reward 1 when |theta| < 15 degrees, else 0
    (both on the post-step angle).
    Action repeat 8.
cup_catch
    Cup moves in the plane with velocity 1.5 u (dim(A) = 2), clipped to
    |x| <= 1, |y| <= 0.5. A ball drops vertically under gravity 9.8 from
    height 1.0 at x ~ U[-0.5, 0.5]. A catch (|ball_x - cup_x| < 0.1 and the
    ball crossing the cup rim height within 0.05 while falling) pays 1 and
    respawns the ball; a ball reaching y = -1 respawns without reward.
    Observation (cup_x, cup_y, ball_x, ball_y, ball_vy). dt 0.01, action repeat 6,
    episode 996 physics steps (the largest multiple of 6 within 1000).

Observations carry additive N(0, 0.01^2) noise by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import as_tensor


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    sparsity: str  # "dense" | "sparse"
    episode_length: int = 1000  # physics steps
    action_repeat: int = 1
    obs_noise: float = 0.01
    reward_range: tuple[float, float] = (-math.inf, math.inf)  # per physics step

    def __post_init__(self):
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be >= 1")
        if self.episode_length < 1 or self.episode_length % self.action_repeat:
            raise ValueError(f"episode_length {self.episode_length} not divisible by "
                             f"action_repeat {self.action_repeat}")

    @property
    def agent_steps(self) -> int:
        return self.episode_length // self.action_repeat


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray  # physical state
    t: int  # physics steps taken
    seed: int


def _check_action(action, dim: int) -> np.ndarray:
    a = as_tensor(action).reshape(-1)
    if a.shape != (dim,):
        raise ValueError(f"expected action of dimension {dim}, got shape {np.shape(action)}")
    if np.any(np.abs(a) > 1.0):
        raise ValueError(f"action {a} outside [-1, 1]")
    return a


class Env:
    """Base class: subclasses supply ``_initial``, ``_dynamics``, ``_reward``, ``_observe``."""

    spec: EnvSpec

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def reset(self, seed: int):
        rng = np.random.default_rng([int(seed), 0x5EED])
        state = EnvState(self._initial(rng), 0, int(seed))
        return state, self._noisy_obs(state)

    def step(self, state: EnvState, action):
        if state.t >= self.spec.episode_length:
            raise ValueError("episode already finished; call reset")
        u = _check_action(action, self.spec.action_dim)
        x_next = self._dynamics(state.x, u, (state.seed, state.t))
        reward = float(self._reward(state.x, u, x_next))
        new = EnvState(x_next, state.t + 1, state.seed)
        return new, self._noisy_obs(new), reward, new.t >= self.spec.episode_length

    def _noisy_obs(self, state: EnvState) -> np.ndarray:
        obs = self._observe(state.x)
        if self.spec.obs_noise > 0:
            rng = np.random.default_rng([state.seed, state.t, 0x0B5])
            obs = obs + self.spec.obs_noise * rng.standard_normal(obs.shape)
        return obs

    def _initial(self, rng):
        raise NotImplementedError

    def _dynamics(self, x, u, key):
        raise NotImplementedError

    def _reward(self, x, u, x_next):
        raise NotImplementedError

    def _observe(self, x):
        raise NotImplementedError


class LQREnv(Env):
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.5]])
    Q = np.diag([1.0, 0.1])
    R = np.array([[3.0]])

    def __init__(self, **overrides):
        super().__init__(replace(EnvSpec("lqr", 2, 1, "dense", 12, 1, 0.01, (-math.inf, 0.0)), **overrides))

    def _initial(self, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def _dynamics(self, x, u, key=None):
        return self.A @ x + self.B @ u

    def _reward(self, x, u, x_next):
        return -(x @ self.Q @ x + u @ self.R @ u)

    def _observe(self, x):
        return x.copy()


class PointReacherEnv(Env):
    dt = 0.05
    gain = 2.0
    damping = 1.0
    target_distance = (0.5, 1.5)

    def __init__(self, **overrides):
        super().__init__(replace(EnvSpec("point_reacher", 6, 2, "dense", 1000, 4, 0.01, (-math.inf, 0.0)),
                                 **overrides))

    def _initial(self, rng):
        p = rng.uniform(-0.1, 0.1, size=2)
        dist = rng.uniform(*self.target_distance)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        target = p + dist * np.array([math.cos(angle), math.sin(angle)])
        return np.concatenate([p, np.zeros(2), target])

    def _dynamics(self, x, u, key=None):
        p, v, g = x[:2], x[2:4], x[4:]
        v = v + self.dt * (self.gain * u - self.damping * v)
        return np.concatenate([p + self.dt * v, v, g])

    def _reward(self, x, u, x_next):
        return -float(np.linalg.norm(x[:2] - x[4:]))

    def _observe(self, x):
        return np.concatenate([x[:2], x[2:4], x[4:] - x[:2]])


class CartpoleEnv(Env):
    gravity = 9.8
    cart_mass = 1.0
    pole_mass = 0.1
    half_length = 0.5
    force_scale = 10.0
    dt = 0.01
    upright_angle = math.radians(15.0)

    def __init__(self, sparse: bool = False, **overrides):
        name = "cartpole_swingup_sparse" if sparse else "cartpole_swingup"
        rr = (0.0, 1.0) if sparse else (-1.0, 1.0)
        self.sparse = sparse
        super().__init__(replace(EnvSpec(name, 5, 1, "sparse" if sparse else "dense", 1000, 8, 0.01, rr),
                                 **overrides))

    def _initial(self, rng):
        x = rng.uniform(-0.05, 0.05, size=4)
        x[1] += math.pi
        return x

    @classmethod
    def accelerations(cls, theta, theta_dot, force, sin=np.sin, cos=np.cos):
        """Cart and pole accelerations; ``sin``/``cos`` are swappable so the same
        expression also builds differentiable graphs."""
        total = cls.cart_mass + cls.pole_mass
        polemass_length = cls.pole_mass * cls.half_length
        s, c = sin(theta), cos(theta)
        temp = (force + polemass_length * theta_dot * theta_dot * s) * (1.0 / total)
        theta_acc = (cls.gravity * s - c * temp) / (
            cls.half_length * (4.0 / 3.0 - cls.pole_mass * c * c * (1.0 / total)))
        x_acc = temp - polemass_length * theta_acc * c * (1.0 / total)
        return x_acc, theta_acc

    def _dynamics(self, x, u, key=None):
        pos, theta, vel, omega = x
        x_acc, theta_acc = self.accelerations(theta, omega, self.force_scale * u[0])
        vel = vel + self.dt * x_acc
        omega = omega + self.dt * theta_acc
        return np.array([pos + self.dt * vel, theta + self.dt * omega, vel, omega])

    def _reward(self, x, u, x_next):
        c = math.cos(x_next[1])
        if self.sparse:
            return 1.0 if c > math.cos(self.upright_angle) else 0.0
        return c

    def _observe(self, x):
        pos, theta, vel, omega = x
        return np.array([pos, math.cos(theta), math.sin(theta), vel, omega])


class CupCatchEnv(Env):
    dt = 0.01
    gravity = 9.8
    cup_speed = 1.5
    cup_halfwidth = 0.1
    rim_band = 0.05
    drop_height = 1.0
    floor = -1.0

    def __init__(self, **overrides):
        super().__init__(replace(EnvSpec("cup_catch", 5, 2, "sparse", 996, 6, 0.01, (0.0, 1.0)), **overrides))

    def _initial(self, rng):
        # cup x, cup y, ball x, ball y, ball vy, catches+misses so far
        return np.array([0.0, 0.0, self._spawn_x(rng), self.drop_height, 0.0, 0.0])

    @staticmethod
    def _spawn_x(rng):
        return rng.uniform(-0.5, 0.5)

    def _dynamics(self, x, u, key=(0, 0)):
        cx = float(np.clip(x[0] + self.dt * self.cup_speed * u[0], -1.0, 1.0))
        cy = float(np.clip(x[1] + self.dt * self.cup_speed * u[1], -0.5, 0.5))
        vy = x[4] - self.dt * self.gravity
        by = x[3] + self.dt * vy
        bx = x[2]
        spawns = x[5]
        if self._caught(x, cx, cy, bx, by) or by < self.floor:
            spawns += 1
            rng = np.random.default_rng([int(key[0]), int(key[1]), 0xC0])
            bx, by, vy = self._spawn_x(rng), self.drop_height, 0.0
        return np.array([cx, cy, bx, by, vy, spawns])

    def _caught(self, x, cx, cy, bx, by):
        crossed = x[3] >= cy - self.rim_band and by <= cy + self.rim_band and by < x[3]
        return bool(crossed and abs(bx - cx) < self.cup_halfwidth and x[3] > cy - self.rim_band)

    def _reward(self, x, u, x_next):
        cx, cy = x_next[0], x_next[1]
        vy = x[4] - self.dt * self.gravity
        by = x[3] + self.dt * vy
        return 1.0 if self._caught(x, cx, cy, x[2], by) else 0.0

    def _observe(self, x):
        return x[:5].copy()


class ActionRepeat:
    """Agent-level env applying each action ``repeat`` times and summing rewards."""

    def __init__(self, env: Env, repeat: int):
        if repeat < 1:
            raise ValueError("repeat must be >= 1")
        self.env = env
        self.repeat = repeat
        self.spec = replace(env.spec, action_repeat=repeat)

    def reset(self, seed: int):
        return self.env.reset(seed)

    def step(self, state: EnvState, action):
        total, done = 0.0, False
        obs = None
        for _ in range(self.repeat):
            state, obs, reward, done = self.env.step(state, action)
            total += reward
            if done:
                break
        return state, obs, total, done


def action_repeat_wrap(env: Env, repeat: int) -> ActionRepeat:
    return ActionRepeat(env, repeat)


ENV_NAMES = ("lqr", "point_reacher", "cartpole_swingup", "cartpole_swingup_sparse", "cup_catch")


def make_base_env(name: str, **overrides) -> Env:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if name == "lqr":
        return LQREnv(**overrides)
    if name == "point_reacher":
        return PointReacherEnv(**overrides)
    if name == "cartpole_swingup":
        return CartpoleEnv(sparse=False, **overrides)
    if name == "cartpole_swingup_sparse":
        return CartpoleEnv(sparse=True, **overrides)
    if name == "cup_catch":
        return CupCatchEnv(**overrides)
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


def make_env(name: str, episode_length: int | None = None, action_repeat: int | None = None,
             obs_noise: float | None = None) -> ActionRepeat:
    """Environment wrapped with its action repeat (the env default unless given)."""
    repeat = action_repeat
    if repeat is None:
        repeat = make_base_env(name).spec.action_repeat
    base = make_base_env(name, episode_length=episode_length, action_repeat=repeat, obs_noise=obs_noise)
    return ActionRepeat(base, repeat)


# --- LQR oracle ---------------------------------------------------------------


def riccati_recursion(A, B, Q, R, horizon: int, terminal=None):
    """Backward Riccati recursion for sum_{k<N} x'Qx + u'Ru + x_N' terminal x_N.

    Returns ``(P, K)`` with ``P[k]`` the cost-to-go matrix at step ``k``
    (``P[N] = terminal``) and ``u_k = -K[k] x_k`` optimal.
    """
    n = A.shape[0]
    P = [None] * (horizon + 1)
    K = [None] * horizon
    P[horizon] = np.zeros((n, n)) if terminal is None else np.asarray(terminal, dtype=float)
    for k in range(horizon - 1, -1, -1):
        Pn = P[k + 1]
        K[k] = np.linalg.solve(R + B.T @ Pn @ B, B.T @ Pn @ A)
        P[k] = Q + A.T @ Pn @ (A - B @ K[k])
        P[k] = 0.5 * (P[k] + P[k].T)
    return P, K


def lqr_optimal(x0, horizon: int, env: LQREnv | None = None):
    """Optimal open-loop action sequence (horizon, m) and its cost from ``x0``."""
    env = env or LQREnv()
    P, K = riccati_recursion(env.A, env.B, env.Q, env.R, horizon)
    x = np.asarray(x0, dtype=float)
    actions = []
    for k in range(horizon):
        u = -K[k] @ x
        actions.append(u)
        x = env.A @ x + env.B @ u
    return np.array(actions), float(np.asarray(x0) @ P[0] @ np.asarray(x0))


def rollout_cost(env: LQREnv, x0, actions) -> float:
    """Cost of an open-loop action sequence on the LQR system (no bounds check)."""
    x = np.asarray(x0, dtype=float)
    cost = 0.0
    for u in np.asarray(actions, dtype=float).reshape(len(actions), -1):
        cost += x @ env.Q @ x + u @ env.R @ u
        x = env.A @ x + env.B @ u
    return float(cost)
