import math

import numpy as np
import pytest

from gradplan.envs import (ActionRepeat, CartpoleEnv, EnvSpec, EnvState, LQREnv, PointReacherEnv, action_repeat_wrap,
                           lqr_optimal, make_base_env, make_env, riccati_recursion, rollout_cost, ENV_NAMES)


@pytest.mark.parametrize("name", ENV_NAMES)
def test_reset_deterministic(name):
    env = make_env(name)
    (s1, o1), (s2, o2) = env.reset(7), env.reset(7)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(s1.x, s2.x)


@pytest.mark.parametrize("name", ["lqr", "point_reacher", "cartpole_swingup", "cup_catch"])
def test_different_seeds_differ(name):
    env = make_env(name)
    assert not np.array_equal(env.reset(1)[0].x, env.reset(2)[0].x)


@pytest.mark.parametrize("name", ENV_NAMES)
def test_trajectory_determinism(name):
    env = make_env(name)
    n = min(20, env.spec.agent_steps)
    actions = np.random.default_rng(0).uniform(-1, 1, (n, env.spec.action_dim))

    def run():
        state, obs = env.reset(3)
        out = [obs]
        for a in actions:
            state, obs, r, _ = env.step(state, a)
            out.append(np.append(obs, r))
        return out
    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_point_reacher_target_distance_range():
    env = PointReacherEnv()
    d = np.array([np.linalg.norm(env.reset(s)[0].x[4:] - env.reset(s)[0].x[:2]) for s in range(2000)])
    assert d.min() >= 0.5 and d.max() <= 1.5
    # uniform on [0.5, 1.5]: both ends are visited
    assert d.min() < 0.55 and d.max() > 1.45


def test_lqr_fixed_point():
    env = LQREnv()
    state = EnvState(np.zeros(2), 0, 0)
    new, obs, r, _ = env.step(state, np.zeros(1))
    np.testing.assert_array_equal(new.x, np.zeros(2))
    assert r == 0.0


def test_cartpole_upright_reward():
    state = EnvState(np.zeros(4), 0, 0)
    assert CartpoleEnv().step(state, np.zeros(1))[2] == 1.0
    assert CartpoleEnv(sparse=True).step(state, np.zeros(1))[2] == 1.0


def _lqr_cost_by_least_squares(x0, horizon, env):
    # cost is a quadratic in the stacked actions; solve its normal equations directly
    n, m = 2, 1
    M = np.zeros((horizon * n, horizon * m))  # states x_1..x_N as affine in u
    F = np.zeros((horizon * n, n))
    Ak = np.eye(n)
    for k in range(horizon):
        Ak = env.A @ Ak
        F[k * n:(k + 1) * n] = Ak
        for j in range(k + 1):
            M[k * n:(k + 1) * n, j * m:(j + 1) * m] = np.linalg.matrix_power(env.A, k - j) @ env.B
    # only x_1..x_{N-1} pay state cost, x_N is free
    Qbar = np.kron(np.diag([1.0] * (horizon - 1) + [0.0]), env.Q)
    Rbar = np.kron(np.eye(horizon), env.R)
    H = M.T @ Qbar @ M + Rbar
    g = M.T @ Qbar @ F @ x0
    u = -np.linalg.solve(H, g)
    xs = F @ x0 + M @ u
    return float(x0 @ env.Q @ x0 + xs @ Qbar @ xs + u @ Rbar @ u), u


def test_riccati_matches_quadratic_solve():
    env = LQREnv()
    for x0 in (np.array([1.0, -0.5]), np.array([-0.3, 0.8])):
        actions, cost = lqr_optimal(x0, 12, env)
        ref, u = _lqr_cost_by_least_squares(x0, 12, env)
        assert cost == pytest.approx(ref, rel=1e-8, abs=1e-12)
        assert rollout_cost(env, x0, actions) == pytest.approx(cost, rel=1e-10)
        np.testing.assert_allclose(actions.ravel(), u, atol=1e-8)


def test_riccati_terminal():
    env = LQREnv()
    P, K = riccati_recursion(env.A, env.B, env.Q, env.R, 3, terminal=np.eye(2))
    np.testing.assert_array_equal(P[3], np.eye(2))
    assert len(K) == 3


def test_repeat_one_is_identity():
    base = LQREnv()
    wrapped = action_repeat_wrap(LQREnv(), 1)
    s1, _ = base.reset(0)
    s2, _ = wrapped.reset(0)
    for a in (0.5, -0.2, 1.0):
        s1, o1, r1, _ = base.step(s1, [a])
        s2, o2, r2, _ = wrapped.step(s2, [a])
        np.testing.assert_array_equal(o1, o2)
        assert r1 == r2


class _ConstantEnv(LQREnv):
    def _reward(self, x, u, x_next):
        return 1.0


def test_repeat_sums_rewards():
    env = ActionRepeat(_ConstantEnv(), 4)
    state, _ = env.reset(0)
    assert env.step(state, [0.0])[2] == 4.0


def test_repeat_two_matches_double_steps():
    base = LQREnv(episode_length=24)
    env = action_repeat_wrap(LQREnv(episode_length=24), 2)
    s_w, _ = env.reset(5)
    s_b, _ = base.reset(5)
    for a in np.linspace(-1, 1, 12):
        s_w, o_w, r_w, d_w = env.step(s_w, [a])
        s_b, _, r1, _ = base.step(s_b, [a])
        s_b, o_b, r2, d_b = base.step(s_b, [a])
        np.testing.assert_array_equal(s_w.x, s_b.x)
        np.testing.assert_array_equal(o_w, o_b)
        assert r_w == r1 + r2 and d_w == d_b
    assert d_w


def test_repeat_short_circuits_on_done():
    base = _ConstantEnv(episode_length=4)
    env = action_repeat_wrap(base, 2)
    # one physics step left: the second repeat must not run
    state, _, reward, done = env.step(EnvState(np.zeros(2), 3, 0), [0.0])
    assert done and state.t == 4 and reward == 1.0


@pytest.mark.parametrize("name", ENV_NAMES)
def test_reward_ranges_on_random_rollouts(name):
    base = make_base_env(name)
    lo, hi = base.spec.reward_range
    rng = np.random.default_rng(0)
    n = 0
    for ep in range(20):
        state, _ = base.reset(ep)
        while state.t < base.spec.episode_length and n < 5000:
            state, obs, r, _ = base.step(state, rng.uniform(-1, 1, base.spec.action_dim))
            assert lo <= r <= hi and np.all(np.isfinite(obs))
            n += 1


@pytest.mark.parametrize("name", ["cartpole_swingup_sparse", "cup_catch"])
def test_sparse_envs_mostly_zero(name):
    env = make_base_env(name)
    rng = np.random.default_rng(1)
    rewards = []
    for ep in range(10):
        state, _ = env.reset(ep)
        done = False
        while not done:
            state, _, r, done = env.step(state, rng.uniform(-1, 1, env.spec.action_dim))
            rewards.append(r)
    assert np.mean(np.array(rewards) == 0.0) >= 0.95


def test_specs():
    dims = {n: (make_env(n).spec.action_dim, make_env(n).spec.sparsity) for n in ENV_NAMES}
    assert dims["cartpole_swingup"] == (1, "dense")
    assert dims["cartpole_swingup_sparse"] == (1, "sparse")
    assert dims["cup_catch"] == (2, "sparse")
    assert make_env("cartpole_swingup").spec.action_repeat == 8
    assert make_env("cup_catch").spec.episode_length % 6 == 0


def test_errors():
    with pytest.raises(ValueError, match="unknown"):
        make_base_env("walker")
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, "dense", episode_length=10, action_repeat=3)
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, "dense", action_repeat=0)
    env = LQREnv()
    state, _ = env.reset(0)
    with pytest.raises(ValueError, match="outside"):
        env.step(state, [1.5])
    with pytest.raises(ValueError, match="dimension"):
        env.step(state, [0.1, 0.2])
    done_state = EnvState(np.zeros(2), env.spec.episode_length, 0)
    with pytest.raises(ValueError, match="finished"):
        env.step(done_state, [0.0])
    with pytest.raises(ValueError):
        ActionRepeat(env, 0)


def test_observation_noise_level():
    env = make_base_env("lqr")
    state, obs = env.reset(0)
    noise = []
    for s in range(400):
        state, obs = env.reset(s)
        noise.append(obs - state.x)
    assert np.std(noise) == pytest.approx(0.01, rel=0.1)
    clean = make_base_env("lqr", obs_noise=0.0)
    state, obs = clean.reset(0)
    np.testing.assert_array_equal(obs, state.x)
    assert math.isclose(env.spec.obs_noise, 0.01)
