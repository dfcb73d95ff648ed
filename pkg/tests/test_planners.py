import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradplan import autodiff as ad
from gradplan.config import PlannerConfig
from gradplan.envs import LQREnv
from gradplan.models import LinearDynamics
from gradplan.planners import (VAR_FLOOR, _noise, add_exploration_noise, imagine_return, optimize_cem,
                               optimize_grad_mpc, plan_cem, plan_grad_mpc, plan_policy_grad_mpc,
                               refine_policy_plan)
from toymodels import ConstantRewardModel, ShiftModel, TargetModel

LQR = LinearDynamics.from_env()


def test_imagine_return_constant_reward():
    ret = imagine_return(ad.Node(np.zeros(1)), np.array([[0.2]]), ConstantRewardModel(2.5))
    assert float(ret.value) == 2.5


def test_imagine_return_zero_discount_keeps_first_step():
    model = TargetModel([0.0])
    acts = np.array([[0.5], [0.9], [-0.4]])
    ret = imagine_return(ad.Node(np.zeros(1)), acts, model, discount=0.0)
    assert float(ret.value) == -0.25


def test_imagine_return_value_bootstrap():
    model = ConstantRewardModel(1.0)
    ret = imagine_return(ad.Node(np.zeros(1)), np.zeros((3, 1)), model, objective=lambda f: ad.sum(f * 0.0) + 10.0,
                         discount=0.5)
    assert float(ret.value) == pytest.approx(1 + 0.5 + 0.25 + 0.125 * 10.0, abs=1e-15)


def test_imagine_return_matches_matrix_recursion():
    env = LQREnv()
    rng = np.random.default_rng(0)
    for _ in range(10):
        x0 = rng.uniform(-1, 1, 2)
        u = rng.uniform(-1, 1, (12, 1))
        gamma = rng.uniform(0.5, 1.0)
        x, expected = x0.copy(), 0.0
        for k in range(12):
            expected -= gamma ** k * (x @ env.Q @ x + u[k] @ env.R @ u[k])
            x = env.A @ x + env.B @ u[k]
        got = float(imagine_return(ad.Node(x0), u, LQR, discount=gamma).value)
        assert got == pytest.approx(expected, abs=1e-10)


def test_imagine_return_batched():
    rng = np.random.default_rng(1)
    x0, u = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, (4, 5, 1))
    batched = imagine_return(LQR.expand(ad.Node(x0), 4), u, LQR).value
    single = [float(imagine_return(ad.Node(x0), u[i], LQR).value) for i in range(4)]
    np.testing.assert_allclose(batched, single, rtol=1e-14)


def test_grad_mpc_finds_quadratic_optimum():
    cfg = PlannerConfig(horizon=1, iterations=200, candidates=1)
    a = plan_grad_mpc(ad.Node(np.zeros(1)), TargetModel([0.37]), "reward", cfg)
    assert abs(a[0] - 0.37) < 1e-3


def test_grad_mpc_defaults_run():
    cfg = PlannerConfig()
    assert (cfg.horizon, cfg.iterations, cfg.candidates) == (12, 40, 1000)
    a = plan_grad_mpc(ad.Node(np.array([0.5, -0.5])), LQR, "reward", cfg)
    assert a.shape == (1,) and -1 <= a[0] <= 1


def _initial(cfg, m, key=()):
    bs = cfg.block_size
    n = -(-cfg.candidates // bs)
    raw = np.concatenate([_noise((cfg.seed, *key), 1, b, 0, (bs, cfg.horizon, m)) for b in range(n)])
    return np.clip(raw[:cfg.candidates], -1, 1)


def test_grad_mpc_constant_objective_keeps_candidates():
    cfg = PlannerConfig(horizon=3, iterations=7, candidates=20, seed=4)
    res = optimize_grad_mpc(ad.Node(np.zeros(1)), ConstantRewardModel(1.0), cfg)
    init = _initial(cfg, 1)
    np.testing.assert_array_equal(res.candidates, init)
    # all returns tie, so the first candidate wins
    np.testing.assert_array_equal(res.action, init[0, 0])


def test_grad_mpc_selects_best_final_return():
    cfg = PlannerConfig(horizon=4, iterations=3, candidates=30)
    res = optimize_grad_mpc(ad.Node(np.array([0.8, 0.1])), LQR, cfg)
    assert res.best.ret == res.returns.max()
    for j in range(3):
        direct = float(imagine_return(ad.Node(np.array([0.8, 0.1])), res.candidates[j], LQR).value)
        assert res.returns[j] == pytest.approx(direct, abs=1e-12)


def test_ascent_monotone_for_tiny_steps():
    cfg = PlannerConfig(horizon=6, iterations=1, candidates=40, action_lr_schedule=(1e-5,))
    x0 = ad.Node(np.array([0.7, -0.3]))
    res = optimize_grad_mpc(x0, LQR, cfg)
    init = _initial(cfg, 1)
    before = imagine_return(LQR.expand(x0, 40), init, LQR).value
    assert np.all(res.returns - before >= -1e-8)


def test_worker_count_does_not_change_result():
    cfg = PlannerConfig(horizon=5, iterations=4, candidates=350, block_size=100)
    x0 = ad.Node(np.array([0.3, 0.9]))
    one = optimize_grad_mpc(x0, LQR, cfg, workers=1)
    many = optimize_grad_mpc(x0, LQR, cfg, workers=4)
    np.testing.assert_array_equal(one.candidates, many.candidates)
    np.testing.assert_array_equal(one.returns, many.returns)
    c1 = optimize_cem(x0, LQR, dataclasses.replace(cfg, elite_count=20), workers=1)
    c4 = optimize_cem(x0, LQR, dataclasses.replace(cfg, elite_count=20), workers=3)
    np.testing.assert_array_equal(c1.mean, c4.mean)


def test_candidate_prefix_property():
    small = PlannerConfig(horizon=4, iterations=3, candidates=150)
    large = dataclasses.replace(small, candidates=400)
    x0 = ad.Node(np.array([-0.5, 0.4]))
    a, b = optimize_grad_mpc(x0, LQR, small), optimize_grad_mpc(x0, LQR, large)
    np.testing.assert_array_equal(a.candidates, b.candidates[:150])
    assert b.best.ret >= a.best.ret


def test_planner_key_changes_draws():
    cfg = PlannerConfig(horizon=2, iterations=1, candidates=5)
    x0 = ad.Node(np.zeros(2))
    a, b = optimize_grad_mpc(x0, LQR, cfg, key=(1,)), optimize_grad_mpc(x0, LQR, cfg, key=(2,))
    assert not np.array_equal(a.candidates, b.candidates)


def test_cem_all_elites_refit_to_sample_mean():
    cfg = PlannerConfig(horizon=2, iterations=1, candidates=30, elite_count=30, seed=3)
    res = optimize_cem(ad.Node(np.zeros(1)), TargetModel([0.2]), cfg)
    samples = np.clip(_noise((3,), 2, 0, 0, (100, 2, 1))[:30], -1, 1)
    np.testing.assert_allclose(res.mean, samples.mean(axis=0), rtol=1e-13)
    np.testing.assert_allclose(res.var, samples.var(axis=0), rtol=1e-13)


def test_cem_quadratic():
    cfg = PlannerConfig(horizon=1, iterations=10, candidates=500, elite_count=50)
    a = plan_cem(ad.Node(np.zeros(1)), TargetModel([0.37]), "reward", cfg)
    assert abs(a[0] - 0.37) < 0.05


def test_cem_variance_floor():
    cfg = PlannerConfig(horizon=1, iterations=30, candidates=50, elite_count=2)
    res = optimize_cem(ad.Node(np.zeros(1)), TargetModel([0.37]), cfg)
    assert all(np.all(v >= VAR_FLOOR) for _, v in res.history)
    assert np.any(res.var == VAR_FLOOR)


def _policy(offset):
    return lambda f: ad._wrap(np.clip(0.2 - ad._wrap(f).value + offset, -1, 1))


def _value(goal=0.2, width=0.1):
    return lambda f: ad.sum(ad.exp(-ad.square(ad._wrap(f) - goal) / width), axis=-1)


def test_hybrid_zero_iterations_is_policy():
    cfg = PlannerConfig(horizon=3, iterations=5, candidates=1)
    x = ad.Node(np.array([-0.4]))
    pol = _policy(0.3)
    np.testing.assert_array_equal(plan_policy_grad_mpc(x, ShiftModel(), pol, _value(), cfg, iterations=0),
                                  pol(x).value)


def test_hybrid_constant_value_keeps_policy_action():
    cfg = PlannerConfig(horizon=2, iterations=5, candidates=1)
    x = ad.Node(np.array([0.1]))
    pol = _policy(0.3)
    const = lambda f: ad.sum(ad._wrap(f) * 0.0, axis=-1) + 4.0  # noqa: E731
    np.testing.assert_array_equal(plan_policy_grad_mpc(x, ShiftModel(), pol, const, cfg), pol(x).value)


def test_hybrid_moves_perturbed_policy_towards_optimum():
    cfg = PlannerConfig(horizon=1, iterations=20, candidates=1, action_lr_schedule=(0.02,), discount=0.99)
    rng = np.random.default_rng(0)
    gaps_init, gaps_refined = [], []
    for _ in range(20):
        x = ad.Node(rng.uniform(-0.5, 0.5, 1))
        best = _policy(0.0)(x).value
        start = _policy(0.3)(x).value
        refined = plan_policy_grad_mpc(x, ShiftModel(), _policy(0.3), _value(), cfg)
        gaps_init.append(np.linalg.norm(start - best))
        gaps_refined.append(np.linalg.norm(refined - best))
    assert np.median(gaps_refined) < np.median(gaps_init)


def test_hybrid_plan_in_bounds():
    cfg = PlannerConfig(horizon=4, iterations=10, candidates=1, action_lr_schedule=(50.0,))
    plan = refine_policy_plan(ad.Node(np.array([0.0])), ShiftModel(), _policy(0.9), _value(goal=5.0, width=30.0), cfg)
    assert np.all(np.abs(plan.actions) <= 1)


def test_exploration_noise():
    rng = np.random.default_rng(0)
    a = np.array([0.3, -0.9])
    np.testing.assert_array_equal(add_exploration_noise(a, 0.0, rng), a)
    out = add_exploration_noise(np.zeros((100_000, 1)), 0.3, rng)
    assert np.std(out) == pytest.approx(0.3, rel=0.02)
    edge = add_exploration_noise(np.full((10_000, 2), 0.99), 0.3, rng)
    assert np.all(np.abs(edge) <= 1)


@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 2 ** 16))
def test_planner_outputs_in_bounds(x1, x2, seed):
    cfg = PlannerConfig(horizon=3, iterations=3, candidates=8, action_lr_schedule=(10.0,), seed=seed)
    x0 = ad.Node(np.array([5 * x1, 5 * x2]))
    assert np.all(np.abs(plan_grad_mpc(x0, LQR, "reward", cfg)) <= 1)
    assert np.all(np.abs(plan_cem(x0, LQR, "reward", dataclasses.replace(cfg, elite_count=2))) <= 1)
    res = optimize_grad_mpc(x0, LQR, cfg)
    assert np.all(np.abs(res.candidates) <= 1)
