"""Finite-difference self-checks for every differentiable building block.

Each case builds a random instance from a seeded generator and compares
autodiff against central differences along random directions. Inputs that
feed kinked functions (relu, maximum) are kept away from the kink, and network
parameters are perturbed away from their zero-bias initialisation for the same
reason.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .models import LinearDynamics, RssmDynamics
from .planners import imagine_return
from .world_model import (LatentState, RssmConfig, RssmParams, elbo_loss, init_rssm, posterior_step, prior_step)

TOLERANCE = 1e-4
STOCHASTIC_TOLERANCE = 1e-3


def _away(rng, shape, margin=0.1, scale=2.0):
    """Values with |x| in [margin, scale]: keeps kinked ops differentiable at the sample."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, scale, size=shape)


def _pos(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _weights(rng, shape):
    return rng.standard_normal(shape) * 0.5


def _scalar(node):
    # weighted sum so every output element matters with a distinct weight
    w = np.random.default_rng(int(np.prod(node.shape) + 7)).standard_normal(node.shape)
    return ad.sum(node * w)


_SMALL_RSSM = RssmConfig(obs_dim=3, action_dim=2, belief_size=4, state_size=3, hidden_size=5, embedding_size=4)


def _rssm_params(rng) -> dict:
    base = init_rssm(_SMALL_RSSM, rng).arrays()
    return {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in base.items()}


def _rssm_state(rng, batch=(2,)) -> LatentState:
    c = _SMALL_RSSM
    mean = rng.standard_normal(batch + (c.state_size,))
    return LatentState(ad.Node(rng.standard_normal(batch + (c.belief_size,))), ad.Node(mean),
                       ad.GaussianParams(ad.Node(mean), ad.Node(_pos(rng, batch + (c.state_size,)))))


def _unpack(names, xs):
    return RssmParams(_SMALL_RSSM, dict(zip(names, xs)))


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable, list]]
    tolerance: float = TOLERANCE


def _unary(fn, sampler):
    return lambda rng: (lambda x: _scalar(fn(x)), [sampler(rng, (3, 4))])


def _rssm_prior(rng):
    params = _rssm_params(rng)
    names = sorted(params)
    state = _rssm_state(rng)
    action = rng.uniform(-0.9, 0.9, (2, 2))

    def f(a, *xs):
        return _scalar(prior_step(state, a, _unpack(names, xs)).s)
    return f, [action] + [params[n] for n in names]


def _rssm_posterior(rng):
    params = _rssm_params(rng)
    names = sorted(params)
    state = _rssm_state(rng)
    action = rng.uniform(-0.9, 0.9, (2, 2))
    obs = rng.standard_normal((2, 3))
    eps = rng.standard_normal((2, 3))

    def f(a, o, *xs):
        post, prior = posterior_step(state, a, o, _unpack(names, xs), noise=eps)
        return _scalar(post.s) + _scalar(prior.mean) + _scalar(prior.stddev)
    return f, [action, obs] + [params[n] for n in names]


def _elbo(rng):
    params = _rssm_params(rng)
    names = sorted(params)
    obs = rng.standard_normal((2, 4, 3))
    act = rng.uniform(-1, 1, (2, 4, 2))
    rew = rng.standard_normal((2, 4))
    eps = rng.standard_normal((2, 4, 3))

    def f(*xs):
        return elbo_loss(obs, act, rew, _unpack(names, xs), free_nats=0.0, noise=eps).total
    return f, [params[n] for n in names]


def _imagine_rssm(rng):
    params = _rssm_params(rng)
    names = sorted(params)
    state = _rssm_state(rng, ())
    actions = rng.uniform(-0.9, 0.9, (3, 2))

    def f(a, *xs):
        model = RssmDynamics(_unpack(names, xs))  # Node tensors stay differentiable
        return imagine_return(state, a, model, "reward", 0.9)
    return f, [actions] + [params[n] for n in names]


def _imagine_linear(rng):
    model = LinearDynamics.from_env()
    x0 = rng.uniform(-1, 1, 2)
    actions = rng.uniform(-0.9, 0.9, (12, 1))
    return (lambda a: imagine_return(ad.Node(x0), a, model)), [actions]


def _gru(rng):
    n, i = 4, 3
    return ((lambda x, h, wx, wh, bx, bh: _scalar(ad.gru_cell(x, h, wx, wh, bx, bh))),
            [rng.standard_normal((2, i)), rng.standard_normal((2, n)), _weights(rng, (i, 3 * n)),
             _weights(rng, (n, 3 * n)), _weights(rng, (3 * n,)), _weights(rng, (3 * n,))])


CASES: tuple[Case, ...] = (
    Case("add", lambda r: (lambda a, b: _scalar(a + b), [r.standard_normal((3, 4)), r.standard_normal((4,))])),
    Case("sub", lambda r: (lambda a, b: _scalar(a - b), [r.standard_normal((3, 4)), r.standard_normal((3, 1))])),
    Case("mul", lambda r: (lambda a, b: _scalar(a * b), [r.standard_normal((3, 4)), r.standard_normal((3, 4))])),
    Case("div", lambda r: (lambda a, b: _scalar(a / b), [r.standard_normal((3, 4)), _away(r, (4,), 0.5)])),
    Case("matmul", lambda r: (lambda a, b: _scalar(a @ b), [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))])),
    Case("linear", lambda r: (lambda x, w, b: _scalar(ad.linear(x, w, b)),
                              [r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)])),
    Case("maximum", lambda r: (lambda x: _scalar(ad.maximum(x, 0.0)), [_away(r, (3, 4))])),
    Case("neg", _unary(ad.neg, lambda r, s: r.standard_normal(s))),
    Case("tanh", _unary(ad.tanh, lambda r, s: r.standard_normal(s))),
    Case("sigmoid", _unary(ad.sigmoid, lambda r, s: r.standard_normal(s))),
    Case("relu", _unary(ad.relu, _away)),
    Case("softplus", _unary(ad.softplus, lambda r, s: r.standard_normal(s))),
    Case("square", _unary(ad.square, lambda r, s: r.standard_normal(s))),
    Case("exp", _unary(ad.exp, lambda r, s: r.standard_normal(s))),
    Case("log", _unary(ad.log, _pos)),
    Case("sqrt", _unary(ad.sqrt, _pos)),
    Case("sin", _unary(ad.sin, lambda r, s: r.standard_normal(s))),
    Case("cos", _unary(ad.cos, lambda r, s: r.standard_normal(s))),
    Case("sum", lambda r: (lambda x: _scalar(ad.sum(x, axis=1)), [r.standard_normal((3, 4, 2))])),
    Case("mean", lambda r: (lambda x: _scalar(ad.mean(x, axis=0, keepdims=True)), [r.standard_normal((3, 4))])),
    Case("concat", lambda r: (lambda a, b: _scalar(ad.concat([a, b], axis=-1)),
                              [r.standard_normal((3, 2)), r.standard_normal((3, 4))])),
    Case("stack", lambda r: (lambda a, b: _scalar(ad.stack([a, b], axis=1)),
                             [r.standard_normal((3, 2)), r.standard_normal((3, 2))])),
    Case("slice", lambda r: (lambda x: _scalar(x[:, 1:3] * x[0, :2]), [r.standard_normal((3, 4))])),
    Case("reshape", lambda r: (lambda x: _scalar(ad.reshape(ad.square(x), (4, 3))), [r.standard_normal((3, 4))])),
    Case("broadcast_to", lambda r: (lambda x: _scalar(ad.square(ad.broadcast_to(x, (3, 4)))), [r.standard_normal(4)])),
    Case("positive_stddev", _unary(ad.positive_stddev, lambda r, s: r.standard_normal(s))),
    Case("gaussian_sample", lambda r: (
        (lambda m, s: _scalar(ad.gaussian_sample(m, ad.softplus(s), np.linspace(-1, 1, 12).reshape(3, 4)))),
        [r.standard_normal((3, 4)), r.standard_normal((3, 4))])),
    Case("gaussian_log_density", lambda r: ((lambda x, m, s: _scalar(ad.gaussian_log_density(x, m, s))),
                                            [r.standard_normal((3, 4)), r.standard_normal((3, 4)), _pos(r, (3, 4))])),
    Case("diagonal_gaussian_kl", lambda r: (
        (lambda a, b, c, d: _scalar(ad.diagonal_gaussian_kl(ad.GaussianParams(a, b), ad.GaussianParams(c, d)))),
        [r.standard_normal((3, 4)), _pos(r, (3, 4)), r.standard_normal((3, 4)), _pos(r, (3, 4))])),
    Case("gru_cell", _gru),
    Case("rssm_prior_step", _rssm_prior),
    Case("rssm_posterior_step", _rssm_posterior, STOCHASTIC_TOLERANCE),
    Case("elbo_loss", _elbo, STOCHASTIC_TOLERANCE),
    Case("imagine_return_rssm", _imagine_rssm),
    Case("imagine_return_linear", _imagine_linear),
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    tolerance: float
    instances: int

    @property
    def ok(self) -> bool:
        return self.worst < self.tolerance


def run_gradchecks(instances: int = 100, seed: int = 0, n_directions: int = 3,
                   names: tuple[str, ...] | None = None) -> list[CheckResult]:
    results = []
    for idx, case in enumerate(CASES):
        if names is not None and case.name not in names:
            continue
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, idx, i])
            fn, inputs = case.build(rng)
            worst = max(worst, ad.gradcheck(fn, inputs, rng, n_directions=n_directions))
        results.append(CheckResult(case.name, worst, case.tolerance, instances))
    return results


def format_results(results: list[CheckResult], seconds: float | None = None) -> str:
    lines = [f"{'check':<24} {'worst rel err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.worst:>14.3e}  {'ok' if r.ok else 'FAIL'} (< {r.tolerance:g})")
    if seconds is not None:
        lines.append(f"{len(results)} checks in {seconds:.1f}s")
    return "\n".join(lines)


def timed_gradchecks(**kwargs) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = run_gradchecks(**kwargs)
    return results, time.perf_counter() - start
