"""Recurrent state-space model: GRU belief path, Gaussian state path, observation/reward heads.

Time alignment: an episode row ``t`` is ``(o_t, a_t, r_t)`` with ``a_t`` chosen
after seeing ``o_t``. Filtering uses ``q(s_t | h_t, o_t)`` with
``h_t = GRU(h_{t-1}, [s_{t-1}, a_{t-1}])``; the first step starts from the zero
state and a zero action. The reward head on state ``t`` predicts ``r_{t-1}``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import GaussianParams, Node
from .config import TrainConfig
from .nn import as_constants, as_variables, collect_grads, init_dense, init_mlp, mlp
from .optim import AdamState, adam_step, clip_by_global_norm
from .replay import ReplayBuffer
from .storage import read_container, write_container


@dataclass(frozen=True)
class RssmConfig:
    obs_dim: int
    action_dim: int
    belief_size: int = 64
    state_size: int = 16
    hidden_size: int = 64
    embedding_size: int = 64
    min_stddev: float = 1e-4

    @classmethod
    def from_train(cls, train: TrainConfig, obs_dim: int, action_dim: int) -> "RssmConfig":
        return cls(obs_dim, action_dim, train.belief_size, train.state_size, train.hidden_size,
                   train.embedding_size, train.min_stddev)


@dataclass
class RssmParams:
    """Model configuration plus named tensors (arrays, or Nodes while differentiating)."""

    config: RssmConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.value if isinstance(v, Node) else v) for k, v in self.tensors.items()}

    def as_variables(self) -> "RssmParams":
        return RssmParams(self.config, as_variables(self.arrays()))

    def as_constants(self) -> "RssmParams":
        return RssmParams(self.config, as_constants(self.tensors))

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "RssmParams":
        return RssmParams(self.config, dict(tensors))


def _shapes(cfg: RssmConfig) -> dict[str, tuple[int, ...]]:
    b, s, hid, e = cfg.belief_size, cfg.state_size, cfg.hidden_size, cfg.embedding_size
    shapes = {
        "gru/w_x": (s + cfg.action_dim, 3 * b), "gru/w_h": (b, 3 * b),
        "gru/b_x": (3 * b,), "gru/b_h": (3 * b,),
    }
    for prefix, sizes in {
        "prior": [b, hid, 2 * s],
        "encoder": [cfg.obs_dim, hid, e],
        "posterior": [b + e, hid, 2 * s],
        "observation": [b + s, hid, cfg.obs_dim],
        "reward": [b + s, hid, 1],
    }.items():
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
            shapes[f"{prefix}/w{i}"] = (n_in, n_out)
            shapes[f"{prefix}/b{i}"] = (n_out,)
    return shapes


def init_rssm(cfg: RssmConfig, rng: np.random.Generator) -> RssmParams:
    b, s = cfg.belief_size, cfg.state_size
    t = {}
    t["gru/w_x"], t["gru/b_x"] = init_dense(rng, s + cfg.action_dim, 3 * b)
    t["gru/w_h"], t["gru/b_h"] = init_dense(rng, b, 3 * b)
    t.update(init_mlp(rng, "prior", [b, cfg.hidden_size, 2 * s]))
    t.update(init_mlp(rng, "encoder", [cfg.obs_dim, cfg.hidden_size, cfg.embedding_size]))
    t.update(init_mlp(rng, "posterior", [b + cfg.embedding_size, cfg.hidden_size, 2 * s]))
    t.update(init_mlp(rng, "observation", [b + s, cfg.hidden_size, cfg.obs_dim]))
    t.update(init_mlp(rng, "reward", [b + s, cfg.hidden_size, 1]))
    assert {k: v.shape for k, v in t.items()} == _shapes(cfg)
    return RssmParams(cfg, t)


def zero_rssm(cfg: RssmConfig) -> RssmParams:
    return RssmParams(cfg, {k: np.zeros(shape) for k, shape in _shapes(cfg).items()})


@dataclass
class LatentState:
    h: Node  # deterministic belief (..., belief_size)
    s: Node  # stochastic state (..., state_size)
    dist: GaussianParams  # distribution that produced s

    @property
    def batch_shape(self) -> tuple:
        return self.h.shape[:-1]

    def features(self) -> Node:
        return ad.concat([self.h, self.s], axis=-1)

    def detach(self) -> "LatentState":
        return LatentState(ad.detach(self.h), ad.detach(self.s),
                           GaussianParams(ad.detach(self.dist.mean), ad.detach(self.dist.stddev)))

    def expand(self, n: int) -> "LatentState":
        """Replicate an unbatched (or batch-1) state ``n`` times along a new leading axis."""
        def rep(x):
            v = x.value.reshape(-1)
            return ad.Node(np.repeat(v[None, :], n, axis=0))
        return LatentState(rep(self.h), rep(self.s), GaussianParams(rep(self.dist.mean), rep(self.dist.stddev)))

    def index(self, i) -> "LatentState":
        return LatentState(self.h[i], self.s[i], GaussianParams(self.dist.mean[i], self.dist.stddev[i]))


def zero_state(cfg: RssmConfig, batch_shape: tuple = ()) -> LatentState:
    h = ad.Node(np.zeros(batch_shape + (cfg.belief_size,)))
    s = ad.Node(np.zeros(batch_shape + (cfg.state_size,)))
    dist = GaussianParams(ad.Node(np.zeros(s.shape)), ad.Node(np.ones(s.shape)))
    return LatentState(h, s, dist)


def _check_action(action: Node, cfg: RssmConfig, batch_shape: tuple) -> None:
    if action.shape != batch_shape + (cfg.action_dim,):
        raise ad.ShapeError("rssm_step", [batch_shape + (cfg.action_dim,), action.shape], "action")
    if np.any(np.abs(action.value) > 1.0 + 1e-12):
        raise ValueError("action outside [-1, 1]")


def _belief_step(prev: LatentState, action: Node, model: RssmParams) -> Node:
    x = ad.concat([prev.s, action], axis=-1)
    return ad.gru_cell(x, prev.h, model["gru/w_x"], model["gru/w_h"], model["gru/b_x"], model["gru/b_h"])


def _gaussian_head(model: RssmParams, prefix: str, x) -> GaussianParams:
    out = mlp(model.tensors, prefix, x, 2)
    s = model.config.state_size
    return GaussianParams(out[..., :s], ad.positive_stddev(out[..., s:], model.config.min_stddev))


def prior_head(model: RssmParams, h) -> GaussianParams:
    return _gaussian_head(model, "prior", h)


def posterior_head(model: RssmParams, h, embedding) -> GaussianParams:
    return _gaussian_head(model, "posterior", ad.concat([h, embedding], axis=-1))


def encode(model: RssmParams, obs) -> Node:
    return mlp(model.tensors, "encoder", obs, 2, output=ad.relu)


def observation_mean(model: RssmParams, features) -> Node:
    return mlp(model.tensors, "observation", features, 2)


def reward_mean(model: RssmParams, features) -> Node:
    return mlp(model.tensors, "reward", features, 2)[..., 0]


def _draw(dist: GaussianParams, noise) -> Node:
    if noise is None:
        return dist.mean
    return ad.gaussian_sample(dist.mean, dist.stddev, noise)


def prior_step(prev: LatentState, action, model: RssmParams, noise=None) -> LatentState:
    """Advance the belief with the transition and draw ``s`` from ``p(s | h)``.

    ``noise=None`` takes the mean instead of a sample.
    """
    action = ad._wrap(action)
    _check_action(action, model.config, prev.batch_shape)
    h = _belief_step(prev, action, model)
    dist = prior_head(model, h)
    return LatentState(h, _draw(dist, noise), dist)


def posterior_step(prev: LatentState, action, obs, model: RssmParams,
                   noise=None) -> tuple[LatentState, GaussianParams]:
    """Like :func:`prior_step` but draws ``s`` from ``q(s | h, o)``; also returns the prior."""
    action, obs = ad._wrap(action), ad._wrap(obs)
    _check_action(action, model.config, prev.batch_shape)
    if obs.shape != prev.batch_shape + (model.config.obs_dim,):
        raise ad.ShapeError("posterior_step", [prev.batch_shape + (model.config.obs_dim,), obs.shape], "obs")
    h = _belief_step(prev, action, model)
    prior = prior_head(model, h)
    post = posterior_head(model, h, encode(model, obs))
    return LatentState(h, _draw(post, noise), post), prior


@dataclass
class ElboTerms:
    total: Node
    recon_obs: Node
    recon_reward: Node
    kl: Node  # mean KL before the free-nats clamp
    kl_loss: Node  # clamped KL term that enters the total

    def values(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).value) for f in dataclasses.fields(self)}


def elbo_loss(observations, actions, rewards, model: RssmParams, free_nats: float = 3.0,
              noise=None) -> ElboTerms:
    """Negative ELBO on a batch of chunks.

    Inputs are shaped (B, L, o), (B, L, a), (B, L). Observation and reward
    likelihoods are unit-variance Gaussians (normalisation constant included).
    The KL term enters as ``max(KL_t, free_nats)`` per sequence element, so
    elements below the threshold contribute no gradient. ``noise`` is the
    (B, L, state) reparameterisation noise; ``None`` uses posterior means.
    """
    observations = np.asarray(observations, dtype=ad.DTYPE)
    actions = np.asarray(actions, dtype=ad.DTYPE)
    rewards = np.asarray(rewards, dtype=ad.DTYPE)
    if observations.ndim != 3 or actions.ndim != 3 or rewards.ndim != 2:
        raise ad.ShapeError("elbo_loss", [observations.shape, actions.shape, rewards.shape])
    batch, length = rewards.shape
    if length < 2:
        raise ValueError("elbo_loss needs chunks of length >= 2")
    if batch < 1:
        raise ValueError("elbo_loss needs a nonempty batch")
    if observations.shape[:2] != (batch, length) or actions.shape[:2] != (batch, length):
        raise ad.ShapeError("elbo_loss", [observations.shape, actions.shape, rewards.shape])

    cfg = model.config
    state = zero_state(cfg, (batch,))
    prev_actions = np.concatenate([np.zeros((batch, 1, cfg.action_dim)), actions[:, :-1]], axis=1)
    hs, posts = [], []
    for t in range(length):
        act = ad.Node(prev_actions[:, t])
        _check_action(act, cfg, (batch,))
        h = _belief_step(state, act, model)
        post = posterior_head(model, h, encode(model, observations[:, t]))
        state = LatentState(h, _draw(post, None if noise is None else noise[:, t]), post)
        hs.append(h)
        posts.append(state)
    h_seq = ad.stack(hs, axis=1)
    s_seq = ad.stack([p.s for p in posts], axis=1)
    q = GaussianParams(ad.stack([p.dist.mean for p in posts], axis=1),
                       ad.stack([p.dist.stddev for p in posts], axis=1))
    p = prior_head(model, h_seq)
    features = ad.concat([h_seq, s_seq], axis=-1)
    ones_o = np.ones(observations.shape)
    recon_obs = -ad.mean(ad.gaussian_log_density(observations, observation_mean(model, features), ones_o))
    pred_r = reward_mean(model, features[:, 1:])[..., None]
    recon_reward = -ad.mean(ad.gaussian_log_density(rewards[:, :-1, None], pred_r, np.ones((batch, length - 1, 1))))
    kl = ad.diagonal_gaussian_kl(q, p)  # (B, L)
    kl_term = ad.mean(ad.maximum(kl, free_nats))
    total = recon_obs + recon_reward + kl_term
    return ElboTerms(total, recon_obs, recon_reward, ad.mean(kl), kl_term)


def filter_episode(observations, prev_actions, model: RssmParams, noise=None) -> list[LatentState]:
    """Fold :func:`posterior_step` over a sequence, starting from the zero state.

    ``prev_actions[t]`` is the action taken *before* ``observations[t]`` (use a
    zero action for the first step). Returns ``T + 1`` states, the zero state
    first.
    """
    observations = np.asarray(observations, dtype=ad.DTYPE).reshape(-1, model.config.obs_dim)
    prev_actions = np.asarray(prev_actions, dtype=ad.DTYPE).reshape(-1, model.config.action_dim)
    if len(observations) != len(prev_actions):
        raise ValueError(f"length mismatch: {len(observations)} observations, {len(prev_actions)} actions")
    states = [zero_state(model.config)]
    for t in range(len(observations)):
        eps = None if noise is None else noise[t]
        state, _ = posterior_step(states[-1], prev_actions[t], observations[t], model, eps)
        states.append(state)
    return states


def train_world_model(buffer: ReplayBuffer, model: RssmParams, cfg: TrainConfig, rng: np.random.Generator,
                      adam: AdamState | None = None, steps: int | None = None):
    """Run ``cfg.collect_interval`` (or ``steps``) Adam steps on sampled chunks.

    Returns ``(model, adam_state, trace)`` where ``trace`` holds one dict of
    loss components per step.
    """
    steps = cfg.collect_interval if steps is None else steps
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    adam = adam or AdamState()
    params = model.arrays()
    trace = []
    for _ in range(steps):
        obs, act, rew = buffer.sample(cfg.batch_size, cfg.chunk_length, rng)
        noise = rng.standard_normal((cfg.batch_size, cfg.chunk_length, model.config.state_size))
        nodes = as_variables(params)
        terms = elbo_loss(obs, act, rew, RssmParams(model.config, nodes), cfg.free_nats, noise)
        grads = collect_grads(nodes, ad.backward(terms.total))
        grads, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
        params, adam = adam_step(params, grads, adam, cfg.learning_rate, cfg.adam_epsilon)
        record = terms.values()
        record["grad_norm"] = norm
        trace.append(record)
    return model.replace(params), adam, trace


def save_rssm(path, model: RssmParams, meta: dict | None = None) -> None:
    info = dict(meta or {})
    info["rssm_config"] = dataclasses.asdict(model.config)
    info["gru_gate_order"] = list(ad.GRU_GATE_ORDER)
    write_container(path, model.arrays(), kind="rssm", meta=info)


def load_rssm(path) -> RssmParams:
    arrays, manifest = read_container(path, kind="rssm")
    meta = manifest["meta"]
    if tuple(meta.get("gru_gate_order", ad.GRU_GATE_ORDER)) != ad.GRU_GATE_ORDER:
        raise ValueError("checkpoint uses a different GRU gate order")
    cfg = RssmConfig(**meta["rssm_config"])
    expected = _shapes(cfg)
    if {k: v.shape for k, v in arrays.items()} != expected:
        raise ValueError("checkpoint tensors do not match the stored configuration")
    return RssmParams(cfg, arrays)
