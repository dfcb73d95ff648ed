"""Experiment runner: training loop with the planner in the loop, evaluation,
planner comparison and the candidate-count ablation.

Everything a run does is a function of its config and seed. Environment
episodes, world-model batches, planner candidates and exploration noise all
draw from streams keyed by the run seed and the episode/step counters, so the
CSV record is reproducible bit for bit (set ``wall_clock=False`` to also zero
the timing column).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .agents import (ActorCriticState, Policy, ValueFunction, init_policy, init_value, train_actor_critic)
from .config import ExperimentConfig, PlannerConfig
from .envs import make_env
from .models import RssmDynamics, true_model
from .nn import all_finite
from .optim import AdamState
from .planners import (add_exploration_noise, optimize_grad_mpc, plan_cem, plan_grad_mpc, plan_policy_grad_mpc,
                       worker_count)
from .replay import EpisodeRecord, ReplayBuffer
from .storage import read_container, write_container
from .world_model import (LatentState, RssmConfig, init_rssm, posterior_step, save_rssm, train_world_model,
                          zero_state)

CSV_HEADER = ("seed", "episode", "steps", "return_mean", "return_std", "seconds")

# Offsets separating the environment seeds used for different purposes.
_TRAIN_ENV, _EVAL_ENV = 0, 1


class RunError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalRow:
    seed: int
    episode: int
    steps: int
    return_mean: float
    return_std: float
    seconds: float

    def cells(self) -> list[str]:
        return [str(self.seed), str(self.episode), str(self.steps), _fmt(self.return_mean),
                _fmt(self.return_std), _fmt(self.seconds)]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class RunRecord:
    rows: list[EvalRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def for_seed(self, seed: int) -> list[EvalRow]:
        return [r for r in self.rows if r.seed == seed]

    def final_returns(self) -> dict[int, float]:
        out = {}
        for r in self.rows:
            out[r.seed] = r.return_mean
        return out

    def check(self) -> list[str]:
        """Invariant violations (empty when the record is sound)."""
        problems = []
        last: dict[int, int] = {}
        for r in self.rows:
            if r.seed in last and r.steps <= last[r.seed]:
                problems.append(f"seed {r.seed}: steps not strictly increasing at episode {r.episode}")
            last[r.seed] = r.steps
            if not (math.isfinite(r.return_mean) and math.isfinite(r.return_std)):
                problems.append(f"seed {r.seed}: non-finite return at episode {r.episode}")
        return problems


def read_csv(path) -> RunRecord:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return RunRecord([EvalRow(int(a), int(b), int(c), float(d), float(e), float(f))
                          for a, b, c, d, e, f in reader])


# --- acting ---------------------------------------------------------------------


class Controller:
    """Turns observations into actions for one planner kind.

    With a learned model the controller keeps a filtered belief, updated with
    the posterior after every step; with the analytic model it reads the
    environment state directly.
    """

    def __init__(self, kind: str, env, planner_cfg: PlannerConfig, rssm=None, ac: ActorCriticState | None = None,
                 workers: int | None = None):
        self.kind, self.env, self.cfg = kind, env, planner_cfg
        self.rssm, self.ac, self.workers = rssm, ac, workers
        self.model = RssmDynamics(rssm) if rssm is not None else (true_model(env) if kind != "random" else None)
        self.belief = None

    def _observe(self, env_state, obs, prev_action):
        if self.rssm is None:
            self.belief = ad.Node(np.array(env_state.x, dtype=float))
            return
        prev = self.belief if self.belief is not None else zero_state(self.rssm.config)
        self.belief, _ = posterior_step(prev, prev_action, obs, self.rssm.as_constants(), noise=None)

    def begin(self, env_state, obs):
        self.belief = None
        self._observe(env_state, obs, np.zeros(self.env.spec.action_dim))

    def update(self, env_state, obs, action):
        self._observe(env_state, obs, action)

    def act(self, key: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        m = self.env.spec.action_dim
        if self.kind == "random":
            return rng.uniform(-1.0, 1.0, size=m)
        if self.kind == "grad-mpc":
            return plan_grad_mpc(self.belief, self.model, "reward", self.cfg, key, self.workers)
        if self.kind == "cem":
            return plan_cem(self.belief, self.model, "reward", self.cfg, key, self.workers)
        if self.kind == "policy":
            return np.clip(self.ac.policy(self.model.features(self.belief)).value, -1.0, 1.0)
        if self.kind == "policy-grad-mpc":
            return plan_policy_grad_mpc(self.belief, self.model, self.ac.policy, self.ac.value, self.cfg)
        raise ValueError(f"unknown planner kind {self.kind!r}")


def run_episode(env, controller: Controller, env_seed: int, key: Sequence[int], explore: float = 0.0,
                rng: np.random.Generator | None = None) -> EpisodeRecord:
    """One episode; ``explore`` adds clipped Gaussian noise to every executed action."""
    rng = rng if rng is not None else np.random.default_rng([*key, 0xAC7])
    state, obs = env.reset(env_seed)
    controller.begin(state, obs)
    observations, actions, rewards = [], [], []
    done, t = False, 0
    while not done:
        a = controller.act((*key, t), rng)
        if explore > 0:
            a = add_exploration_noise(a, explore, rng)
        a = np.clip(a, -1.0, 1.0)
        observations.append(obs)
        actions.append(a)
        state, obs, reward, done = env.step(state, a)
        rewards.append(reward)
        if not done:
            controller.update(state, obs, a)
        t += 1
    return EpisodeRecord(np.array(observations), np.array(actions), np.array(rewards))


def evaluate(env, controller: Controller, seed: int, episode: int, n_episodes: int) -> np.ndarray:
    """Noise-free returns on the evaluation episodes attached to (seed, episode)."""
    returns = []
    for k in range(n_episodes):
        env_seed = _env_seed(seed, _EVAL_ENV, k)
        ep = run_episode(env, controller, env_seed, (seed, 2, episode, k))
        returns.append(float(np.sum(ep.rewards)))
    return np.array(returns)


def random_baseline(env, seed: int, n_episodes: int) -> np.ndarray:
    """Returns of the uniform random policy on the evaluation episodes of ``seed``."""
    return evaluate(env, Controller("random", env, PlannerConfig()), seed, 0, n_episodes)


def _env_seed(seed: int, purpose: int, index: int) -> int:
    return (int(seed) * 4 + purpose) * 1_000_003 + int(index)


# --- training ---------------------------------------------------------------------


def _experiment_env(cfg: ExperimentConfig):
    return make_env(cfg.env, cfg.episode_length, cfg.action_repeat)


def _filtered_starts(rssm, obs, act, rng) -> LatentState:
    """Posterior states along replayed chunks, flattened to one detached batch."""
    batch, length = obs.shape[:2]
    model = rssm.as_constants()
    state = zero_state(rssm.config, (batch,))
    prev = np.concatenate([np.zeros((batch, 1, act.shape[-1])), act[:, :-1]], axis=1)
    hs, ss, ms, sds = [], [], [], []
    for t in range(length):
        state, _ = posterior_step(state, prev[:, t], obs[:, t], model, noise=None)
        hs.append(state.h.value)
        ss.append(state.s.value)
        ms.append(state.dist.mean.value)
        sds.append(state.dist.stddev.value)

    def flat(xs):
        return ad.Node(np.stack(xs, axis=1).reshape(batch * length, -1))

    return LatentState(flat(hs), flat(ss), ad.GaussianParams(flat(ms), flat(sds)))


def _needs_actor_critic(kind: str) -> bool:
    return kind in ("policy", "policy-grad-mpc")


def _init_actor_critic(cfg: ExperimentConfig, feature_dim: int, action_dim: int, seed: int) -> ActorCriticState:
    rng = np.random.default_rng([seed, 0xAC])
    h = cfg.train.hidden_size
    return ActorCriticState(init_policy(rng, feature_dim, action_dim, h), init_value(rng, feature_dim, h))


def save_actor_critic(path, ac: ActorCriticState, meta: dict | None = None) -> None:
    arrays = {**ac.policy.params, **ac.value.params}
    info = dict(meta or {}, policy_layers=ac.policy.n_layers, value_layers=ac.value.n_layers)
    write_container(path, arrays, kind="actor_critic", meta=info)


def load_actor_critic(path) -> ActorCriticState:
    arrays, manifest = read_container(path, kind="actor_critic")
    meta = manifest["meta"]
    pol = {k: v for k, v in arrays.items() if k.startswith("policy/")}
    val = {k: v for k, v in arrays.items() if k.startswith("value/")}
    return ActorCriticState(Policy(pol, meta["policy_layers"]), ValueFunction(val, meta["value_layers"]))


def _write(path: Path, text: str, run_id: str) -> None:
    try:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as err:
        raise RunError(f"run {run_id}: cannot write {path}: {err}") from err


def run_seed(cfg: ExperimentConfig, seed: int, out_dir=None, workers: int | None = None) -> RunRecord:
    """Full training run for one seed; writes ``seed_<seed>.csv`` and checkpoints when ``out_dir`` is set."""
    run_id = f"{cfg.env}/{cfg.planner}/seed{seed}"
    env = _experiment_env(cfg)
    ep_len = env.spec.episode_length
    if cfg.total_steps < cfg.seed_episodes * ep_len:
        raise ValueError("total_steps must cover the seed episodes")
    if cfg.model == "true" and _needs_actor_critic(cfg.planner):
        raise ValueError("policy planners need a learned model")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise RunError(f"run {run_id}: cannot create {out}: {err}") from err

    pcfg = dataclasses.replace(cfg.planner_cfg, seed=seed)
    rng = np.random.default_rng([seed, 0x7EA])
    buffer = ReplayBuffer(cfg.train.experience_size)
    learned = cfg.model == "learned" and cfg.planner != "random"
    rssm = init_rssm(RssmConfig.from_train(cfg.train, env.spec.obs_dim, env.spec.action_dim), rng) if learned else None
    adam = AdamState()
    ac = None
    if _needs_actor_critic(cfg.planner):
        ac = _init_actor_critic(cfg, cfg.train.belief_size + cfg.train.state_size, env.spec.action_dim, seed)
    record = RunRecord()
    started = time.perf_counter()

    def controller():
        return Controller(cfg.planner, env, pcfg, rssm, ac, workers)

    def emit(episode: int, steps: int):
        returns = evaluate(env, controller(), seed, episode, cfg.eval_episodes)
        seconds = time.perf_counter() - started if cfg.wall_clock else 0.0
        record.rows.append(EvalRow(seed, episode, steps, float(returns.mean()), float(returns.std()), seconds))
        if out is not None:
            _write(out / f"seed_{seed}.csv", record.to_csv(), run_id)

    random_ctl = Controller("random", env, pcfg)
    for e in range(cfg.seed_episodes):
        buffer.add(run_episode(env, random_ctl, _env_seed(seed, _TRAIN_ENV, e), (seed, 0, e)))
    steps, episode = cfg.seed_episodes * ep_len, cfg.seed_episodes
    evaluated_at = None
    while steps + ep_len <= cfg.total_steps:
        if learned and len(buffer):
            rssm, adam, trace = train_world_model(buffer, rssm, cfg.train, rng, adam)
            if not all_finite(rssm.arrays()):
                raise RunError(f"run {run_id}: world model diverged at episode {episode}")
            if ac is not None:
                for _ in range(cfg.train.collect_interval):
                    obs, act, _ = buffer.sample(cfg.train.batch_size, cfg.train.chunk_length, rng)
                    starts = _filtered_starts(rssm, obs, act, rng)
                    ac, _ = train_actor_critic(RssmDynamics(rssm), starts, ac, cfg.train)
        ep = run_episode(env, controller(), _env_seed(seed, _TRAIN_ENV, episode), (seed, 1, episode),
                         explore=pcfg.exploration_noise)
        buffer.add(ep)
        steps += ep_len
        episode += 1
        if (episode - cfg.seed_episodes) % cfg.eval_interval == 0:
            emit(episode, steps)
            evaluated_at = episode
    if evaluated_at != episode:
        emit(episode, steps)

    if out is not None:
        meta = {"seed": seed, "episode": episode, "steps": steps}
        try:
            if rssm is not None:
                save_rssm(out / f"seed_{seed}_rssm.gpck", rssm, meta)
            if ac is not None:
                save_actor_critic(out / f"seed_{seed}_actor_critic.gpck", ac, meta)
        except OSError as err:
            raise RunError(f"run {run_id}: checkpoint write failed: {err}") from err
    return record


def _run_seed_job(args):
    cfg, seed, out_dir, workers = args
    return run_seed(cfg, seed, out_dir, workers)


def run_training(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> RunRecord:
    """Run every seed of ``cfg`` and merge the records (rows ordered by seed).

    Seeds run as separate processes when more than one worker is allowed;
    leftover workers go to candidate evaluation inside each seed.
    """
    workers = worker_count() if workers is None else max(1, workers)
    n_proc = min(workers, len(cfg.seeds))
    inner = max(1, workers // n_proc)
    jobs = [(cfg, s, out_dir, inner) for s in cfg.seeds]
    if n_proc > 1:
        with ProcessPoolExecutor(n_proc) as pool:
            records = list(pool.map(_run_seed_job, jobs))
    else:
        records = [_run_seed_job(j) for j in jobs]
    merged = RunRecord([row for rec in records for row in rec.rows])
    if out_dir is not None:
        _write(Path(out_dir) / "run.csv", merged.to_csv(), f"{cfg.env}/{cfg.planner}")
    return merged


# --- comparison -------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    mean: float
    std: float
    rank: int
    per_seed: tuple[float, ...]


@dataclass
class ComparisonReport:
    env: str
    rows: list[ComparisonRow]

    def table(self) -> str:
        width = max(len(r.label) for r in self.rows)
        lines = [f"{'rank':>4}  {'planner':<{width}}  return"]
        for r in sorted(self.rows, key=lambda r: (r.rank, r.label)):
            lines.append(f"{r.rank:>4}  {r.label:<{width}}  {r.mean:.4f} +- {r.std:.4f}")
        return "\n".join(lines)


def competition_ranks(scores: Sequence[float]) -> list[int]:
    """Rank 1 for the highest score; equal scores share a rank (1, 2, 2, 4)."""
    return [1 + sum(1 for other in scores if other > s) for s in scores]


def compare_planners(configs: Sequence[ExperimentConfig], labels: Sequence[str] | None = None,
                     out_dir=None, workers: int | None = None) -> ComparisonReport:
    """Train/evaluate each config over its seeds and rank them by mean final return."""
    if not configs:
        raise ValueError("need at least one config")
    envs = {c.env for c in configs}
    if len(envs) != 1:
        raise ValueError(f"configs use different environments: {sorted(envs)}")
    budgets = {(c.total_steps, c.episode_length, c.action_repeat) for c in configs}
    if len(budgets) != 1:
        raise ValueError("configs use different step budgets")
    labels = list(labels) if labels is not None else [c.planner for c in configs]
    finals = []
    for i, (cfg, label) in enumerate(zip(configs, labels)):
        sub = None if out_dir is None else Path(out_dir) / f"{i}_{label}"
        record = run_training(cfg, sub, workers)
        finals.append(tuple(record.final_returns()[s] for s in cfg.seeds))
    means = [float(np.mean(f)) for f in finals]
    ranks = competition_ranks(means)
    rows = [ComparisonRow(label, m, float(np.std(f)), r, f) for label, m, f, r in zip(labels, means, finals, ranks)]
    return ComparisonReport(envs.pop(), rows)


# --- candidate ablation ---------------------------------------------------------------


@dataclass
class AblationReport:
    candidates: tuple[int, ...]
    medians: tuple[float, ...]
    returns: dict  # J -> per-seed returns
    monotone: bool


def plan_return(env, model, planner_cfg: PlannerConfig, env_seed: int, workers: int | None = None) -> float:
    """Environment return of the best Grad-MPC plan, executed open loop from ``reset(env_seed)``."""
    state, obs = env.reset(env_seed)
    result = optimize_grad_mpc(ad.Node(np.array(state.x, dtype=float)), model, planner_cfg, "reward", (), workers)
    total = 0.0
    for a in result.best.actions:
        state, obs, reward, done = env.step(state, a)
        total += reward
        if done:
            break
    return total


def ablate_candidates(cfg: ExperimentConfig, candidate_counts: Sequence[int], seeds: Sequence[int] = range(20),
                      workers: int | None = None) -> AblationReport:
    """Median open-loop plan return per candidate count on the analytic model of ``cfg.env``.

    Each seed uses the same planner seed for every count, so a smaller
    candidate set is always the prefix of a larger one.
    """
    counts = tuple(int(j) for j in candidate_counts)
    if list(counts) != sorted(counts):
        raise ValueError("candidate counts must be sorted ascending")
    env = _experiment_env(cfg)
    model = true_model(env)
    returns = {}
    for j in counts:
        per_seed = []
        for s in seeds:
            pcfg = dataclasses.replace(cfg.planner_cfg, candidates=j, seed=int(s))
            per_seed.append(plan_return(env, model, pcfg, _env_seed(s, _EVAL_ENV, 0), workers))
        returns[j] = tuple(per_seed)
    medians = tuple(float(np.median(returns[j])) for j in counts)
    monotone = all(b >= a for a, b in zip(medians, medians[1:]))
    return AblationReport(counts, medians, returns, monotone)
