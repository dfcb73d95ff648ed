"""Episode records, the bounded episodic replay buffer and episode files."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import as_tensor
from .storage import read_container, write_container


@dataclass(frozen=True)
class EpisodeRecord:
    """Row ``t`` holds observation ``o_t``, the action taken after seeing it, and the reward it earned."""

    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, action_dim), in [-1, 1]
    rewards: np.ndarray  # (T,)

    def __post_init__(self):
        obs, act, rew = (as_tensor(x) for x in (self.observations, self.actions, self.rewards))
        if obs.ndim != 2 or act.ndim != 2 or rew.ndim != 1:
            raise ValueError("expected observations (T, o), actions (T, a), rewards (T,)")
        if not len(obs) == len(act) == len(rew):
            raise ValueError(f"length mismatch: {len(obs)}, {len(act)}, {len(rew)}")
        if np.any(np.abs(act) > 1.0):
            raise ValueError("actions must lie in [-1, 1]")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)
        object.__setattr__(self, "rewards", rew)

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """FIFO store of complete episodes.

    One writer and many readers: each sampling call works on a snapshot of the
    episode list taken under a lock.
    """

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: deque[EpisodeRecord] = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._episodes)

    def add(self, episode: EpisodeRecord) -> None:
        with self._lock:
            self._episodes.append(episode)

    def episodes(self) -> tuple[EpisodeRecord, ...]:
        with self._lock:
            return tuple(self._episodes)

    @property
    def num_steps(self) -> int:
        return sum(len(e) for e in self.episodes())

    def sample(self, batch_size: int, length: int, rng: np.random.Generator):
        """Uniformly sample ``batch_size`` chunks of ``length`` consecutive steps.

        Returns ``(observations, actions, rewards)`` shaped (B, L, o), (B, L, a), (B, L).
        """
        eligible = [e for e in self.episodes() if len(e) >= length]
        if not eligible:
            raise ValueError(f"no stored episode has length >= {length}")
        picks = rng.integers(len(eligible), size=batch_size)
        obs, act, rew = [], [], []
        for i in picks:
            ep = eligible[i]
            start = rng.integers(len(ep) - length + 1)
            sl = slice(start, start + length)
            obs.append(ep.observations[sl])
            act.append(ep.actions[sl])
            rew.append(ep.rewards[sl])
        return np.stack(obs), np.stack(act), np.stack(rew)


def save_episode(path, episode: EpisodeRecord, meta: dict | None = None) -> None:
    write_container(path, {"observations": episode.observations, "actions": episode.actions,
                           "rewards": episode.rewards}, kind="episode", meta=meta)


def load_episode(path) -> EpisodeRecord:
    arrays, _ = read_container(path, kind="episode")
    return EpisodeRecord(arrays["observations"], arrays["actions"], arrays["rewards"])
