"""Synthetic linear-Gaussian sequence data for exercising world-model training."""

from __future__ import annotations

import numpy as np

from .replay import EpisodeRecord, ReplayBuffer


def linear_gaussian_episodes(n_episodes: int, length: int, rng: np.random.Generator, obs_dim: int = 3,
                             action_dim: int = 2, latent_dim: int = 2, noise: float = 0.1,
                             obs_scale: float = 3.0) -> list[EpisodeRecord]:
    """Episodes of ``z' = A z + B a + w``, ``o = C z + v``, ``r = c . z`` under uniform random actions.

    The system matrices are drawn once from ``rng`` and shared by all episodes;
    ``A`` is scaled to spectral radius 0.9 so sequences stay bounded.
    ``obs_scale`` multiplies the observation matrix; at the default the
    observation variance is several times the unit likelihood variance.
    """
    A = rng.standard_normal((latent_dim, latent_dim))
    A *= 0.9 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-8)
    B = 0.5 * rng.standard_normal((latent_dim, action_dim))
    C = obs_scale * rng.standard_normal((obs_dim, latent_dim))
    c = rng.standard_normal(latent_dim)
    episodes = []
    for _ in range(n_episodes):
        z = rng.standard_normal(latent_dim)
        obs, act, rew = [], [], []
        for _ in range(length):
            a = rng.uniform(-1.0, 1.0, action_dim)
            obs.append(C @ z + noise * rng.standard_normal(obs_dim))
            act.append(a)
            rew.append(c @ z)
            z = A @ z + B @ a + noise * rng.standard_normal(latent_dim)
        episodes.append(EpisodeRecord(np.array(obs), np.array(act), np.array(rew)))
    return episodes


def linear_gaussian_buffer(n_episodes: int, length: int, seed: int = 0, **kwargs) -> ReplayBuffer:
    buffer = ReplayBuffer(max(n_episodes, 1))
    for ep in linear_gaussian_episodes(n_episodes, length, np.random.default_rng([seed, 0x11]), **kwargs):
        buffer.add(ep)
    return buffer
