"""Dense-layer helpers over named parameter dicts."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0):
    limit = gain * np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out)), np.zeros(n_out)


def init_mlp(rng: np.random.Generator, prefix: str, sizes: list[int], out_gain: float = 1.0) -> dict:
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
        gain = out_gain if i == len(sizes) - 1 else 1.0
        params[f"{prefix}/w{i}"], params[f"{prefix}/b{i}"] = init_dense(rng, n_in, n_out, gain)
    return params


def mlp(params: Mapping, prefix: str, x, n_layers: int,
        activation: Callable = ad.relu, output: Callable | None = None) -> ad.Node:
    for i in range(1, n_layers + 1):
        x = ad.linear(x, params[f"{prefix}/w{i}"], params[f"{prefix}/b{i}"])
        if i < n_layers:
            x = activation(x)
    return output(x) if output is not None else x


def as_variables(params: Mapping[str, np.ndarray]) -> dict[str, ad.Node]:
    return {k: ad.Node(np.asarray(v, dtype=ad.DTYPE), requires_grad=True) for k, v in params.items()}


def as_constants(params: Mapping[str, np.ndarray]) -> dict[str, ad.Node]:
    return {k: v if isinstance(v, ad.Node) else ad.Node(np.asarray(v, dtype=ad.DTYPE))
            for k, v in params.items()}


def collect_grads(nodes: Mapping[str, ad.Node], grads: Mapping[ad.Node, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: grads.get(n, np.zeros(n.shape)) for k, n in nodes.items()}


def all_finite(params: Mapping[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())
