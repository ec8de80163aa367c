"""Deterministic synthetic event process with real spatial structure.

Each node's next event is, with probability ``coupling``, a fixed function of
its neighborhood: one plus the modal class among its neighbors (ties to the
lowest class), modulo d. With probability ``noise`` it is uniformly random,
and otherwise the node repeats its own class. A model that cannot see
neighbor states cannot resolve the coupling branch, which is what makes this
a meaningful benchmark for graph-aware predictors.

Generation draws from one seeded generator in a fixed order: Erdos-Renyi
edge coins (when that topology is chosen), the initial class vector, then per
step one uniform vector ``u`` followed by one random class vector ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .graph import build_host_graph
from .numerics import Matrix
from .pipeline import EventDataset

__all__ = ["SynthConfig", "generate", "bayes_rate", "topology_edges"]

TOPOLOGIES = ("ring", "grid", "erdos-renyi")


@dataclass
class SynthConfig:
    n: int = 30
    topology: str = "ring"
    p: float = 0.15  # edge probability for erdos-renyi
    d: int = 5
    T: int = 500
    coupling: float = 0.9
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise InputError(
                f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}"
            )
        if self.n < 1 or self.d < 2 or self.T < 1:
            raise InputError("need n >= 1, d >= 2, T >= 1")
        for name, value in (("coupling", self.coupling), ("noise", self.noise), ("p", self.p)):
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{name} must be in [0, 1], got {value}")
        if self.coupling + self.noise > 1.0:
            raise InputError(
                f"coupling + noise must be <= 1, got {self.coupling + self.noise}"
            )


def topology_edges(config: SynthConfig, rng: np.random.Generator) -> list[tuple[str, str]]:
    """Edge list for the configured topology over nodes n000, n001, ..."""
    n = config.n
    name = [f"n{i:03d}" for i in range(n)]
    edges: list[tuple[str, str]] = []
    if config.topology == "ring":
        if n == 2:
            edges.append((name[0], name[1]))
        elif n > 2:
            edges = [(name[i], name[(i + 1) % n]) for i in range(n)]
    elif config.topology == "grid":
        side = math.isqrt(n)
        if side * side < n:
            side += 1
        for i in range(n):
            r, c = divmod(i, side)
            right = i + 1
            below = i + side
            if c + 1 < side and right < n:
                edges.append((name[i], name[right]))
            if below < n:
                edges.append((name[i], name[below]))
    else:  # erdos-renyi
        coins = rng.random((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                if coins[i, j] < config.p:
                    edges.append((name[i], name[j]))
    return edges


def generate(config: SynthConfig) -> EventDataset:
    """Run the process for T steps and package it as a one-hot dataset."""
    rng = np.random.default_rng(config.seed)
    edges = topology_edges(config, rng)
    node_ids = [f"n{i:03d}" for i in range(config.n)]
    graph = build_host_graph(edges, node_ids, K=2)
    adj = graph.adjacency.data
    neighbors = [np.flatnonzero(adj[i]) for i in range(config.n)]

    n, d = config.n, config.d
    x = rng.integers(0, d, size=n)
    states = [x.copy()]
    for _ in range(config.T - 1):
        u = rng.random(n)
        r = rng.integers(0, d, size=n)
        nxt = np.empty(n, dtype=np.int64)
        for i in range(n):
            if u[i] < config.coupling:
                pool = x[neighbors[i]] if neighbors[i].size else x[i : i + 1]
                modal = int(np.bincount(pool, minlength=d).argmax())
                nxt[i] = (modal + 1) % d
            elif u[i] < config.coupling + config.noise:
                nxt[i] = r[i]
            else:
                nxt[i] = x[i]
        x = nxt
        states.append(x.copy())

    frames = []
    for state in states:
        frame = np.zeros((n, d))
        frame[np.arange(n), state] = 1.0
        frames.append(Matrix(frame))
    return EventDataset(
        graph=graph,
        vocabulary=tuple(range(d)),
        frames=frames,
        k_merge=1,
        extra_meta={
            "bayes_rate": bayes_rate(config),
            "topology": config.topology,
            "coupling": config.coupling,
            "noise": config.noise,
            "seed": config.seed,
        },
    )


def bayes_rate(config: SynthConfig) -> float:
    """Best achievable single-step accuracy knowing the generative rule.

    An observer who sees every node's current state can predict the outcome
    of the non-noise branches exactly and is wrong only when the noise branch
    lands on a different class: 1 - noise * (d - 1) / d.
    """
    return 1.0 - config.noise * (config.d - 1) / config.d
