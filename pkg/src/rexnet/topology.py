"""Communication graphs: Watts-Strogatz small world and Erdos-Renyi, always connected."""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class Topology:
    n: int
    adjacency: tuple[tuple[int, ...], ...]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Topology":
        adj: list[set[int]] = [set() for _ in range(n)]
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) outside [0, {n})")
            adj[i].add(j)
            adj[j].add(i)
        return cls(n, tuple(tuple(sorted(a)) for a in adj))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in self.adjacency[i] if i < j]

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def components(self) -> list[list[int]]:
        seen = [False] * self.n
        comps = []
        for start in range(self.n):
            if seen[start]:
                continue
            seen[start] = True
            comp, queue = [], deque([start])
            while queue:
                v = queue.popleft()
                comp.append(v)
                for w in self.adjacency[v]:
                    if not seen[w]:
                        seen[w] = True
                        queue.append(w)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return self.n <= 1 or len(self.components()) == 1

    def to_text(self) -> str:
        return "".join(f"{i} {j}\n" for i, j in self.edges())

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str, n: int | None = None) -> "Topology":
        edges = [tuple(int(x) for x in line.split()) for line in text.splitlines() if line.strip()]
        if n is None:
            n = 1 + max((max(e) for e in edges), default=-1)
        return cls.from_edges(n, edges)


def complete_graph(n: int) -> Topology:
    return Topology.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def ensure_connected(t: Topology, seed: int) -> Topology:
    """Join every smaller component to the largest one with a single random edge.

    Adds exactly ``components - 1`` edges and never removes any.
    """
    comps = t.components()
    if len(comps) <= 1:
        return t
    rng = np.random.default_rng(seed)
    # ties broken by lowest member id since components come out in id order
    main = max(comps, key=len)
    edges = t.edges()
    for comp in comps:
        if comp is main:
            continue
        a = main[int(rng.integers(len(main)))]
        b = comp[int(rng.integers(len(comp)))]
        edges.append((a, b))
    return Topology.from_edges(t.n, edges)


def gen_small_world(n: int, close_k: int, p_far: float, seed: int) -> Topology:
    """Ring lattice of ``close_k`` nearest neighbours with random rewiring."""
    if close_k < 2 or close_k % 2 or n <= close_k:
        raise ValueError("need n > close_k >= 2 with close_k even")
    if not (0.0 <= p_far <= 1.0):
        raise ValueError("p_far must be a probability")
    rng = np.random.default_rng(seed)
    adj: list[set[int]] = [set() for _ in range(n)]
    for i in range(n):
        for j in range(1, close_k // 2 + 1):
            w = (i + j) % n
            adj[i].add(w)
            adj[w].add(i)
    # classic WS order: sweep ring distance outward, rewire the far endpoint
    for j in range(1, close_k // 2 + 1):
        for i in range(n):
            old = (i + j) % n
            if old not in adj[i] or rng.random() >= p_far:
                continue
            candidates = [w for w in range(n) if w != i and w not in adj[i]]
            if not candidates:
                continue
            new = candidates[int(rng.integers(len(candidates)))]
            adj[i].discard(old)
            adj[old].discard(i)
            adj[i].add(new)
            adj[new].add(i)
    t = Topology(n, tuple(tuple(sorted(a)) for a in adj))
    return ensure_connected(t, seed)


def gen_erdos_renyi(n: int, p: float, seed: int) -> Topology:
    if n < 2:
        raise ValueError("need at least two nodes")
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must be a probability")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    t = Topology.from_edges(n, zip(iu[keep].tolist(), ju[keep].tolist()))
    return ensure_connected(t, seed)
