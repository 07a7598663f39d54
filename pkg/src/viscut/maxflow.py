"""Exact s-t maxflow/mincut on small grid-structured graphs.

Dinic's algorithm with adjacency lists and paired residual arcs. Capacities
are nonnegative floats; residuals below 1e-12 are treated as saturated so
augmentation terminates cleanly in floating point.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12
_INF = float("inf")


class FlowNetwork:
    def __init__(self, n_nodes: int):
        self.n = n_nodes
        self.head: list[int] = []   # arc target; arc e and e^1 are a residual pair
        self.cap: list[float] = []  # residual capacity
        self.adj: list[list[int]] = [[] for _ in range(n_nodes)]

    def add_edge(self, u: int, v: int, cap: float, rcap: float = 0.0) -> None:
        if cap < 0 or rcap < 0:
            raise ValueError("arc capacities must be nonnegative")
        self.adj[u].append(len(self.head))
        self.head.append(v)
        self.cap.append(float(cap))
        self.adj[v].append(len(self.head))
        self.head.append(u)
        self.cap.append(float(rcap))

    @classmethod
    def from_arcs(cls, n_nodes: int, head: list[int], cap: list[float],
                  adj: list[list[int]]) -> "FlowNetwork":
        """Wrap pre-built arc lists (paired residual arcs) without copying."""
        net = cls(0)
        net.n = n_nodes
        net.head = head
        net.cap = cap
        net.adj = adj
        return net

    def max_flow(self, s: int, t: int) -> float:
        head, cap, adj = self.head, self.cap, self.adj
        n = self.n
        total = 0.0
        while True:
            level = [-1] * n
            level[s] = 0
            queue = [s]
            qi = 0
            while qi < len(queue):
                u = queue[qi]
                qi += 1
                lu = level[u] + 1
                for e in adj[u]:
                    w = head[e]
                    if level[w] < 0 and cap[e] > _EPS:
                        level[w] = lu
                        queue.append(w)
            if level[t] < 0:
                return total
            it = [0] * n
            path: list[int] = []
            u = s
            while True:
                if u == t:
                    push = _INF
                    for e in path:
                        c = cap[e]
                        if c < push:
                            push = c
                    total += push
                    cut = -1
                    for idx, e in enumerate(path):
                        cap[e] -= push
                        cap[e ^ 1] += push
                        if cut < 0 and cap[e] <= _EPS:
                            cut = idx
                    del path[cut:]
                    u = head[path[-1]] if path else s
                    continue
                arcs = adj[u]
                iu = it[u]
                lu = level[u] + 1
                e = -1
                while iu < len(arcs):
                    e = arcs[iu]
                    if cap[e] > _EPS and level[head[e]] == lu:
                        break
                    iu += 1
                it[u] = iu
                if iu < len(arcs):
                    path.append(e)
                    u = head[e]
                else:
                    level[u] = -1  # exhausted for this phase
                    if not path:
                        break
                    e = path.pop()
                    u = head[e ^ 1]
                    it[u] += 1

    def source_side(self, s: int) -> np.ndarray:
        """Nodes reachable from s in the residual graph (call after max_flow)."""
        head, cap, adj = self.head, self.cap, self.adj
        seen = np.zeros(self.n, dtype=bool)
        seen[s] = True
        queue = [s]
        qi = 0
        while qi < len(queue):
            u = queue[qi]
            qi += 1
            for e in adj[u]:
                w = head[e]
                if not seen[w] and cap[e] > _EPS:
                    seen[w] = True
                    queue.append(w)
        return seen
