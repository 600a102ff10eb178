"""s-t graph cuts on pixel graphs (Boykov-Kolmogorov augmenting-path search).

Terminal links are folded into one signed residual per node (``tr``):
positive values are residual capacity from the source, negative values
residual capacity towards the sink. Arcs are stored in sister pairs
``a`` / ``a ^ 1`` so the reverse of an arc is one xor away.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

_NONE = -1
_TERMINAL = -2
_ORPHAN = -3
_INF_DIST = 1 << 60


@dataclass
class FlowNetwork:
    """Pixel graph: one node per pixel plus implicit source and sink.

    ``source_cap[i]`` is paid when pixel i ends on the sink (background)
    side, ``sink_cap[i]`` when it ends on the source (foreground) side.
    ``edges``/``weights`` are undirected n-links charged when their ends
    are separated.
    """

    height: int
    width: int
    source_cap: np.ndarray
    sink_cap: np.ndarray
    edges: np.ndarray  # (m, 2) int node indices
    weights: np.ndarray  # (m,)

    @property
    def n_nodes(self) -> int:
        return int(self.source_cap.shape[0])

    def validate(self) -> None:
        n = self.n_nodes
        if self.sink_cap.shape != (n,) or self.weights.shape[0] != self.edges.shape[0]:
            raise ValueError("inconsistent FlowNetwork extents")
        for name, arr in (("source_cap", self.source_cap), ("sink_cap", self.sink_cap), ("weights", self.weights)):
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0):
                raise ValueError(f"{name} must be finite and non-negative")


def cut_capacity(net: FlowNetwork, fg) -> float:
    """Capacity of the cut that puts ``fg`` pixels on the source side."""
    fg = np.asarray(fg, dtype=bool).reshape(-1)
    total = float(np.where(fg, net.sink_cap, net.source_cap).sum())
    if len(net.edges):
        differ = fg[net.edges[:, 0]] != fg[net.edges[:, 1]]
        total += float(net.weights[differ].sum())
    return total


class _BKGraph:
    def __init__(self, net: FlowNetwork):
        n = net.n_nodes
        m = net.edges.shape[0]
        self.n = n
        self.head = [0] * (2 * m)
        self.rcap = [0.0] * (2 * m)
        self.adj: list[list[int]] = [[] for _ in range(n)]
        for e, ((u, v), w) in enumerate(zip(net.edges.tolist(), net.weights.tolist())):
            a = 2 * e
            self.head[a] = v
            self.head[a + 1] = u
            self.rcap[a] = w
            self.rcap[a + 1] = w
            self.adj[u].append(a)
            self.adj[v].append(a + 1)
        src = net.source_cap.tolist()
        snk = net.sink_cap.tolist()
        self.tr = [s - t for s, t in zip(src, snk)]
        self.flow = sum(min(s, t) for s, t in zip(src, snk))

    def run(self) -> list[bool]:
        n = self.n
        head, rcap, adj, tr = self.head, self.rcap, self.adj, self.tr
        parent = [_NONE] * n
        is_sink = [False] * n
        ts = [0] * n
        dist = [0] * n
        in_active = [False] * n
        active: deque[int] = deque()
        for i in range(n):
            if tr[i] > 0:
                parent[i] = _TERMINAL
                dist[i] = 1
                active.append(i)
                in_active[i] = True
            elif tr[i] < 0:
                parent[i] = _TERMINAL
                is_sink[i] = True
                dist[i] = 1
                active.append(i)
                in_active[i] = True
        time = 0
        orphans: deque[int] = deque()

        def activate(j: int) -> None:
            if not in_active[j]:
                in_active[j] = True
                active.append(j)

        while active:
            i = active[0]
            if parent[i] == _NONE:
                active.popleft()
                in_active[i] = False
                continue

            # grow the tree of i until it touches the other tree
            bridge = -1
            if not is_sink[i]:
                for a in adj[i]:
                    if rcap[a] > 0:
                        j = head[a]
                        if parent[j] == _NONE:
                            is_sink[j] = False
                            parent[j] = a ^ 1
                            ts[j] = ts[i]
                            dist[j] = dist[i] + 1
                            activate(j)
                        elif is_sink[j]:
                            bridge = a
                            break
                        elif ts[j] <= ts[i] and dist[j] > dist[i]:
                            parent[j] = a ^ 1
                            ts[j] = ts[i]
                            dist[j] = dist[i] + 1
            else:
                for a in adj[i]:
                    if rcap[a ^ 1] > 0:
                        j = head[a]
                        if parent[j] == _NONE:
                            is_sink[j] = True
                            parent[j] = a ^ 1
                            ts[j] = ts[i]
                            dist[j] = dist[i] + 1
                            activate(j)
                        elif not is_sink[j]:
                            bridge = a ^ 1
                            break
                        elif ts[j] <= ts[i] and dist[j] > dist[i]:
                            parent[j] = a ^ 1
                            ts[j] = ts[i]
                            dist[j] = dist[i] + 1

            if bridge < 0:
                active.popleft()
                in_active[i] = False
                continue

            time += 1

            # augment along source-root .. bridge .. sink-root
            f = rcap[bridge]
            k = head[bridge ^ 1]
            while parent[k] != _TERMINAL:
                a = parent[k]
                if rcap[a ^ 1] < f:
                    f = rcap[a ^ 1]
                k = head[a]
            if tr[k] < f:
                f = tr[k]
            k = head[bridge]
            while parent[k] != _TERMINAL:
                a = parent[k]
                if rcap[a] < f:
                    f = rcap[a]
                k = head[a]
            if -tr[k] < f:
                f = -tr[k]

            rcap[bridge ^ 1] += f
            rcap[bridge] -= f
            k = head[bridge ^ 1]
            while parent[k] != _TERMINAL:
                a = parent[k]
                rcap[a] += f
                rcap[a ^ 1] -= f
                if rcap[a ^ 1] <= 0:
                    rcap[a ^ 1] = 0.0
                    parent[k] = _ORPHAN
                    orphans.appendleft(k)
                k = head[a]
            tr[k] -= f
            if tr[k] <= 0:
                tr[k] = 0.0
                parent[k] = _ORPHAN
                orphans.appendleft(k)
            k = head[bridge]
            while parent[k] != _TERMINAL:
                a = parent[k]
                rcap[a ^ 1] += f
                rcap[a] -= f
                if rcap[a] <= 0:
                    rcap[a] = 0.0
                    parent[k] = _ORPHAN
                    orphans.appendleft(k)
                k = head[a]
            tr[k] += f
            if tr[k] >= 0:
                tr[k] = 0.0
                parent[k] = _ORPHAN
                orphans.appendleft(k)
            self.flow += f

            # adopt orphans
            while orphans:
                k = orphans.popleft()
                sink_side = is_sink[k]
                best_arc = _NONE
                best_d = _INF_DIST
                for a0 in adj[k]:
                    if (rcap[a0] if sink_side else rcap[a0 ^ 1]) <= 0:
                        continue
                    j = head[a0]
                    if is_sink[j] != sink_side or parent[j] == _NONE:
                        continue
                    # distance from j to its terminal, if j is still rooted
                    d = 0
                    q = j
                    while True:
                        if ts[q] == time:
                            d += dist[q]
                            break
                        a = parent[q]
                        d += 1
                        if a == _TERMINAL:
                            ts[q] = time
                            dist[q] = 1
                            break
                        if a == _ORPHAN:
                            d = _INF_DIST
                            break
                        q = head[a]
                    if d < _INF_DIST:
                        if d < best_d:
                            best_arc = a0
                            best_d = d
                        q = j
                        while ts[q] != time:
                            ts[q] = time
                            dist[q] = d
                            d -= 1
                            q = head[parent[q]]
                if best_arc != _NONE:
                    parent[k] = best_arc
                    ts[k] = time
                    dist[k] = best_d + 1
                    continue
                # no valid parent: k leaves its tree
                for a0 in adj[k]:
                    j = head[a0]
                    if is_sink[j] != sink_side or parent[j] == _NONE:
                        continue
                    if (rcap[a0] if sink_side else rcap[a0 ^ 1]) > 0:
                        activate(j)
                    pa = parent[j]
                    if pa >= 0 and head[pa] == k:
                        parent[j] = _ORPHAN
                        orphans.append(j)
                parent[k] = _NONE

        return [parent[i] != _NONE and not is_sink[i] for i in range(n)]


def min_cut(net: FlowNetwork) -> tuple[np.ndarray, float]:
    """Exact minimum s-t cut.

    Returns a boolean (height, width) foreground mask (source side) and the
    max-flow value, which equals the capacity of the returned cut.
    """
    net.validate()
    if net.n_nodes == 0:
        return np.zeros((net.height, net.width), dtype=bool), 0.0
    g = _BKGraph(net)
    fg = g.run()
    return np.array(fg, dtype=bool).reshape(net.height, net.width), g.flow
