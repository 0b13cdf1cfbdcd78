"""Nested element aggregates by recursive balanced graph splitting.

The coarsest level splits the whole mesh graph into 2**d connected parts of
(nearly) equal size, and every aggregate is split again into 2**d parts to
obtain the next finer level, until only single elements remain.

A k-way split is realised by repeated bisection. Each bisection tries a
few greedy region-growing starts from peripheral nodes, improves each with
boundary moves (Fiduccia-Mattheyses style) and keeps the balanced, connected
result with the smallest edge cut. All greedy choices break ties by the
lowest element index, so results depend only on the graph and the seed.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .meshgraph import ElementGraph, GraphError, is_connected

__all__ = [
    "AggregateHierarchy",
    "kway_split",
    "build_hierarchy",
    "aggregate_graph",
    "n_levels_for",
]


@dataclass(frozen=True)
class AggregateHierarchy:
    """Element-to-aggregate maps for every level, level 0 being singletons."""

    levels: tuple
    d: int

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def counts(self):
        return [int(lab.max()) + 1 for lab in self.levels]

    def members(self, k):
        """Sorted element lists of every aggregate on level k."""
        lab = self.levels[k]
        order = np.argsort(lab, kind="stable")
        bounds = np.searchsorted(lab[order], np.arange(self.counts[k] + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.counts[k])]

    def parent_map(self, k):
        """Map from level-k aggregate id to its level-(k+1) aggregate id."""
        fine = self.levels[k]
        coarse = self.levels[k + 1]
        out = np.full(self.counts[k], -1, dtype=np.int64)
        out[fine] = coarse
        return out

    def to_json(self):
        return json.dumps(
            {
                "d": self.d,
                "n_elements": int(len(self.levels[0])),
                "counts": self.counts,
                "levels": [lab.tolist() for lab in self.levels],
            },
            indent=None,
        )

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(tuple(np.asarray(lab, dtype=np.int64) for lab in data["levels"]), int(data["d"]))


def n_levels_for(n_elements, d):
    """Smallest N >= 1 with (2**d)**N >= n_elements."""
    fan = 2**d
    N, cap = 1, fan
    while cap < n_elements:
        N += 1
        cap *= fan
    return N


# ---------------------------------------------------------------------------
# bisection on an induced subgraph; nodes are local indices 0..n-1 in
# ascending global order so that "lowest local index" == "lowest element index"


def _bfs_dist(adj, src, n):
    dist = [-1] * n
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def _farthest(dist):
    far = max(dist)
    return dist.index(far), far


def _pseudo_peripheral(adj, start, n):
    node = start
    dist = _bfs_dist(adj, node, n)
    cand, ecc = _farthest(dist)
    for _ in range(8):
        d2 = _bfs_dist(adj, cand, n)
        nxt, e2 = _farthest(d2)
        if e2 <= ecc:
            return cand, d2
        node, dist, ecc = cand, d2, e2
        cand = nxt
    return node, dist


def _grow(adj, n, seed, target, dist=None):
    """Greedy graph growing: repeatedly add the frontier node whose move
    most reduces the cut; ties go to the node nearest the seed (if `dist`
    is given) and then to the lowest index."""
    side = bytearray(n)  # 1 = grown region
    inside = [0] * n
    deg = [len(a) for a in adj]
    heap = []

    def key(u):
        gain = 2 * inside[u] - deg[u]
        return (-gain, dist[u] if dist is not None else 0, u)

    side[seed] = 1
    size = 1
    for w in adj[seed]:
        inside[w] += 1
        heapq.heappush(heap, key(w))
    while size < target and heap:
        k = heapq.heappop(heap)
        u = k[2]
        if side[u] or k != key(u):
            continue
        side[u] = 1
        size += 1
        for w in adj[u]:
            if not side[w]:
                inside[w] += 1
                heapq.heappush(heap, key(w))
    if size < target:
        # region ran out of frontier (cannot happen on connected input)
        for u in range(n):
            if size >= target:
                break
            if not side[u]:
                side[u] = 1
                size += 1
    return side


def _cut(adj, side):
    return sum(1 for u, nb in enumerate(adj) for w in nb if w > u and side[u] != side[w])


def _fm_refine(adj, side, target, max_passes=8):
    """Boundary-move refinement keeping |region 1| within target +- 1 and
    accepting only states with |region 1| == target."""
    n = len(adj)
    for _ in range(max_passes):
        ext = [0] * n
        for u in range(n):
            su = side[u]
            ext[u] = sum(1 for w in adj[u] if side[w] != su)
        gain = [2 * ext[u] - len(adj[u]) for u in range(n)]
        size1 = sum(side)
        cut = _cut(adj, side)
        best_cut, best_len = cut, 0
        heaps = ([], [])
        for u in range(n):
            if ext[u]:
                heapq.heappush(heaps[side[u]], (-gain[u], u))
        locked = bytearray(n)
        moves = []
        since_best = 0
        limit = max(25, n // 20)
        while since_best < limit:
            choice = None
            for s in (0, 1):
                h = heaps[s]
                new_size = size1 + (1 if s == 0 else -1)
                if abs(new_size - target) > 1:
                    continue
                while h:
                    g, u = h[0]
                    if locked[u] or side[u] != s or -g != gain[u]:
                        heapq.heappop(h)
                        continue
                    break
                if h:
                    cand = (h[0][0], h[0][1], s)
                    if choice is None or cand < choice:
                        choice = cand
            if choice is None:
                break
            g, u, s = choice
            heapq.heappop(heaps[s])
            locked[u] = 1
            side[u] = 1 - s
            size1 += 1 if s == 0 else -1
            cut -= -g
            moves.append(u)
            for w in adj[u]:
                if side[w] == side[u]:
                    gain[w] -= 2
                else:
                    gain[w] += 2
                if not locked[w]:
                    heapq.heappush(heaps[side[w]], (-gain[w], w))
            gain[u] = -gain[u]
            if size1 == target and cut < best_cut:
                best_cut, best_len = cut, len(moves)
                since_best = 0
            else:
                since_best += 1
        for u in moves[best_len:]:
            side[u] = 1 - side[u]
        if best_len == 0:
            break
    return side


def _components(adj, nodes_mask, value):
    """Connected components of nodes with nodes_mask[u] == value."""
    n = len(adj)
    seen = bytearray(n)
    comps = []
    for s in range(n):
        if nodes_mask[s] != value or seen[s]:
            continue
        comp = [s]
        seen[s] = 1
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if nodes_mask[w] == value and not seen[w]:
                    seen[w] = 1
                    comp.append(w)
                    queue.append(w)
        comps.append(comp)
    return comps


def _repair_bisection(adj, side):
    """Move every non-largest fragment of a side to the other side."""
    for value in (0, 1):
        comps = _components(adj, side, value)
        if len(comps) <= 1:
            continue
        comps.sort(key=lambda c: (-len(c), min(c)))
        for comp in comps[1:]:
            for u in comp:
                side[u] = 1 - value
    return side


def _bisect(adj, target, start):
    """Split local graph into (region of size `target`, rest)."""
    n = len(adj)
    if target <= 0 or target >= n:
        return bytearray([1 if target >= n else 0]) * n
    s1, dist1 = _pseudo_peripheral(adj, start, n)
    s2, _ = _farthest(dist1)
    dist2 = _bfs_dist(adj, s2, n)
    starts = [(s1, None), (s1, dist1), (s2, None), (s2, dist2)]
    best = None
    for i, (seed, dist) in enumerate(starts):
        side = _grow(adj, n, seed, target, dist)
        side = _fm_refine(adj, side, target)
        side = _repair_bisection(adj, side)
        size1 = sum(side)
        score = (abs(size1 - target), _cut(adj, side), i)
        if best is None or score < best[0]:
            best = (score, side)
    return best[1]


def _local_adjacency(graph, nodes):
    pos = {int(g): i for i, g in enumerate(nodes)}
    adj = []
    for g in nodes:
        adj.append([pos[w] for w in graph.adjacency[g] if w in pos])
    return adj


def _target_sizes(n, parts):
    base, rem = divmod(n, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _split_local(adj, local_nodes, parts, start):
    """Recursive bisection of the induced graph on `local_nodes` (sorted)."""
    if parts == 1 or len(local_nodes) <= 1:
        return [local_nodes]
    sizes = _target_sizes(len(local_nodes), parts)
    k1 = (parts + 1) // 2
    target = sum(sizes[:k1])
    pos = {u: i for i, u in enumerate(local_nodes)}
    sub = [[pos[w] for w in adj[u] if w in pos] for u in local_nodes]
    side = _bisect(sub, target, start % len(local_nodes))
    left = [u for i, u in enumerate(local_nodes) if side[i]]
    right = [u for i, u in enumerate(local_nodes) if not side[i]]
    # keep the part containing the lowest index first
    if right and left and right[0] < left[0] and len(left) == len(right):
        left, right = right, left
    out = []
    out.extend(_split_local(adj, left, k1, start) if left else [])
    out.extend(_split_local(adj, right, parts - k1, start) if right else [])
    return out


def _repair_kway(adj, labels, parts):
    """Reassign disconnected fragments to the adjacent part sharing most edges."""
    n = len(adj)
    for _ in range(parts + 1):
        changed = False
        for p in range(parts):
            mask = [1 if labels[u] == p else 0 for u in range(n)]
            comps = _components(adj, mask, 1)
            if len(comps) <= 1:
                continue
            comps.sort(key=lambda c: (-len(c), min(c)))
            for comp in comps[1:]:
                counts = {}
                cs = set(comp)
                for u in comp:
                    for w in adj[u]:
                        if w not in cs:
                            counts[labels[w]] = counts.get(labels[w], 0) + 1
                if not counts:
                    continue
                dest = min(counts, key=lambda q: (-counts[q], q))
                for u in comp:
                    labels[u] = dest
                changed = True
        if not changed:
            break
    return labels


def kway_split(graph, nodes, parts, seed=0):
    """Split the connected node subset into `parts` connected, balanced parts.

    Returns an integer label in ``0..parts-1`` for every node, aligned with
    ``sorted(nodes)``. Part sizes follow ``ceil(n/parts)`` / ``floor(n/parts)``
    with the larger parts first whenever a connected split of that shape is
    found; connectivity takes priority over balance otherwise.
    """
    nodes = sorted(int(u) for u in nodes)
    if not nodes:
        raise GraphError("cannot split an empty node subset")
    if parts < 1:
        raise ValueError("parts must be >= 1")
    n = len(nodes)
    if parts >= n:
        return np.arange(n, dtype=np.int64)
    adj = _local_adjacency(graph, nodes)
    groups = _split_local(adj, list(range(n)), parts, seed)
    labels = [0] * n
    for lab, grp in enumerate(groups):
        for u in grp:
            labels[u] = lab
    labels = _repair_kway(adj, labels, len(groups))
    # compact labels in order of first appearance
    remap = {}
    for lab in labels:
        if lab not in remap:
            remap[lab] = len(remap)
    return np.array([remap[lab] for lab in labels], dtype=np.int64)


def build_hierarchy(graph, d, seed=0):
    """Nested aggregates, coarsest level first: 2**d parts, then each part
    split into 2**d again, until single elements remain."""
    if not is_connected(graph, range(graph.n_elements)):
        raise GraphError("graph is disconnected")
    n = graph.n_elements
    fan = 2**d
    N = n_levels_for(n, d)
    singletons = np.arange(n, dtype=np.int64)
    if N == 1:
        return AggregateHierarchy((singletons,), d)
    coarse = kway_split(graph, range(n), fan, seed)
    levels = [coarse]
    for _ in range(N - 2):
        parent = levels[0]
        child = np.empty(n, dtype=np.int64)
        next_id = 0
        for members in _members(parent):
            if len(members) < fan:
                sub = np.arange(len(members))
            else:
                sub = kway_split(graph, members, fan, seed)
            child[members] = next_id + sub
            next_id += int(sub.max()) + 1
        levels.insert(0, child)
    levels.insert(0, singletons)
    return AggregateHierarchy(tuple(levels), d)


def _members(labels):
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(int(labels.max()) + 2))
    return [order[bounds[i] : bounds[i + 1]] for i in range(len(bounds) - 1)]


def aggregate_graph(graph, labels):
    """Quotient graph: one node per aggregate, dof counts summed."""
    labels = np.asarray(labels, dtype=np.int64)
    n_agg = int(labels.max()) + 1
    nbrs = [set() for _ in range(n_agg)]
    for u, nb in enumerate(graph.adjacency):
        lu = labels[u]
        for w in nb:
            lw = labels[w]
            if lw != lu:
                nbrs[lu].add(int(lw))
    dofs = np.bincount(labels, weights=graph.dof_counts, minlength=n_agg).astype(np.int64)
    return ElementGraph([sorted(s) for s in nbrs], dofs, validate=False)
