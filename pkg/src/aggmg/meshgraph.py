"""Structured Cartesian DG meshes and element adjacency graphs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import BlockPartition

__all__ = [
    "GraphError",
    "ElementGraph",
    "CartesianMeshSpec",
    "Geometry",
    "DofMap",
    "build_cartesian",
    "load_graph",
    "write_graph",
]


class GraphError(ValueError):
    pass


class ElementGraph:
    """Elements as nodes, shared faces as edges.

    ``adjacency[i]`` is the sorted tuple of neighbours of element i and
    ``dof_counts[i]`` the number of unknowns it carries.
    """

    __slots__ = ("adjacency", "dof_counts", "_indptr", "_indices")

    def __init__(self, adjacency, dof_counts, validate=True):
        self.adjacency = tuple(tuple(sorted(int(j) for j in nb)) for nb in adjacency)
        self.dof_counts = np.asarray(dof_counts, dtype=np.int64)
        self.dof_counts.setflags(write=False)
        if len(self.dof_counts) != len(self.adjacency):
            raise GraphError("dof_counts and adjacency disagree on the element count")
        self._indptr = None
        self._indices = None
        if validate:
            self.validate()

    @property
    def n_elements(self):
        return len(self.adjacency)

    @property
    def n_dofs(self):
        return int(self.dof_counts.sum())

    @property
    def n_edges(self):
        return sum(len(nb) for nb in self.adjacency) // 2

    def degree(self, i):
        return len(self.adjacency[i])

    def csr(self):
        """Adjacency as (indptr, indices) arrays."""
        if self._indptr is None:
            lens = [len(nb) for nb in self.adjacency]
            self._indptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
            self._indices = np.fromiter(
                (j for nb in self.adjacency for j in nb), dtype=np.int64, count=int(sum(lens))
            )
        return self._indptr, self._indices

    def validate(self, require_connected=True):
        n = self.n_elements
        if n == 0:
            raise GraphError("graph has no elements")
        if np.any(self.dof_counts < 1):
            i = int(np.flatnonzero(self.dof_counts < 1)[0])
            raise GraphError(f"element {i} has no degrees of freedom")
        neigh = [set(nb) for nb in self.adjacency]
        for i, nb in enumerate(self.adjacency):
            if len(nb) != len(neigh[i]):
                raise GraphError(f"duplicate neighbour at element {i}")
            for j in nb:
                if j < 0 or j >= n:
                    raise GraphError(f"neighbour {j} of element {i} out of range")
                if j == i:
                    raise GraphError(f"self-loop at element {i}")
                if i not in neigh[j]:
                    raise GraphError(f"asymmetric adjacency at element {i}")
        if require_connected and not is_connected(self, range(n)):
            raise GraphError("graph is disconnected")

    def dofmap(self):
        return DofMap(self.dof_counts)

    def __eq__(self, other):
        return (
            isinstance(other, ElementGraph)
            and self.adjacency == other.adjacency
            and np.array_equal(self.dof_counts, other.dof_counts)
        )

    __hash__ = None

    def __repr__(self):
        return f"ElementGraph(n_elements={self.n_elements}, n_edges={self.n_edges})"


def is_connected(graph, nodes):
    """True when the subgraph induced by `nodes` is connected."""
    nodes = list(nodes)
    if not nodes:
        return False
    inside = set(nodes)
    seen = {nodes[0]}
    queue = deque([nodes[0]])
    adj = graph.adjacency
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w in inside and w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == len(inside)


@dataclass(frozen=True)
class CartesianMeshSpec:
    """Uniform box mesh with 2**M elements per axis and Q_p elements."""

    d: int
    M: int
    p: int = 1
    lower: tuple = None
    upper: tuple = None

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.M < 0:
            raise ValueError("refinement level M must be >= 0")
        if self.p < 0:
            raise ValueError("polynomial degree must be >= 0")
        if self.lower is None:
            object.__setattr__(self, "lower", (-1.0,) * self.d)
        if self.upper is None:
            object.__setattr__(self, "upper", (1.0,) * self.d)
        if len(self.lower) != self.d or len(self.upper) != self.d:
            raise ValueError("domain bounds must have one entry per dimension")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("domain box must have positive extent")

    @property
    def per_axis(self):
        return 2**self.M

    @property
    def n_elements(self):
        return self.per_axis**self.d

    @property
    def dofs_per_element(self):
        return (self.p + 1) ** self.d

    @property
    def spacing(self):
        return np.array([(hi - lo) / self.per_axis for lo, hi in zip(self.lower, self.upper)])


@dataclass(frozen=True)
class Geometry:
    """Per-element lower corners and the (uniform) element spacing."""

    lower_corners: np.ndarray
    spacing: np.ndarray
    index: np.ndarray = field(repr=False)  # (n_elements, d) integer lattice coordinates


class DofMap:
    """Contiguous element-major dof layout."""

    __slots__ = ("counts", "first")

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.first = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)

    @property
    def n(self):
        return int(self.counts.sum())

    def dofs(self, element):
        return np.arange(self.first[element], self.first[element] + self.counts[element])

    def blocks(self):
        return BlockPartition.from_sizes(self.counts)


def build_cartesian(spec):
    """Lexicographic (x fastest) element graph and geometry of a box mesh."""
    n_axis = spec.per_axis
    d = spec.d
    n = spec.n_elements
    # lattice coordinate a of element e is (e // n_axis**a) % n_axis
    idx = np.stack([(np.arange(n) // n_axis**a) % n_axis for a in range(d)], axis=1)
    adjacency = []
    for e in range(n):
        nb = []
        for a in range(d):
            stride = n_axis**a
            if idx[e, a] > 0:
                nb.append(e - stride)
            if idx[e, a] < n_axis - 1:
                nb.append(e + stride)
        adjacency.append(sorted(nb))
    h = spec.spacing
    lower = np.asarray(spec.lower, dtype=float)[None, :] + idx * h[None, :]
    graph = ElementGraph(adjacency, np.full(n, spec.dofs_per_element), validate=False)
    return graph, Geometry(lower_corners=lower, spacing=h, index=idx)


def write_graph(graph, path):
    """Write the adjacency format: a count line, then ``dofs k nbr_1 .. nbr_k`` per element."""
    with open(path, "w") as fh:
        fh.write(f"{graph.n_elements}\n")
        for dofs, nb in zip(graph.dof_counts.tolist(), graph.adjacency):
            fh.write(" ".join(str(t) for t in (dofs, len(nb), *nb)) + "\n")


def load_graph(path):
    """Read and validate a graph written by :func:`write_graph`."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise GraphError(f"{path}: empty graph file")
    try:
        n = int(lines[0].split()[0])
    except ValueError:
        raise GraphError(f"{path}: malformed header line {lines[0]!r}") from None
    if len(lines) - 1 != n:
        raise GraphError(f"{path}: expected {n} element lines, found {len(lines) - 1}")
    adjacency, dofs = [], []
    for i, line in enumerate(lines[1:]):
        try:
            toks = [int(t) for t in line.split()]
        except ValueError:
            raise GraphError(f"{path}: malformed line for element {i}: {line!r}") from None
        if len(toks) < 2 or len(toks) != 2 + toks[1]:
            raise GraphError(f"{path}: malformed line for element {i}: {line!r}")
        dofs.append(toks[0])
        adjacency.append(toks[2:])
    return ElementGraph(adjacency, dofs)
