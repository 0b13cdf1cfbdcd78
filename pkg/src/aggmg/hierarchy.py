"""Adaptive smoothed-aggregation setup on a geometric aggregate hierarchy.

For every level k the setup

1. builds the damped smoother of A_k,
2. relaxes the candidate columns B^k on ``A_k x = 0`` until they stagnate,
3. splits B^k by the aggregates of level k+1 and keeps the leading left
   singular vectors of each block (the tentative prolongator P),
4. smooths P into ``T = (I - omega P(A_k)^{-1} A_k) P`` and sets ``R = T^T``,
5. forms ``A_{k+1} = R A_k T`` and ``B^{k+1} = R B^k``.

Levels ``1..kappa`` are not stored; their operator is applied through the
chain of transfers and A_0.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import BlockPartition, LUFactors, SingularMatrixError, SparseMatrix, svd_stack
from .partition import AggregateHierarchy
from .smoother import SMOOTHER_KINDS, StopRule, apply_prolongation_smoothing, build_smoother, smooth

__all__ = [
    "SetupConfig",
    "Level",
    "MgHierarchy",
    "init_candidates",
    "smooth_candidates",
    "tentative_prolongator",
    "build",
    "apply_level_operator",
]


@dataclass(frozen=True)
class SetupConfig:
    """Parameters of the adaptive setup.

    Attributes
    ----------
    gamma : float
        Stagnation tolerance of candidate smoothing.
    delta : float
        Relative singular value cutoff of h* steps.
    n_cut : int or None
        Per-aggregate dof reduction of h steps; ``2**d - (d-1)`` when None.
    kappa : int
        Levels ``1..kappa`` are applied matrix-free.
    seed : int
    hstar_top : bool
        Insert an intra-element (h*) step before the first geometric step.
    smoother : str
    q : int
        Power iterations for the damping estimate.
    smooth_hstar : bool
        Smooth the prolongator of intra-element (h*) steps too. Off by
        default, which keeps the face-neighbour sparsity of A on the h*
        level.
    svd : str
        ``"lapack"`` or ``"jacobi"``: kernel of the per-aggregate SVDs.
    """

    gamma: float = 0.03
    delta: float = 1e-3
    n_cut: int = None
    kappa: int = 2
    seed: int = 0
    hstar_top: bool = False
    smoother: str = "block_jacobi"
    q: int = 3
    smooth_hstar: bool = False
    svd: str = "lapack"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.n_cut is not None and self.n_cut < 1:
            raise ValueError("n_cut must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.svd not in ("lapack", "jacobi"):
            raise ValueError(f"unknown svd kernel {self.svd!r}")
        if self.smoother not in SMOOTHER_KINDS:
            raise ValueError(f"unknown smoother {self.smoother!r}; expected one of {SMOOTHER_KINDS}")

    def cut(self, d):
        return self.n_cut if self.n_cut is not None else 2**d - (d - 1)


@dataclass
class Level:
    """One level of the multigrid hierarchy.

    ``T`` maps this level to the next finer one and ``R = T^T`` back; both
    are None on level 0. ``P`` is the tentative prolongator T was smoothed
    from. ``A`` is None on matrix-free levels.
    """

    k: int
    A: SparseMatrix
    smoother: object
    blocks: BlockPartition
    T: SparseMatrix = None
    R: SparseMatrix = None
    P: SparseMatrix = field(default=None, repr=False)
    B: np.ndarray = field(default=None, repr=False)
    is_hstar: bool = False
    dof: int = 0
    nnz: int = 0
    kept: np.ndarray = field(default=None, repr=False)

    @property
    def implicit(self):
        return self.A is None


class MgHierarchy:
    """Output of :func:`build`: levels 0 (finest) .. N (coarsest)."""

    def __init__(self, levels, aggregates, kappa, bottom, config):
        self.levels = levels
        self.aggregates = aggregates
        self.kappa = kappa
        self.bottom = bottom
        self.config = config

    @property
    def n_levels(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]

    def operator(self, k):
        """Explicit A_k; matrix-free levels are formed by the triple product."""
        lev = self.levels[k]
        if lev.A is not None:
            return lev.A
        A = self.levels[0].A.to_scipy()
        T = sp.identity(A.shape[0], format="csr")
        for j in range(1, k + 1):
            T = T @ self.levels[j].T.to_scipy()
        return SparseMatrix.from_scipy((T.T @ A @ T).tocsr())

    def summary(self):
        rows = []
        for lev in self.levels:
            rows.append(
                {
                    "k": lev.k,
                    "dof": lev.dof,
                    "nnz": lev.nnz,
                    "is_hstar": lev.is_hstar,
                    "implicit": lev.implicit,
                    "omega": None if lev.smoother is None else float(lev.smoother.omega),
                    "rho_estimate": None if lev.smoother is None else float(lev.smoother.rho_estimate),
                }
            )
        return rows

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def __repr__(self):
        dofs = [lev.dof for lev in self.levels]
        return f"MgHierarchy(levels={self.n_levels}, dof={dofs})"


# ---------------------------------------------------------------------------


def _aggregate_dofs(graph, labels):
    return np.bincount(labels, weights=graph.dof_counts, minlength=int(labels.max()) + 1)


def init_candidates(n, aggregates, graph, seed=0):
    """Seeded standard-normal n x r candidates, r = median level-1 aggregate dof count."""
    if aggregates.n_levels > 1:
        r = int(np.median(_aggregate_dofs(graph, aggregates.levels[1])))
    else:
        r = int(graph.dof_counts.sum())
    r = max(r, 1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return rng.standard_normal((n, r))


def smooth_candidates(B, A, S, gamma=0.03, cap=100):
    """Relax every column on ``A x = 0`` until its norm stagnates; columns
    come back with unit norm.

    Returns
    -------
    B : ndarray
    sweeps : ndarray
        Sweeps spent on each column.
    """
    X, its = smooth(np.array(B, dtype=np.float64, ndmin=2), A, S, None, StopRule.stagnation(gamma, cap))
    return X, its


def _group_by_size(rows_of):
    """Aggregates grouped by row count so the SVDs run batched."""
    groups = {}
    for j, rows in enumerate(rows_of):
        groups.setdefault(len(rows), []).append(j)
    return groups


def tentative_prolongator(B, rows_of, modes, n_cut=6, delta=1e-3, svd="lapack"):
    """Block-orthonormal tentative prolongator from per-aggregate SVDs.

    Parameters
    ----------
    B : ndarray, shape (n, r)
        Smoothed candidates.
    rows_of : list of int arrays
        Rows (dofs of the finer level) of every coarse aggregate.
    modes : sequence of str
        ``"h"`` or ``"hstar"`` for every aggregate.
    n_cut : int
        Dof reduction of h steps.
    delta : float
        Singular value cutoff of h* steps.
    svd : str
        SVD kernel, ``"lapack"`` or ``"jacobi"``.

    Returns
    -------
    P : SparseMatrix, shape (n, sum(s))
        Columns ordered aggregate-major.
    s : ndarray of int
        Columns kept per aggregate.
    """
    B = np.asarray(B, dtype=np.float64)
    n, r = B.shape
    n_agg = len(rows_of)
    kept_u = [None] * n_agg
    for m, ids in sorted(_group_by_size(rows_of).items()):
        stack = np.stack([B[rows_of[j]] for j in ids])
        U, sig, _ = svd_stack(stack, compute_v=False, method=svd)
        for i, j in enumerate(ids):
            s1 = sig[i, 0] if sig.shape[1] else 0.0
            if not s1 > 0:
                warnings.warn(f"aggregate {j} has an all-zero candidate block; using a unit vector", RuntimeWarning)
                e = np.zeros((m, 1))
                e[0, 0] = 1.0
                kept_u[j] = e
                continue
            rank = int(np.sum(sig[i] > s1 * max(m, r) * np.finfo(float).eps))
            if modes[j] == "hstar":
                s = int(np.sum(sig[i] > delta * s1))
            else:
                s = min(max(1, math.ceil(m / n_cut)), rank, r)
            kept_u[j] = U[i, :, :s]
    sizes = np.array([u.shape[1] for u in kept_u], dtype=np.int64)
    col0 = np.concatenate([[0], np.cumsum(sizes)])
    ri, ci, vals = [], [], []
    for j, u in enumerate(kept_u):
        rows = np.asarray(rows_of[j])
        ri.append(np.repeat(rows, u.shape[1]))
        ci.append(np.tile(np.arange(col0[j], col0[j + 1]), len(rows)))
        vals.append(u.ravel())
    P = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=(n, int(col0[-1]))
    )
    P.sort_indices()
    return SparseMatrix.from_scipy(P), sizes


def _level_labels(aggregates, hstar_top):
    levels = list(aggregates.levels)
    if hstar_top and len(levels) > 1:
        levels.insert(1, levels[0].copy())
    return levels


def build(A0, graph, aggregates, config=None):
    """Run the adaptive setup.

    Parameters
    ----------
    A0 : SparseMatrix
        Fine operator; dofs ordered element-major as in ``graph``.
    graph : ElementGraph
    aggregates : AggregateHierarchy
    config : SetupConfig

    Returns
    -------
    MgHierarchy
    """
    config = config or SetupConfig()
    if not isinstance(A0, SparseMatrix):
        A0 = SparseMatrix.from_scipy(A0)
    if A0.nrows != A0.ncols:
        raise ValueError("operator must be square")
    if A0.nrows != graph.n_dofs:
        raise ValueError(f"operator dimension {A0.nrows} does not match graph dof total {graph.n_dofs}")
    d = aggregates.d
    n_cut = config.cut(d)
    labels = _level_labels(aggregates, config.hstar_top)
    N = len(labels) - 1
    # dofs of level k are grouped by level-k aggregate; level 0 by element
    elem_blocks = graph.dofmap().blocks()
    blocks = elem_blocks
    block_rows = [np.arange(blocks.offsets[i], blocks.offsets[i + 1]) for i in range(blocks.nblocks)]
    B = init_candidates(A0.nrows, AggregateHierarchy(tuple(labels), d), graph, config.seed) if N else None
    power_seeds = np.random.SeedSequence([config.seed, 1]).spawn(max(N, 1))
    levels = [Level(k=0, A=A0, smoother=None, blocks=blocks, dof=A0.nrows, nnz=A0.nnz)]
    A = A0
    for k in range(N):
        lev = levels[k]
        S = build_smoother(A, config.smoother, blocks, seed=np.random.default_rng(power_seeds[k]), q=config.q)
        B, _ = smooth_candidates(B, A, S, config.gamma)
        lev.smoother, lev.B = S, B
        # rows of each level-(k+1) aggregate: the dofs of its level-k children
        fine, coarse = labels[k], labels[k + 1]
        parent = np.full(int(fine.max()) + 1, -1, dtype=np.int64)
        parent[fine] = coarse
        children = [[] for _ in range(int(coarse.max()) + 1)]
        for child, par in enumerate(parent.tolist()):
            children[par].append(child)
        rows_of = [np.concatenate([block_rows[c] for c in ch]) for ch in children]
        modes = ["hstar" if len(ch) == 1 else "h" for ch in children]
        P, kept = tentative_prolongator(B, rows_of, modes, n_cut, config.delta, config.svd)
        hstar_step = all(m == "hstar" for m in modes)
        if hstar_step and not config.smooth_hstar:
            T = P
        else:
            T = apply_prolongation_smoothing(A, S, P)
        Ts = T.to_scipy()
        Rs = Ts.T.tocsr()
        A_next = sp.csr_matrix(Rs @ (A.to_scipy() @ Ts))
        A_next.sum_duplicates()
        A_next.sort_indices()
        if 1 <= k <= config.kappa:
            lev.A = None
        A = SparseMatrix.from_scipy(A_next)
        B = Rs @ B
        blocks = BlockPartition.from_sizes(kept)
        block_rows = [np.arange(blocks.offsets[i], blocks.offsets[i + 1]) for i in range(blocks.nblocks)]
        levels.append(
            Level(
                k=k + 1,
                A=A,
                smoother=None,
                blocks=blocks,
                T=T,
                R=SparseMatrix.from_scipy(Rs),
                P=P,
                B=B,
                is_hstar=hstar_step,
                dof=A.nrows,
                nnz=A.nnz,
                kept=kept,
            )
        )
    try:
        bottom = LUFactors(A.toarray())
    except SingularMatrixError as exc:
        raise SingularMatrixError(f"coarsest operator (level {N}) is singular: {exc}") from exc
    return MgHierarchy(levels, aggregates, config.kappa, bottom, config)


def apply_level_operator(h, k, x):
    """``A_k x``; matrix-free levels go through ``R_0^k A_0 T_k^0``."""
    lev = h.levels[k]
    if lev.A is not None:
        return lev.A.to_scipy() @ x
    y = x
    for j in range(k, 0, -1):
        y = h.levels[j].T.to_scipy() @ y
    y = h.levels[0].A.to_scipy() @ y
    for j in range(1, k + 1):
        y = h.levels[j].R.to_scipy() @ y
    return y
