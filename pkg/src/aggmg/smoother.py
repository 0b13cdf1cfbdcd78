"""Damped relaxation: Richardson, block Jacobi and block Gauss-Seidel.

A smoother iterates ``x <- x + omega * P(A)^{-1} (b - A x)`` with the damping
``omega = (4/3) / rho`` where ``rho`` estimates the spectral radius of
``P(A)^{-1} A`` by a few power iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve

from .linalg import BlockDiagonalInverse, BlockPartition, SparseMatrix

__all__ = [
    "SMOOTHER_KINDS",
    "DivergenceError",
    "SmootherSpec",
    "StopRule",
    "estimate_rho",
    "build_smoother",
    "smooth",
    "apply_prolongation_smoothing",
]

SMOOTHER_KINDS = ("richardson", "block_jacobi", "block_gauss_seidel")
STAGNATION_CAP = 100


class DivergenceError(ArithmeticError):
    def __init__(self, message, sweep=None):
        super().__init__(message)
        self.sweep = sweep


class _Preconditioner:
    """Applies P(A)^{-1} for one of the supported smoother kinds."""

    def __init__(self, A, kind, blocks):
        if kind not in SMOOTHER_KINDS:
            raise ValueError(f"unknown smoother kind {kind!r}; expected one of {SMOOTHER_KINDS}")
        if A.nrows != A.ncols:
            raise ValueError("smoother needs a square matrix")
        self.kind = kind
        self.n = A.nrows
        self._diag = None
        self._lower = None
        if kind == "richardson":
            return
        if blocks is None:
            blocks = BlockPartition.uniform(A.nrows, 1)
        if blocks.n != A.nrows:
            raise ValueError("block partition does not span the matrix")
        # factor the diagonal blocks first so singular blocks are reported by index
        self._diag = BlockDiagonalInverse(A, blocks)
        if kind == "block_gauss_seidel":
            csr = A.to_scipy()
            rows = np.repeat(np.arange(A.nrows), np.diff(csr.indptr))
            keep = blocks.block_of(csr.indices) <= blocks.block_of(rows)
            lower = sp.csr_matrix(
                (csr.data[keep], csr.indices[keep], np.concatenate([[0], np.cumsum(
                    np.bincount(rows[keep], minlength=A.nrows))])),
                shape=A.shape,
            )
            self._lower_matrix = lower.tocsc()
            self._lower = splu(self._lower_matrix, permc_spec="NATURAL",
                               options={"SymmetricMode": False})

    def solve(self, v):
        if self.kind == "richardson":
            return np.array(v, dtype=np.float64)
        if self.kind == "block_jacobi":
            return self._diag.solve(v)
        return self._lower.solve(np.asarray(v, dtype=np.float64))

    def solve_sparse(self, M):
        """P(A)^{-1} M for a sparse M, returned sparse."""
        M = sp.csr_matrix(M)
        if self.kind == "richardson":
            return M.copy()
        if self.kind == "block_jacobi":
            return (self._diag.as_sparse().to_scipy() @ M).tocsr()
        out = spsolve(self._lower_matrix, M.tocsc())
        return sp.csr_matrix(out)


@dataclass(frozen=True)
class SmootherSpec:
    """A damped smoother ready to apply.

    Attributes
    ----------
    kind : str
        ``richardson``, ``block_jacobi`` or ``block_gauss_seidel``.
    omega : float
        Damping factor.
    blocks : BlockPartition or None
        Diagonal block structure; ignored by Richardson.
    rho_estimate : float
        Power-iteration estimate the damping was derived from.
    """

    kind: str
    omega: float
    blocks: BlockPartition = None
    rho_estimate: float = float("nan")
    _pre: _Preconditioner = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.omega) and self.omega >= 0):
            raise ValueError(f"damping factor must be finite and nonnegative, got {self.omega}")

    def inverse(self, v):
        """Apply P(A)^{-1}."""
        return self._pre.solve(v)

    def with_omega(self, omega):
        return SmootherSpec(self.kind, float(omega), self.blocks, self.rho_estimate, self._pre)


@dataclass(frozen=True)
class StopRule:
    """When relaxation stops.

    ``fixed_count`` runs exactly ``t`` sweeps. ``stagnation`` runs until the
    norm decay per sweep ``||x_prev|| / ||x||`` falls below ``1 + gamma``,
    capped at ``cap`` sweeps.
    """

    kind: str
    t: int = 0
    gamma: float = 0.03
    cap: int = STAGNATION_CAP

    def __post_init__(self):
        if self.kind not in ("fixed_count", "stagnation"):
            raise ValueError(f"unknown stop rule {self.kind!r}")
        if self.t < 0:
            raise ValueError("sweep count must be >= 0")
        if not self.gamma > 0:
            raise ValueError("stagnation tolerance must be > 0")

    @classmethod
    def fixed_count(cls, t):
        return cls("fixed_count", t=int(t))

    @classmethod
    def stagnation(cls, gamma=0.03, cap=STAGNATION_CAP):
        return cls("stagnation", gamma=float(gamma), cap=int(cap))


def _prepare(A, kind, blocks):
    if not isinstance(A, SparseMatrix):
        A = SparseMatrix.from_scipy(A)
    return A, _Preconditioner(A, kind, blocks)


def _power(A, pre, q, rng):
    x = rng.standard_normal(A.nrows)
    x /= np.linalg.norm(x)
    csr = A.to_scipy()
    for _ in range(q):
        y = pre.solve(csr @ x)
        nrm = float(np.linalg.norm(y))
        if nrm == 0.0 or not np.isfinite(nrm):
            return nrm
        x = y / nrm
    return float(np.linalg.norm(pre.solve(csr @ x)))


def estimate_rho(A, kind="block_jacobi", blocks=None, q=3, seed=0):
    """Power-iteration estimate of the spectral radius of P(A)^{-1} A.

    Parameters
    ----------
    A : SparseMatrix
    kind : str
        Smoother kind defining P(A).
    blocks : BlockPartition, optional
        Diagonal blocks; point blocks when omitted.
    q : int
        Number of power iterations.
    seed : int or numpy.random.Generator
        Seed of the random unit start vector.

    Returns
    -------
    float
        ``||P(A)^{-1} A x||`` where x is the unit iterate after q
        normalised power steps.
    """
    A, pre = _prepare(A, kind, blocks)
    return _power(A, pre, q, np.random.default_rng(seed))


def build_smoother(A, kind="block_jacobi", blocks=None, seed=0, q=3):
    """Factor P(A) and set ``omega = (4/3) / rho`` from :func:`estimate_rho`."""
    A, pre = _prepare(A, kind, blocks)
    rho = _power(A, pre, q, np.random.default_rng(seed))
    if not (np.isfinite(rho) and rho > 0):
        raise DivergenceError(f"spectral radius estimate is {rho}")
    if kind != "richardson" and blocks is None:
        blocks = BlockPartition.uniform(A.nrows, 1)
    return SmootherSpec(kind, 4.0 / (3.0 * rho), None if kind == "richardson" else blocks, rho, pre)


def smooth(x0, A, S, b=None, stop=None):
    """Relax ``A x = b`` starting from x0.

    Parameters
    ----------
    x0 : ndarray, shape (n,) or (n, m)
        Start; columns of a 2-D array are relaxed independently.
    A : SparseMatrix
    S : SmootherSpec
    b : ndarray, optional
        Right-hand side; zero when omitted.
    stop : StopRule
        Defaults to a single sweep.

    Returns
    -------
    x : ndarray
    iterations : int or ndarray
        Sweeps performed (per column for 2-D input).

    Notes
    -----
    With ``b`` absent and a stagnation rule, iterates are renormalised to unit
    norm after each sweep; the norm ratio is measured before renormalising.
    """
    stop = stop or StopRule.fixed_count(1)
    x = np.array(x0, dtype=np.float64)
    vec = x.ndim == 1
    if x.shape[0] != A.nrows:
        raise ValueError("start vector length does not match operator")
    X = x.reshape(A.nrows, -1)
    homogeneous = b is None
    if homogeneous:
        Bm = None
    else:
        Bm = np.asarray(b, dtype=np.float64).reshape(A.nrows, -1)
        if Bm.shape[1] != X.shape[1]:
            Bm = np.broadcast_to(Bm, X.shape)
    csr = A.to_scipy()
    omega = S.omega
    m = X.shape[1]

    def sweep(cols, k):
        Xc = X[:, cols]
        r = -(csr @ Xc) if homogeneous else Bm[:, cols] - csr @ Xc
        with np.errstate(over="ignore", invalid="ignore"):
            Xn = Xc + omega * S.inverse(r).reshape(Xc.shape)
        if not np.all(np.isfinite(Xn)):
            raise DivergenceError(f"non-finite iterate in sweep {k}", sweep=k)
        return Xn

    if stop.kind == "fixed_count":
        cols = np.arange(m)
        for k in range(stop.t):
            X[:, cols] = sweep(cols, k + 1)
        its = np.full(m, stop.t)
    else:
        its = np.zeros(m, dtype=int)
        active = np.arange(m)
        if homogeneous:
            norms = np.linalg.norm(X, axis=0)
            norms[norms == 0] = 1.0
            X /= norms
        prev = np.linalg.norm(X, axis=0)
        for k in range(stop.cap):
            if active.size == 0:
                break
            Xn = sweep(active, k + 1)
            cur = np.linalg.norm(Xn, axis=0)
            its[active] += 1
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = prev[active] / cur
            if homogeneous:
                safe = np.where(cur > 0, cur, 1.0)
                Xn = Xn / safe
                prev[active] = 1.0
            else:
                prev[active] = cur
            X[:, active] = Xn
            done = ~(ratio >= 1.0 + stop.gamma)  # also stops on exact zero
            active = active[~done]
    out = X[:, 0] if vec else X
    return out, (int(its[0]) if vec else its)


def apply_prolongation_smoothing(A, S, P_tent):
    """Return ``(I - omega P(A)^{-1} A) P_tent`` as a sparse matrix."""
    if A.ncols != P_tent.nrows:
        raise ValueError("prolongator rows do not match the operator")
    Pt = P_tent.to_scipy()
    if S.omega == 0:
        return P_tent
    AP = (A.to_scipy() @ Pt).tocsr()
    T = (Pt - S.omega * S._pre.solve_sparse(AP)).tocsr()
    T.eliminate_zeros()
    T.sort_indices()
    return SparseMatrix.from_scipy(T)
