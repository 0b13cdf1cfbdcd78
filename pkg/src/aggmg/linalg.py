"""Sparse and small dense linear algebra kernels.

Sparse kernels run on scipy's CSR routines, which sum each row in stored
(ascending column) order, so results are bit-reproducible. Dense kernels
(LU with partial pivoting, one-sided Jacobi SVD) are written here and work
on stacks of equally sized matrices so that thousands of small element or
aggregate blocks can be processed in a handful of numpy calls.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SparseMatrix",
    "BlockPartition",
    "SingularMatrixError",
    "SvdConvergenceError",
    "spmv",
    "sparse_product",
    "transpose",
    "block_diagonal",
    "BlockDiagonalInverse",
    "LUFactors",
    "lu_factor",
    "dense_lu_solve",
    "svd",
    "svd_stack",
    "mmread",
    "mmwrite",
]


class SingularMatrixError(ArithmeticError):
    """Raised when a (block) LU factorisation meets a zero pivot."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class SvdConvergenceError(ArithmeticError):
    pass


class SparseMatrix:
    """Immutable CSR matrix.

    Rows hold strictly increasing column indices and only finite values.
    Use :meth:`from_scipy` to wrap the result of a scipy computation.
    """

    __slots__ = ("nrows", "ncols", "row_offsets", "col_indices", "values", "_csr")

    def __init__(self, nrows, ncols, row_offsets, col_indices, values, check=True):
        self.nrows = int(nrows)
        self.ncols = int(ncols)
        self.row_offsets = np.ascontiguousarray(row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        if check:
            self._validate()
        for arr in (self.row_offsets, self.col_indices, self.values):
            arr.setflags(write=False)
        self._csr = None

    def _validate(self):
        ro, ci, v = self.row_offsets, self.col_indices, self.values
        if ro.shape != (self.nrows + 1,):
            raise ValueError("row_offsets must have length nrows + 1")
        if ro[0] != 0 or ro[-1] != len(v) or len(ci) != len(v):
            raise ValueError("row_offsets inconsistent with stored entries")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if len(ci):
            if ci.min() < 0 or ci.max() >= self.ncols:
                raise ValueError("column index out of range")
            # strictly increasing inside each row: a non-increase is only
            # allowed where a new row starts
            step = np.diff(ci)
            starts = np.zeros(len(ci), dtype=bool)
            starts[ro[1:-1][ro[1:-1] < len(ci)]] = True
            if np.any((step <= 0) & ~starts[1:]):
                raise ValueError("column indices must be strictly increasing within rows")
        if not np.all(np.isfinite(v)):
            raise ValueError("matrix contains NaN or Inf")

    @classmethod
    def from_scipy(cls, m, check=True):
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        out = cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data, check=check)
        return out

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls.from_scipy(sp.csr_matrix(a))

    @classmethod
    def identity(cls, n):
        return cls.from_scipy(sp.identity(n, format="csr"))

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return int(len(self.values))

    def to_scipy(self):
        """Return a read-only scipy view sharing the CSR arrays."""
        if self._csr is None:
            # int32 indices keep scipy on its fast paths
            idx_t = np.int32 if max(self.nnz, self.ncols) < 2**31 - 1 else np.int64
            m = sp.csr_matrix(
                (self.values, self.col_indices.astype(idx_t), self.row_offsets.astype(idx_t)),
                shape=self.shape,
            )
            m.has_sorted_indices = True
            self._csr = m
        return self._csr

    def toarray(self):
        return self.to_scipy().toarray()

    def diagonal(self):
        return self.to_scipy().diagonal()

    def __matmul__(self, other):
        if isinstance(other, SparseMatrix):
            return sparse_product(self, other)
        return spmv(self, other)

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __repr__(self):
        return f"SparseMatrix({self.nrows}x{self.ncols}, nnz={self.nnz})"


class BlockPartition:
    """Consecutive dof blocks given by their boundary offsets."""

    __slots__ = ("offsets",)

    def __init__(self, offsets):
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0:
            raise ValueError("block offsets must start at 0 and hold at least one block")
        if np.any(np.diff(offsets) <= 0):
            raise ValueError("block offsets must be strictly increasing")
        offsets.setflags(write=False)
        self.offsets = offsets

    @classmethod
    def from_sizes(cls, sizes):
        return cls(np.concatenate([[0], np.cumsum(np.asarray(sizes, dtype=np.int64))]))

    @classmethod
    def uniform(cls, nblocks, size):
        return cls(np.arange(nblocks + 1, dtype=np.int64) * size)

    @property
    def n(self):
        return int(self.offsets[-1])

    @property
    def nblocks(self):
        return len(self.offsets) - 1

    @property
    def sizes(self):
        return np.diff(self.offsets)

    def block_of(self, dofs):
        return np.searchsorted(self.offsets, dofs, side="right") - 1

    def __eq__(self, other):
        return isinstance(other, BlockPartition) and np.array_equal(self.offsets, other.offsets)

    __hash__ = None

    def __repr__(self):
        return f"BlockPartition(nblocks={self.nblocks}, n={self.n})"


def _as_sparse(A):
    if isinstance(A, SparseMatrix):
        return A
    return SparseMatrix.from_scipy(A)


def spmv(A, x):
    """Return ``A @ x`` for a vector or a stack of column vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.ncols:
        raise ValueError(f"dimension mismatch: matrix has {A.ncols} columns, vector {x.shape[0]} rows")
    return A.to_scipy() @ x


def sparse_product(A, B):
    """Structural sparse product; entries that cancel exactly are dropped."""
    if A.ncols != B.nrows:
        raise ValueError(f"dimension mismatch: {A.shape} @ {B.shape}")
    C = A.to_scipy() @ B.to_scipy()
    C.eliminate_zeros()
    return SparseMatrix.from_scipy(C, check=False)


def transpose(A):
    return SparseMatrix.from_scipy(A.to_scipy().T.tocsr(), check=False)


# ---------------------------------------------------------------------------
# dense LU on stacks of matrices


def _lu_stack(a, first_block=0, block_ids=None):
    """In-place LU with partial pivoting of a (nb, n, n) stack.

    Returns the pivot permutation, shape (nb, n).
    """
    nb, n, _ = a.shape
    perm = np.tile(np.arange(n), (nb, 1))
    rows = np.arange(nb)
    scale = np.abs(a).reshape(nb, -1).max(axis=1) if n else np.zeros(nb)
    tiny = n * np.finfo(float).eps * scale
    for k in range(n):
        piv = k + np.argmax(np.abs(a[:, k:, k]), axis=1)
        swap = piv != k
        if np.any(swap):
            r = rows[swap]
            pk = piv[swap]
            tmp = a[r, k, :].copy()
            a[r, k, :] = a[r, pk, :]
            a[r, pk, :] = tmp
            tp = perm[r, k].copy()
            perm[r, k] = perm[r, pk]
            perm[r, pk] = tp
        pivots = a[:, k, k]
        bad = np.abs(pivots) <= tiny
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            idx = int(block_ids[i]) if block_ids is not None else first_block + i
            raise SingularMatrixError(f"singular block {idx}: zero pivot in column {k}", block=idx)
        if k + 1 < n:
            a[:, k + 1 :, k] /= pivots[:, None]
            a[:, k + 1 :, k + 1 :] -= a[:, k + 1 :, k, None] * a[:, None, k, k + 1 :]
    return perm


def _lu_solve_stack(lu, perm, b):
    """Solve with factors from :func:`_lu_stack`; b has shape (nb, n, m)."""
    nb, n, _ = lu.shape
    y = np.take_along_axis(b, perm[:, :, None], axis=1)
    for i in range(1, n):
        y[:, i, :] -= np.einsum("bj,bjm->bm", lu[:, i, :i], y[:, :i, :])
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            y[:, i, :] -= np.einsum("bj,bjm->bm", lu[:, i, i + 1 :], y[:, i + 1 :, :])
        y[:, i, :] /= lu[:, i, i, None]
    return y


class LUFactors:
    """Dense LU factorisation with partial pivoting, ``P M = L U``."""

    def __init__(self, M):
        M = np.array(M, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("LU needs a square matrix")
        if not np.all(np.isfinite(M)):
            raise ValueError("matrix has non-finite entries")
        self.n = M.shape[0]
        lu = M[None].copy()
        self.perm = _lu_stack(lu)[0]
        self.lu = lu[0]

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ValueError("right-hand side has wrong length")
        vec = b.ndim == 1
        bb = b.reshape(self.n, -1)[None].copy()
        x = _lu_solve_stack(self.lu[None], self.perm[None], bb)[0]
        return x[:, 0] if vec else x


def lu_factor(M):
    return LUFactors(M)


def dense_lu_solve(M, b):
    """Solve ``M x = b`` by Gaussian elimination with partial pivoting."""
    return LUFactors(M).solve(b)


# ---------------------------------------------------------------------------
# block diagonal inverse


def _diagonal_blocks(A, blocks):
    """Extract the dense diagonal blocks of A grouped by block size.

    Returns {size: (block_ids, stack)}.
    """
    csr = A.to_scipy()
    offs = blocks.offsets
    sizes = blocks.sizes
    rows = np.repeat(np.arange(A.nrows), np.diff(csr.indptr))
    cols = csr.indices
    rb = blocks.block_of(rows)
    cb = blocks.block_of(cols)
    keep = rb == cb
    rows, cols, vals, bid = rows[keep], cols[keep], csr.data[keep], rb[keep]
    out = {}
    for s in np.unique(sizes):
        ids = np.flatnonzero(sizes == s)
        stack = np.zeros((len(ids), s, s))
        local = np.full(blocks.nblocks, -1)
        local[ids] = np.arange(len(ids))
        m = local[bid] >= 0
        li = local[bid[m]]
        stack[li, rows[m] - offs[bid[m]], cols[m] - offs[bid[m]]] = vals[m]
        out[int(s)] = (ids, stack)
    return out


class BlockDiagonalInverse:
    """Applies ``D^{-1}`` where D is the block diagonal of A.

    Each diagonal block is LU factorised once; :meth:`solve` performs
    batched forward and back substitution.
    """

    def __init__(self, A, blocks):
        if A.nrows != A.ncols:
            raise ValueError("block diagonal requires a square matrix")
        if blocks.n != A.nrows:
            raise ValueError("block partition does not span the matrix")
        self.blocks = blocks
        self.n = A.nrows
        self._groups = []
        offs = blocks.offsets
        for s, (ids, stack) in sorted(_diagonal_blocks(A, blocks).items()):
            perm = _lu_stack(stack, block_ids=ids)
            rows = (offs[ids][:, None] + np.arange(s)[None, :])
            self._groups.append((rows, stack, perm))

    def solve(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.n:
            raise ValueError("vector length does not match operator")
        vec = v.ndim == 1
        V = v.reshape(self.n, -1)
        out = np.empty_like(V)
        for rows, lu, perm in self._groups:
            out[rows] = _lu_solve_stack(lu, perm, V[rows])
        return out[:, 0] if vec else out

    def as_sparse(self):
        """Explicit block-diagonal inverse, computed column by column from the LU factors."""
        data_r, data_c, data_v = [], [], []
        for rows, lu, perm in self._groups:
            nb, s = rows.shape
            eye = np.broadcast_to(np.eye(s), (nb, s, s)).copy()
            inv = _lu_solve_stack(lu, perm, eye)
            data_r.append(np.repeat(rows, s, axis=1).ravel())
            data_c.append(np.tile(rows, (1, s)).ravel())
            data_v.append(inv.ravel())
        m = sp.csr_matrix(
            (np.concatenate(data_v), (np.concatenate(data_r), np.concatenate(data_c))),
            shape=(self.n, self.n),
        )
        return SparseMatrix.from_scipy(m)


def block_diagonal(A, blocks):
    return BlockDiagonalInverse(A, blocks)


# ---------------------------------------------------------------------------
# one-sided Jacobi SVD


def _round_robin(n):
    """Column pairings for one cyclic round-robin sweep over n (even) columns.

    Each round is returned interleaved, ``[p0, q0, p1, q1, ...]``.
    """
    idx = list(range(n))
    rounds = []
    half = n // 2
    for _ in range(n - 1):
        top, bottom = idx[:half], idx[half:][::-1]
        rounds.append(np.array([c for pair in zip(top, bottom) for c in pair]))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def _hestenes(a, want_v, tol, max_sweeps):
    """Mutually orthogonalise the columns of every matrix in a (nb, m, n) stack.

    Returns the rotated stack (nb, m, n) and, if requested, the accumulated
    rotations V (nb, n, n) such that rotated = a @ V.
    """
    nb, m, n = a.shape
    npad = n + (n % 2)
    half = npad // 2
    # rows of `w` are matrix columns; each round gathers its pairs into
    # adjacent rows so that a rotation is one batched 2x2 matmul
    w = np.zeros((nb, npad, m))
    w[:, :n, :] = np.swapaxes(a, 1, 2)
    v = np.broadcast_to(np.eye(npad), (nb, npad, npad)).copy() if want_v else None
    done = np.zeros(nb, dtype=bool)
    # columns below this squared norm are rounding noise and are left alone
    negligible = (max(m, n) * np.finfo(float).eps) ** 2 * np.sum(a * a, axis=(1, 2))
    rounds = _round_robin(npad) if npad > 1 else []
    converged = npad <= 1
    for _ in range(max_sweeps):
        if converged:
            break
        act_b = np.flatnonzero(~done)
        ww = w[act_b]
        vv = v[act_b] if want_v else None
        floor = negligible[act_b][:, None]
        nact = len(act_b)
        worst = np.zeros(nact)
        pos_of = np.arange(npad)
        for order in rounds:
            g = pos_of[order]
            ww = ww[:, g, :]
            if want_v:
                vv = vv[:, g, :]
            pos_of = np.empty(npad, dtype=np.int64)
            pos_of[order] = np.arange(npad)
            pairs = ww.reshape(nact, half, 2, m)
            gram = pairs @ np.swapaxes(pairs, -1, -2)
            alpha = gram[..., 0, 0]
            beta = gram[..., 1, 1]
            gamma = gram[..., 0, 1]
            denom = np.sqrt(alpha * beta)
            live = (np.minimum(alpha, beta) > floor) & (denom > 0)
            rel = np.divide(np.abs(gamma), denom, out=np.zeros_like(gamma), where=live)
            np.maximum(worst, rel.max(axis=1), out=worst)
            act = rel > tol
            if not act.any():
                continue
            g_safe = np.where(act, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g_safe)
            t = np.where(
                zeta == 0, 1.0, np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            )
            c = np.where(act, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(act, c * t, 0.0)
            rot = np.empty((nact, half, 2, 2))
            rot[..., 0, 0] = c
            rot[..., 0, 1] = -s
            rot[..., 1, 0] = s
            rot[..., 1, 1] = c
            ww = (rot @ pairs).reshape(nact, npad, m)
            if want_v:
                vv = (rot @ vv.reshape(nact, half, 2, npad)).reshape(nact, npad, npad)
        # restore label order so rows line up with `w` again
        w[act_b] = ww[:, pos_of, :]
        if want_v:
            v[act_b] = vv[:, pos_of, :]
        done[act_b[worst <= tol]] = True
        converged = bool(done.all())
    if not converged:
        raise SvdConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")
    out = np.swapaxes(w[:, :n, :], 1, 2)
    if want_v:
        # rotations act on rows of the identity: column j of V is row j of v
        v = np.swapaxes(v[:, :n, :n], 1, 2)
    return out, v


def _complete_orthonormal(u, good):
    """Replace columns of u not flagged `good` by an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if good[j]]
    cand = 0
    for j in range(k):
        if good[j]:
            continue
        while cand < m:
            e = np.zeros(m)
            e[cand] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                u[:, j] = e / nrm
                basis.append(u[:, j])
                break
    return u


def svd_stack(M, compute_v=True, tol=None, max_sweeps=60, method="jacobi"):
    """Thin SVD of every matrix in a (nb, m, n) stack.

    Returns U (nb, m, k), sigma (nb, k), V (nb, n, k) with k = min(m, n);
    singular values are sorted in nonincreasing order and every left
    singular vector has its largest-magnitude entry positive.

    ``method="jacobi"`` runs the one-sided Jacobi iteration of this module;
    ``method="lapack"`` calls LAPACK through :func:`numpy.linalg.svd` and
    applies the same ordering and sign convention.
    """
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("svd input has non-finite entries")
    if method == "lapack":
        return _svd_lapack(M, compute_v)
    if method != "jacobi":
        raise ValueError(f"unknown svd method {method!r}")
    nb, m, n = M.shape
    flip = m < n
    work = np.swapaxes(M, 1, 2).copy() if flip else M.copy()
    mm, nn = work.shape[1:]
    if tol is None:
        tol = max(mm, 4) * np.finfo(float).eps
    need_right = compute_v or flip
    a, w = _hestenes(work, need_right, tol, max_sweeps)
    sig = np.linalg.norm(a, axis=1)
    order = np.argsort(-sig, axis=1, kind="stable")
    sig = np.take_along_axis(sig, order, axis=1)
    a = np.take_along_axis(a, order[:, None, :], axis=2)
    if need_right:
        w = np.take_along_axis(w, order[:, None, :], axis=2)
    # normalised columns of the rotated matrix span the "left" side of work
    scale = sig[:, 0:1] if nn else np.zeros((nb, 1))
    good = sig > np.maximum(scale, np.finfo(float).tiny) * np.finfo(float).eps * mm
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(good[:, None, :], a / np.where(sig > 0, sig, 1.0)[:, None, :], 0.0)
    for b in np.flatnonzero(~good.all(axis=1)):
        left[b] = _complete_orthonormal(left[b], good[b])
    sig = np.where(good, sig, np.where(sig > 0, sig, 0.0))
    if flip:
        U, V = w, left
    else:
        U, V = left, w
    k = min(m, n)
    U = U[:, :, :k]
    sig = sig[:, :k]
    U, V = _fix_signs(U, V[:, :, :k] if (V is not None and compute_v) else None)
    return U, sig, V


def _fix_signs(U, V):
    idx = np.argmax(np.abs(U), axis=1)
    sgn = np.sign(np.take_along_axis(U, idx[:, None, :], axis=1))[:, 0, :]
    sgn[sgn == 0] = 1.0
    U = U * sgn[:, None, :]
    if V is not None:
        V = V * sgn[:, None, :]
    return U, V


def _svd_lapack(M, compute_v):
    nb, m, n = M.shape
    k = min(m, n)
    if k == 0:
        return np.zeros((nb, m, 0)), np.zeros((nb, 0)), (np.zeros((nb, n, 0)) if compute_v else None)
    U, sig, Vt = np.linalg.svd(M, full_matrices=False)
    V = np.swapaxes(Vt, 1, 2) if compute_v else None
    U, V = _fix_signs(U, V)
    return U, sig, V


def svd(M, tol=None, max_sweeps=60):
    """Thin SVD ``M = U diag(sigma) V^T`` by one-sided Jacobi."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("svd expects a 2-D array")
    U, s, V = svd_stack(M[None], compute_v=True, tol=tol, max_sweeps=max_sweeps)
    return U[0], s[0], V[0]


# ---------------------------------------------------------------------------
# MatrixMarket


def mmwrite(path, A):
    """Write A in coordinate real general format with 1-based indices."""
    csr = A.to_scipy()
    rows = np.repeat(np.arange(A.nrows), np.diff(csr.indptr)) + 1
    cols = csr.indices + 1
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{A.nrows} {A.ncols} {A.nnz}\n")
        for r, c, v in zip(rows.tolist(), cols.tolist(), csr.data.tolist()):
            fh.write(f"{r} {c} {v!r}\n")


def mmread(path):
    """Read a coordinate real general MatrixMarket file into a SparseMatrix."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().lower().split()
        if len(header) < 5 or header[0] != "%%matrixmarket":
            raise ValueError(f"{path}: not a MatrixMarket file")
        if header[1:4] != ["matrix", "coordinate", "real"]:
            raise ValueError(f"{path}: only 'matrix coordinate real' is supported")
        symmetry = header[4]
        if symmetry not in ("general", "symmetric"):
            raise ValueError(f"{path}: unsupported symmetry '{symmetry}'")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        nrows, ncols, nnz = (int(t) for t in line.split())
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if data.shape[0] != nnz:
        raise ValueError(f"{path}: expected {nnz} entries, found {data.shape[0]}")
    r = data[:, 0].astype(np.int64) - 1
    c = data[:, 1].astype(np.int64) - 1
    v = data[:, 2]
    if symmetry == "symmetric":
        off = r != c
        r, c, v = np.concatenate([r, c[off]]), np.concatenate([c, r[off]]), np.concatenate([v, v[off]])
    m = sp.csr_matrix((v, (r, c)), shape=(nrows, ncols))
    return SparseMatrix.from_scipy(m)
