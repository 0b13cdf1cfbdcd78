"""V-cycle, stationary multigrid and Krylov solvers.

All solvers start from u = 0 and stop when the true relative residual
``||f - A u|| / ||f||`` drops below the tolerance. Non-convergence, stagnation
and breakdown are returned in the :class:`SolveReport`, never raised, with
the exception of negative curvature in CG which means the input is not SPD.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .hierarchy import MgHierarchy, apply_level_operator
from .linalg import SparseMatrix

__all__ = [
    "CycleConfig",
    "SolveReport",
    "NegativeCurvatureError",
    "vcycle",
    "mg_preconditioner",
    "solve_mg",
    "pcg",
    "pgmres",
    "quality_probe",
]


class NegativeCurvatureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class CycleConfig:
    """Cycle and iteration controls.

    Attributes
    ----------
    t_pre, t_post : int
        Smoothing sweeps before and after the coarse correction.
    tol : float
        Relative residual tolerance.
    max_iters : int
    gmres_restart : int
    """

    t_pre: int = 3
    t_post: int = 3
    tol: float = 1e-7
    max_iters: int = 500
    gmres_restart: int = 1000

    def __post_init__(self):
        if self.t_pre < 0 or self.t_post < 0:
            raise ValueError("smoothing sweep counts must be >= 0")
        if not self.tol > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.gmres_restart < 1:
            raise ValueError("gmres_restart must be >= 1")


@dataclass
class SolveReport:
    """Outcome of a solve.

    ``residual_history[i]`` is the relative residual after i iterations, so
    the list has ``iterations + 1`` entries.
    """

    method: str
    iterations: int
    residual_history: list
    converged: bool
    wall_time: float = 0.0
    reason: str = ""
    levels: list = field(default_factory=list)

    @property
    def final_residual(self):
        return self.residual_history[-1]

    def to_dict(self, include_time=True):
        out = {
            "method": self.method,
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
            "final_residual": self.final_residual,
            "residual_history": list(self.residual_history),
            "levels": self.levels,
        }
        if include_time:
            out["wall_time"] = self.wall_time
        return out


def _as_apply(op):
    if isinstance(op, SparseMatrix):
        csr = op.to_scipy()
        return lambda x: csr @ x
    if isinstance(op, MgHierarchy):
        return lambda x: apply_level_operator(op, 0, x)
    if hasattr(op, "tocsr"):
        csr = op.tocsr()
        return lambda x: csr @ x
    if callable(op):
        return op
    raise TypeError(f"cannot apply an object of type {type(op).__name__}")


def _level_table(h):
    if h is None:
        return []
    return [{"k": lev.k, "dof": lev.dof, "nnz": lev.nnz} for lev in h.levels]


# ---------------------------------------------------------------------------
# V-cycle


def _relax(h, k, x, b, sweeps):
    S = h.levels[k].smoother
    for _ in range(sweeps):
        if x is None:
            x = S.omega * S.inverse(b)
        else:
            x = x + S.omega * S.inverse(b - apply_level_operator(h, k, x))
    return x


def vcycle(h, k, b, cfg=None):
    """One V-cycle for ``A_k x = b`` from a zero initial guess."""
    cfg = cfg or CycleConfig()
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != h.levels[k].dof:
        raise ValueError(f"right-hand side length {b.shape[0]} does not match level {k} ({h.levels[k].dof})")
    if k == h.n_levels - 1:
        return h.bottom.solve(b)
    x = _relax(h, k, None, b, cfg.t_pre)
    r = b if x is None else b - apply_level_operator(h, k, x)
    coarse = h.levels[k + 1]
    xc = vcycle(h, k + 1, coarse.R.to_scipy() @ r, cfg)
    corr = coarse.T.to_scipy() @ xc
    x = corr if x is None else x + corr
    return _relax(h, k, x, b, cfg.t_post)


def mg_preconditioner(h, cfg=None):
    """``b -> vcycle(h, 0, b)``."""
    cfg = cfg or CycleConfig()
    return lambda b: vcycle(h, 0, b, cfg)


# ---------------------------------------------------------------------------
# stationary multigrid


def solve_mg(h, f, cfg=None, stagnation_window=10, stagnation_factor=1e-3):
    """Repeat ``u <- u + vcycle(f - A u)`` until the relative residual is below tol.

    Stagnation (relative reduction below `stagnation_factor` over
    `stagnation_window` cycles) ends the solve unconverged.
    """
    cfg = cfg or CycleConfig()
    t0 = time.perf_counter()
    f = np.asarray(f, dtype=np.float64)
    A = lambda x: apply_level_operator(h, 0, x)  # noqa: E731
    u = np.zeros_like(f)
    fnorm = float(np.linalg.norm(f))
    if fnorm == 0.0:
        return u, SolveReport("mg", 0, [0.0], True, time.perf_counter() - t0, "zero right-hand side", _level_table(h))
    r = f.copy()
    hist = [1.0]
    reason = "max_iters"
    converged = False
    for it in range(1, cfg.max_iters + 1):
        u = u + vcycle(h, 0, r, cfg)
        r = f - A(u)
        rel = float(np.linalg.norm(r)) / fnorm
        hist.append(rel)
        if not math.isfinite(rel):
            reason = "diverged"
            break
        if rel < cfg.tol:
            converged, reason = True, "tolerance"
            break
        if it >= stagnation_window and hist[-1] > (1.0 - stagnation_factor) * hist[-1 - stagnation_window]:
            reason = "stagnation"
            break
    return u, SolveReport("mg", len(hist) - 1, hist, converged, time.perf_counter() - t0, reason, _level_table(h))


# ---------------------------------------------------------------------------
# conjugate gradients


def pcg(A_apply, M_apply, f, cfg=None, levels=None):
    """Preconditioned conjugate gradients.

    Parameters
    ----------
    A_apply, M_apply : callable or SparseMatrix
        The SPD operator and the SPD preconditioner ``M^{-1}``; ``None`` for
        M gives plain CG.
    f : ndarray
    cfg : CycleConfig
    levels : MgHierarchy, optional
        Only used to fill the level table of the report.

    Raises
    ------
    NegativeCurvatureError
        If ``<p, A p> <= 0``.
    """
    cfg = cfg or CycleConfig()
    t0 = time.perf_counter()
    A = _as_apply(A_apply)
    M = (lambda x: x.copy()) if M_apply is None else _as_apply(M_apply)
    f = np.asarray(f, dtype=np.float64)
    u = np.zeros_like(f)
    fnorm = float(np.linalg.norm(f))
    table = _level_table(levels)
    if fnorm == 0.0:
        return u, SolveReport("pcg", 0, [0.0], True, time.perf_counter() - t0, "zero right-hand side", table)
    r = f.copy()
    z = M(r)
    p = z.copy()
    rz = float(r @ z)
    hist = [1.0]
    converged, reason = False, "max_iters"
    for it in range(1, cfg.max_iters + 1):
        Ap = A(p)
        curv = float(p @ Ap)
        if not curv > 0:
            raise NegativeCurvatureError(f"<p, A p> = {curv:.3e} at iteration {it}: operator is not SPD")
        alpha = rz / curv
        u = u + alpha * p
        r = r - alpha * Ap
        rel = float(np.linalg.norm(r)) / fnorm
        if rel < cfg.tol:
            # confirm on the true residual
            r = f - A(u)
            rel = float(np.linalg.norm(r)) / fnorm
            if rel < cfg.tol:
                hist.append(rel)
                converged, reason = True, "tolerance"
                break
        hist.append(rel)
        if not math.isfinite(rel):
            reason = "diverged"
            break
        z = M(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return u, SolveReport("pcg", len(hist) - 1, hist, converged, time.perf_counter() - t0, reason, table)


# ---------------------------------------------------------------------------
# GMRES


def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0
    r = math.hypot(a, b)
    return a / r, b / r


def pgmres(A_apply, M_apply, f, cfg=None, levels=None, breakdown_tol=1e-14):
    """Left-preconditioned restarted GMRES.

    The Krylov space of ``M^{-1} A`` is orthogonalised by modified
    Gram-Schmidt with one reorthogonalisation pass. Convergence is tested
    on the true residual of the unpreconditioned system, available at no
    extra operator cost because the products ``A v_j`` are kept.

    A subdiagonal Hessenberg entry below ``breakdown_tol`` times the norm of
    the new direction ends the cycle (the solution lies in the current
    subspace); the report states it.
    """
    cfg = cfg or CycleConfig()
    t0 = time.perf_counter()
    A = _as_apply(A_apply)
    M = (lambda x: np.array(x, copy=True)) if M_apply is None else _as_apply(M_apply)
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[0]
    u = np.zeros_like(f)
    fnorm = float(np.linalg.norm(f))
    table = _level_table(levels)
    if fnorm == 0.0:
        return u, SolveReport("pgmres", 0, [0.0], True, time.perf_counter() - t0, "zero right-hand side", table)
    m = min(cfg.gmres_restart, cfg.max_iters)
    hist = [1.0]
    its = 0
    converged, reason = False, "max_iters"
    r_true = f.copy()
    while its < cfg.max_iters and not converged:
        z = M(r_true)
        beta = float(np.linalg.norm(z))
        if beta == 0.0:
            reason = "preconditioned residual vanished"
            break
        cap = min(m, 32)
        V = np.zeros((cap + 1, n))
        W = np.zeros((cap, n))  # W[j] = A V[j]
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = z / beta
        y = None
        broke = False
        j = 0
        while j < m and its < cfg.max_iters:
            if j + 1 >= V.shape[0]:
                grow = min(2 * (V.shape[0] - 1), m)
                V = np.vstack([V, np.zeros((grow + 1 - V.shape[0], n))])
                W = np.vstack([W, np.zeros((grow - W.shape[0], n))])
            W[j] = A(V[j])
            w = M(W[j])
            wnorm = float(np.linalg.norm(w))
            for _ in range(2):
                for i in range(j + 1):
                    hij = float(V[i] @ w)
                    H[i, j] += hij
                    w -= hij * V[i]
            hn = float(np.linalg.norm(w))
            H[j + 1, j] = hn
            for i in range(j):
                a, b = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * a + sn[i] * b
                H[i + 1, j] = -sn[i] * a + cs[i] * b
            cs[j], sn[j] = _givens(H[j, j], H[j + 1, j])
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            j += 1
            its += 1
            y = _back_substitute(H[:j, :j], g[:j])
            res = r_true - W[:j].T @ y
            rel = float(np.linalg.norm(res)) / fnorm
            hist.append(rel)
            if not math.isfinite(rel):
                reason = "diverged"
                broke = True
                break
            if rel < cfg.tol:
                converged, reason = True, "tolerance"
                break
            if hn <= breakdown_tol * max(wnorm, np.finfo(float).tiny):
                broke = True
                reason = "breakdown: solution lies in the Krylov subspace"
                break
            V[j] = w / hn
        if y is not None:
            u = u + V[: len(y)].T @ y
            r_true = f - A(u)
        if broke and not converged:
            break
    if converged:
        reason = "tolerance"
    return u, SolveReport("pgmres", len(hist) - 1, hist, converged, time.perf_counter() - t0, reason, table)


def _back_substitute(R, g):
    return solve_triangular(R, g, lower=False, check_finite=False)


def quality_probe(h, cfg=None, cycles=5, seed=0):
    """Average residual reduction per V-cycle on ``A u = 0`` from a random start.

    A post-setup check of the hierarchy; values well below 1 indicate an
    effective multigrid cycle.
    """
    cfg = cfg or CycleConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    u = rng.standard_normal(h.levels[0].dof)
    r0 = -apply_level_operator(h, 0, u)
    r = r0
    n0 = float(np.linalg.norm(r0))
    for _ in range(cycles):
        u = u + vcycle(h, 0, r, cfg)
        r = -apply_level_operator(h, 0, u)
    return (float(np.linalg.norm(r)) / n0) ** (1.0 / cycles) if n0 > 0 else 0.0
