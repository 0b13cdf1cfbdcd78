"""DG assembly on uniform Cartesian meshes.

Tensor-product nodal basis of degree p on Gauss-Lobatto points, exact
Gauss-Legendre quadrature with p+1 points per axis. Supported operators:

* ``poisson_ip``: symmetric interior penalty for -mu Laplace(u).
* ``poisson_ldg``: minimal-dissipation LDG (one-sided fluxes, no interior
  penalty) for -mu Laplace(u).
* ``convection``: upwind (Godunov) flux for v . grad(u).
* ``convection_diffusion``: LDG diffusion plus upwind convection.

The mass matrix is absorbed into the right-hand side, so ``A u = f`` with
``f_i = int(f phi_i)`` plus boundary data terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre

from .linalg import BlockPartition, SparseMatrix
from .meshgraph import CartesianMeshSpec, DofMap, build_cartesian

__all__ = [
    "KINDS",
    "ProblemSpec",
    "DgSystem",
    "ExactSolution",
    "assemble",
    "manufactured_rhs",
    "peclet",
    "interpolate",
    "l2_error",
    "face_names",
]

KINDS = ("poisson_ip", "poisson_ldg", "convection", "convection_diffusion")
DIRICHLET, NEUMANN = "dirichlet", "neumann"
_AXES = "xyz"


def face_names(d):
    return tuple(f"{_AXES[a]}{s}" for a in range(d) for s in "-+")


@dataclass(frozen=True)
class ProblemSpec:
    """What to discretise.

    ``boundary`` maps face names (``x-``, ``x+``, ``y-`` ...) to ``dirichlet``
    or ``neumann``; faces not listed are Dirichlet for convection kinds and
    Neumann for Poisson kinds, except ``x-`` which defaults to Dirichlet.
    ``penalty`` is the interior-penalty weight; ``None`` selects (p+1)^2 / h
    with h the element width normal to the face, i.e. 2^M (p+1)^2 / 2 on
    the box [-1, 1]^d.
    ``ldg_tau`` scales the Dirichlet-face LDG penalty tau = ldg_tau / h.
    """

    kind: str
    mesh: CartesianMeshSpec
    mu: float = 1.0
    velocity: tuple = None
    boundary: tuple = None
    penalty: float = None
    ldg_tau: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported problem kind {self.kind!r}; expected one of {KINDS}")
        d = self.mesh.d
        if self.velocity is None:
            object.__setattr__(self, "velocity", (0.0,) * d)
        vel = tuple(float(v) for v in self.velocity)
        if len(vel) != d:
            raise ValueError("velocity needs one component per dimension")
        object.__setattr__(self, "velocity", vel)
        if self.kind in ("convection", "convection_diffusion") and not any(vel):
            raise ValueError(f"{self.kind} needs a nonzero velocity")
        if self.kind in ("poisson_ip", "poisson_ldg") and not self.mu > 0:
            raise ValueError("Poisson kinds need mu > 0")
        if self.kind == "convection_diffusion" and self.mu < 0:
            raise ValueError("diffusion coefficient must be >= 0")
        if self.mesh.p < 1 and self.kind in ("poisson_ip", "poisson_ldg", "convection_diffusion"):
            if self.kind != "poisson_ip":
                raise ValueError(f"{self.kind} requires polynomial degree p >= 1")
        object.__setattr__(self, "boundary", self._resolve_boundary(self.boundary))

    def _resolve_boundary(self, given):
        d = self.mesh.d
        names = face_names(d)
        given = dict(given or ())
        unknown = set(given) - set(names)
        if unknown:
            raise ValueError(f"unknown boundary faces {sorted(unknown)}")
        default = NEUMANN if self.kind.startswith("poisson") else DIRICHLET
        out = []
        for nm in names:
            cond = given.get(nm, DIRICHLET if nm == "x-" else default)
            if cond not in (DIRICHLET, NEUMANN):
                raise ValueError(f"boundary condition must be dirichlet or neumann, got {cond!r}")
            out.append((nm, cond))
        return tuple(out)

    @property
    def boundary_map(self):
        return dict(self.boundary)

    def ip_penalty(self, axis=0):
        """Interior-penalty weight on faces normal to `axis`."""
        if self.penalty is not None:
            return float(self.penalty)
        return (self.mesh.p + 1) ** 2 / float(self.mesh.spacing[axis])

    def with_(self, **kw):
        return replace(self, **kw)


class ExactSolution:
    """u(x) = exp(prod_a sin(pi x_a)) - 1 with its gradient and Laplacian."""

    def __init__(self, d):
        self.d = d

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        s = np.sin(np.pi * x)
        c = np.cos(np.pi * x)
        prod = np.prod(s, axis=-1)
        return s, c, prod

    def __call__(self, x):
        _, _, prod = self._parts(x)
        return np.exp(prod) - 1.0

    def gradient(self, x):
        s, c, prod = self._parts(x)
        e = np.exp(prod)
        out = np.empty(np.shape(x))
        for a in range(self.d):
            others = np.prod(np.delete(s, a, axis=-1), axis=-1)
            out[..., a] = e * np.pi * c[..., a] * others
        return out

    def laplacian(self, x):
        s, c, prod = self._parts(x)
        e = np.exp(prod)
        total = np.zeros(np.shape(x)[:-1])
        for a in range(self.d):
            others = np.prod(np.delete(s, a, axis=-1), axis=-1)
            ds = np.pi * c[..., a] * others
            total += ds * ds - np.pi**2 * prod
        return e * total


@dataclass
class DgSystem:
    A: SparseMatrix
    f: np.ndarray
    dofmap: DofMap
    blocks: BlockPartition
    spec: ProblemSpec
    graph: object = field(repr=False)
    geometry: object = field(repr=False)
    exact_solution: ExactSolution = None

    @property
    def n(self):
        return self.A.nrows


# ---------------------------------------------------------------------------
# 1-D reference element


@lru_cache(maxsize=None)
def _reference(p, nq=None):
    """Nodes, quadrature and 1-D element matrices for degree p on [-1, 1]."""
    if p == 0:
        nodes = np.array([0.0])
    else:
        inner = legendre.Legendre.basis(p).deriv().roots() if p > 1 else np.array([])
        nodes = np.concatenate([[-1.0], np.sort(np.real(inner)), [1.0]])
    nq = p + 1 if nq is None else nq
    xq, wq = legendre.leggauss(nq)
    vals, ders = _lagrange(nodes, xq)
    ends_v, ends_d = _lagrange(nodes, np.array([-1.0, 1.0]))
    W = np.diag(wq)
    return {
        "nodes": nodes,
        "xq": xq,
        "wq": wq,
        "B": vals,  # (nq, p+1)
        "D": ders,
        "M": vals.T @ W @ vals,
        "S": ders.T @ W @ ders,
        # C[i, j] = int phi_i' phi_j  (test derivative, trial value)
        "C": ders.T @ W @ vals,
        "e": ends_v,  # row 0: values at -1, row 1: values at +1
        "de": ends_d,
    }


def _lagrange(nodes, x):
    """Values and derivatives of the Lagrange basis on `nodes` at points x."""
    n = len(nodes)
    vals = np.ones((len(x), n))
    ders = np.zeros((len(x), n))
    for j in range(n):
        others = [k for k in range(n) if k != j]
        denom = np.prod([nodes[j] - nodes[k] for k in others]) if others else 1.0
        num = np.ones(len(x))
        for k in others:
            num = num * (x - nodes[k])
        vals[:, j] = num / denom
        dsum = np.zeros(len(x))
        for m in others:
            term = np.ones(len(x))
            for k in others:
                if k != m:
                    term = term * (x - nodes[k])
            dsum += term
        ders[:, j] = dsum / denom
    return vals, ders


def _kron(mats):
    """Kronecker product with axis 0 varying fastest."""
    out = np.ones((1, 1))
    for m in mats:
        out = np.kron(m, out)
    return out


class _Blocks:
    """COO accumulator for element-block contributions."""

    def __init__(self, nloc):
        self.nloc = nloc
        self.rows, self.cols, self.vals = [], [], []
        li = np.arange(nloc)
        self._ri = np.repeat(li, nloc)
        self._ci = np.tile(li, nloc)

    def add(self, er, ec, block):
        er = np.asarray(er, dtype=np.int64)
        ec = np.asarray(ec, dtype=np.int64)
        if er.size == 0:
            return
        nl = self.nloc
        self.rows.append((er[:, None] * nl + self._ri[None, :]).ravel())
        self.cols.append((ec[:, None] * nl + self._ci[None, :]).ravel())
        self.vals.append(np.broadcast_to(block.ravel(), (len(er), nl * nl)).ravel())

    def matrix(self, n):
        if not self.rows:
            return sp.csr_matrix((n, n))
        m = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(n, n),
        ).tocsr()
        m.sum_duplicates()
        return m


def _face_pairs(geometry, n_axis, a):
    """(lower, upper) element pairs sharing a face normal to axis a."""
    idx = geometry.index
    lower = np.flatnonzero(idx[:, a] < n_axis - 1)
    return lower, lower + n_axis**a


def _boundary_elements(geometry, n_axis, a, upper):
    idx = geometry.index
    return np.flatnonzero(idx[:, a] == (n_axis - 1 if upper else 0))


class _LocalOps:
    """Element-level matrices for one uniform element size."""

    def __init__(self, mesh):
        self.d = d = mesh.d
        self.p = mesh.p
        self.ref = ref = _reference(mesh.p)
        self.h = h = mesh.spacing
        self.J = J = h / 2.0
        M1, S1, C1 = ref["M"], ref["S"], ref["C"]
        self.nloc = (mesh.p + 1) ** d
        self.mass = _kron([J[a] * M1 for a in range(d)])
        self.stiff = sum(
            _kron([(S1 / J[a]) if b == a else J[b] * M1 for b in range(d)]) for a in range(d)
        )
        # int phi_i' phi_j along axis a (test derivative), other axes mass
        self.conv = [_kron([C1 if b == a else J[b] * M1 for b in range(d)]) for a in range(d)]
        # int phi_test d_a phi_trial
        self.grad = [c.T for c in self.conv]

    def perp(self, a, axis_mat):
        return _kron([axis_mat if b == a else self.J[b] * self.ref["M"] for b in range(self.d)])

    def trace(self, a, st, su):
        """int_face phi_test(side st) phi_trial(side su); sides 0=lower, 1=upper."""
        e = self.ref["e"]
        return self.perp(a, np.outer(e[st], e[su]))

    def trace_dn(self, a, st, su):
        """int_face phi_test(side st) d_a phi_trial(side su)."""
        e, de = self.ref["e"], self.ref["de"]
        return self.perp(a, np.outer(e[st], de[su]) / self.J[a])


# ---------------------------------------------------------------------------
# operators


def _ip_operator(spec, geo, ops, acc):
    mesh = spec.mesh
    n_axis = mesh.per_axis
    n_el = mesh.n_elements
    acc.add(np.arange(n_el), np.arange(n_el), ops.stiff)
    bmap = spec.boundary_map
    L, R = 0, 1
    for a in range(mesh.d):
        mu = spec.ip_penalty(a)
        lo, hi = _face_pairs(geo, n_axis, a)
        G = lambda st, su: ops.trace_dn(a, st, su)  # noqa: E731
        H = lambda st, su: ops.trace_dn(a, su, st).T  # noqa: E731
        T = lambda st, su: ops.trace(a, st, su)  # noqa: E731
        acc.add(lo, lo, -0.5 * G(R, R) - 0.5 * H(R, R) + mu * T(R, R))
        acc.add(lo, hi, -0.5 * G(R, L) + 0.5 * H(R, L) - mu * T(R, L))
        acc.add(hi, lo, 0.5 * G(L, R) - 0.5 * H(L, R) - mu * T(L, R))
        acc.add(hi, hi, 0.5 * G(L, L) + 0.5 * H(L, L) + mu * T(L, L))
        for side, sigma in ((L, -1.0), (R, 1.0)):
            if bmap[f"{_AXES[a]}{'-+'[side]}"] != DIRICHLET:
                continue
            els = _boundary_elements(geo, n_axis, a, side == R)
            acc.add(els, els, -sigma * G(side, side) - sigma * H(side, side) + mu * T(side, side))


def _ldg_operator(spec, geo, ops):
    """Return (A_diffusion, G, Mq_inv) for the minimal-dissipation LDG form."""
    mesh = spec.mesh
    d, n_axis, n_el = mesh.d, mesh.per_axis, mesh.n_elements
    nl = ops.nloc
    n = n_el * nl
    bmap = spec.boundary_map
    L, R = 0, 1
    grads = []
    tau_acc = _Blocks(nl)
    for a in range(d):
        acc = _Blocks(nl)
        acc.add(np.arange(n_el), np.arange(n_el), ops.grad[a])
        lo, hi = _face_pairs(geo, n_axis, a)
        # switch vector along +e_a: u-hat from the lower element, q-hat
        # from the upper one (the latter is implied by taking G^T)
        acc.add(hi, lo, -ops.trace(a, L, R))
        acc.add(hi, hi, ops.trace(a, L, L))
        for side, sigma in ((L, -1.0), (R, 1.0)):
            if bmap[f"{_AXES[a]}{'-+'[side]}"] != DIRICHLET:
                continue
            els = _boundary_elements(geo, n_axis, a, side == R)
            acc.add(els, els, -sigma * ops.trace(a, side, side))
            tau = spec.ldg_tau / ops.h[a]
            tau_acc.add(els, els, tau * ops.trace(a, side, side))
        grads.append(acc.matrix(n))
    G = sp.vstack(grads).tocsr()
    minv_local = np.linalg.inv(ops.mass)
    Minv = sp.kron(sp.identity(d * n_el, format="csr"), sp.csr_matrix(minv_local), format="csr")
    A = (G.T @ (Minv @ G)).tocsr() + tau_acc.matrix(n)
    return A, G, Minv


def _convection_operator(spec, geo, ops, acc):
    mesh = spec.mesh
    n_axis, n_el = mesh.per_axis, mesh.n_elements
    v = spec.velocity
    L, R = 0, 1
    vol = -sum(v[a] * ops.conv[a] for a in range(mesh.d))
    acc.add(np.arange(n_el), np.arange(n_el), vol)
    for a in range(mesh.d):
        va = v[a]
        if va == 0:
            continue
        lo, hi = _face_pairs(geo, n_axis, a)
        if va > 0:
            acc.add(lo, lo, va * ops.trace(a, R, R))
            acc.add(hi, lo, -va * ops.trace(a, L, R))
        else:
            acc.add(lo, hi, va * ops.trace(a, R, L))
            acc.add(hi, hi, -va * ops.trace(a, L, L))
        for side, sigma in ((L, -1.0), (R, 1.0)):
            vn = sigma * va
            if vn > 0:
                els = _boundary_elements(geo, n_axis, a, side == R)
                acc.add(els, els, vn * ops.trace(a, side, side))


def assemble(spec, rhs=True):
    """Assemble the DG system; the right-hand side comes from the manufactured
    solution unless ``rhs`` is False (then f = 0)."""
    mesh = spec.mesh
    graph, geo = build_cartesian(mesh)
    ops = _LocalOps(mesh)
    n = mesh.n_elements * ops.nloc
    acc = _Blocks(ops.nloc)
    extra = None
    if spec.kind == "poisson_ip":
        _ip_operator(spec, geo, ops, acc)
        A = acc.matrix(n) * spec.mu if spec.mu != 1.0 else acc.matrix(n)
    elif spec.kind == "poisson_ldg":
        Ad, G, Minv = _ldg_operator(spec, geo, ops)
        extra = (G, Minv)
        A = Ad * spec.mu if spec.mu != 1.0 else Ad
    elif spec.kind == "convection":
        _convection_operator(spec, geo, ops, acc)
        A = acc.matrix(n)
    else:
        _convection_operator(spec, geo, ops, acc)
        A = acc.matrix(n)
        if spec.mu > 0:
            Ad, G, Minv = _ldg_operator(spec, geo, ops)
            extra = (G, Minv)
            A = A + spec.mu * Ad
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    dofmap = graph.dofmap()
    system = DgSystem(
        A=SparseMatrix.from_scipy(A),
        f=np.zeros(n),
        dofmap=dofmap,
        blocks=dofmap.blocks(),
        spec=spec,
        graph=graph,
        geometry=geo,
    )
    system._ops = ops
    system._ldg = extra
    if rhs:
        f, exact = manufactured_rhs(spec, system)
        system.f = f
        system.exact_solution = exact
    return system


# ---------------------------------------------------------------------------
# right-hand side and error measurement


def _tensor_weights_and_basis(nodes, pts, wts, d):
    vals, _ = _lagrange(nodes, pts)
    basis = _kron([vals] * d)  # (npts^d, nloc)
    w = _kron([wts[:, None]] * d)[:, 0]
    return basis, w


def _volume_points(geo, xi_nd):
    """Physical coordinates of reference points in every element."""
    h = geo.spacing
    return geo.lower_corners[:, None, :] + (xi_nd[None, :, :] + 1.0) * (h / 2.0)[None, None, :]


def _face_quadrature(ops, a, side, nq):
    """Reference points/weights on face (axis a, side) and basis traces there."""
    d = ops.d
    nodes = ops.ref["nodes"]
    xq, wq = legendre.leggauss(nq)
    vals, ders = _lagrange(nodes, xq)
    end_v, end_d = _lagrange(nodes, np.array([-1.0, 1.0]))
    mats_v, mats_d, pts_axes, w_axes = [], [], [], []
    for b in range(d):
        if b == a:
            mats_v.append(end_v[side : side + 1])
            mats_d.append(end_d[side : side + 1] / ops.J[a])
            pts_axes.append(np.array([-1.0 if side == 0 else 1.0]))
            w_axes.append(np.array([1.0]))
        else:
            mats_v.append(vals)
            mats_d.append(vals)
            pts_axes.append(xq)
            w_axes.append(wq * ops.J[b])
    basis = _kron(mats_v)
    dbasis = _kron(mats_d)
    pts = _tensor_from_axes(pts_axes)
    w = _kron([wa[:, None] for wa in w_axes])[:, 0]
    return pts, w, basis, dbasis


def _tensor_from_axes(axes):
    """Tensor product points with axis 0 varying fastest."""
    grids = np.meshgrid(*axes[::-1], indexing="ij")
    return np.stack([g.ravel() for g in grids[::-1]], axis=1)


def manufactured_rhs(spec, system):
    """Load vector for u = exp(prod sin(pi x_a)) - 1 and the exact solution.

    The source is the strong residual of u; Dirichlet faces take u and
    Neumann faces its normal derivative. Quadrature uses p+2 points per axis.
    """
    mesh = spec.mesh
    d = mesh.d
    geo = system.geometry
    ops = system._ops
    exact = ExactSolution(d)
    nq = mesh.p + 2
    xq, wq = legendre.leggauss(nq)
    basis, w = _tensor_weights_and_basis(ops.ref["nodes"], xq, wq, d)
    w = w * np.prod(ops.J)
    xi = _tensor_from_axes([xq] * d)
    X = _volume_points(geo, xi)  # (n_el, npts, d)
    src = np.zeros(X.shape[:2])
    if spec.kind in ("poisson_ip", "poisson_ldg", "convection_diffusion"):
        src -= spec.mu * exact.laplacian(X)
    if spec.kind in ("convection", "convection_diffusion"):
        src += exact.gradient(X) @ np.asarray(spec.velocity)
    F = (src * w[None, :]) @ basis  # (n_el, nloc)
    bmap = spec.boundary_map
    n_axis = mesh.per_axis
    vel = np.asarray(spec.velocity)
    for a in range(d):
        for side, sigma in ((0, -1.0), (1, 1.0)):
            cond = bmap[f"{_AXES[a]}{'-+'[side]}"]
            els = _boundary_elements(geo, n_axis, a, side == 1)
            pts, fw, fb, fdb = _face_quadrature(ops, a, side, nq)
            Xf = _volume_points(geo, pts)[els]
            g = exact(Xf)
            normal = np.zeros(d)
            normal[a] = sigma
            dn = exact.gradient(Xf) @ normal
            contrib = np.zeros((len(els), ops.nloc))
            diffusive = spec.kind != "convection" and spec.mu > 0
            if diffusive:
                if cond == NEUMANN:
                    contrib += spec.mu * (dn * fw) @ fb
                elif spec.kind == "poisson_ip":
                    contrib += spec.mu * (
                        -(g * fw) @ (sigma * fdb) + spec.ip_penalty(a) * (g * fw) @ fb
                    )
                else:
                    tau = spec.ldg_tau / ops.h[a]
                    contrib += spec.mu * tau * (g * fw) @ fb
            if spec.kind in ("convection", "convection_diffusion"):
                vn = sigma * vel[a]
                if vn < 0:
                    contrib += -vn * (g * fw) @ fb
            F[els] += contrib
    f = F.ravel()
    if spec.kind in ("poisson_ldg", "convection_diffusion") and system._ldg is not None:
        f = f - _ldg_dirichlet_lift(spec, system, exact, nq)
    return f, exact


def _ldg_dirichlet_lift(spec, system, exact, nq):
    """mu * G^T Mq^{-1} g where g_w = int_Dirichlet g_D w . n."""
    mesh = spec.mesh
    d, n_axis = mesh.d, mesh.per_axis
    geo = system.geometry
    ops = system._ops
    G, Minv = system._ldg
    n_el, nl = mesh.n_elements, ops.nloc
    gvec = np.zeros(d * n_el * nl)
    bmap = spec.boundary_map
    for a in range(d):
        for side, sigma in ((0, -1.0), (1, 1.0)):
            if bmap[f"{_AXES[a]}{'-+'[side]}"] != DIRICHLET:
                continue
            els = _boundary_elements(geo, n_axis, a, side == 1)
            pts, fw, fb, _ = _face_quadrature(ops, a, side, nq)
            g = exact(_volume_points(geo, pts)[els])
            vals = sigma * (g * fw) @ fb
            rows = (a * n_el + els)[:, None] * nl + np.arange(nl)[None, :]
            gvec[rows.ravel()] += vals.ravel()
    return spec.mu * (G.T @ (Minv @ gvec))


def interpolate(system, func):
    """Nodal interpolant of `func` (nodal basis: values at the GLL nodes)."""
    d = system.spec.mesh.d
    nodes = system._ops.ref["nodes"]
    xi = _tensor_from_axes([nodes] * d)
    X = _volume_points(system.geometry, xi)
    return func(X).ravel()


def l2_error(system, u, func=None):
    """L2 norm of u_h - func over the mesh (p+2 point Gauss rule per axis)."""
    func = func or system.exact_solution
    d = system.spec.mesh.d
    ops = system._ops
    nq = system.spec.mesh.p + 2
    xq, wq = legendre.leggauss(nq)
    basis, w = _tensor_weights_and_basis(ops.ref["nodes"], xq, wq, d)
    w = w * np.prod(ops.J)
    X = _volume_points(system.geometry, _tensor_from_axes([xq] * d))
    uh = np.asarray(u).reshape(-1, ops.nloc) @ basis.T
    err = uh - func(X)
    return math.sqrt(float(np.sum(err * err * w[None, :])))


def peclet(spec):
    """Pe = |v| L / mu with L = 2 (width of [-1, 1]); infinite without diffusion."""
    if spec.kind != "convection_diffusion":
        raise ValueError("peclet number is defined for convection_diffusion problems")
    speed = float(np.linalg.norm(spec.velocity))
    width = spec.mesh.upper[0] - spec.mesh.lower[0]
    if spec.mu == 0:
        return math.inf
    return speed * width / spec.mu
