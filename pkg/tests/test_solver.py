import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from aggmg.dg import ProblemSpec, assemble
from aggmg.hierarchy import SetupConfig, build
from aggmg.linalg import SparseMatrix
from aggmg.meshgraph import CartesianMeshSpec, ElementGraph, build_cartesian
from aggmg.partition import build_hierarchy
from aggmg.solver import (
    CycleConfig,
    NegativeCurvatureError,
    SolveReport,
    mg_preconditioner,
    pcg,
    pgmres,
    quality_probe,
    solve_mg,
    vcycle,
)
from experiments import cached
from oracles import laplacian_1d, random_spd, textbook_cg


def _identity_hierarchy(d, M, p=1):
    g, _ = build_cartesian(CartesianMeshSpec(d, M, p))
    return build(SparseMatrix.identity(g.n_dofs), g, build_hierarchy(g, d))


@pytest.fixture(scope="module")
def spd():
    s = assemble(ProblemSpec("poisson_ip", CartesianMeshSpec(2, 4, 1)))
    h = build(s.A, s.graph, build_hierarchy(s.graph, 2), SetupConfig())
    return s, h


# vcycle


def test_single_level_is_exact():
    g = ElementGraph([[]], [6])
    A = random_spd(6, np.random.default_rng(0))
    h = build(SparseMatrix.from_dense(A), g, build_hierarchy(g, 1))
    assert h.n_levels == 1
    b = np.arange(6.0)
    np.testing.assert_allclose(A @ vcycle(h, 0, b), b, atol=1e-12)


def test_zero_rhs_gives_zero(spd):
    _, h = spd
    x = vcycle(h, 0, np.zeros(h.levels[0].dof))
    assert np.all(x == 0.0)


def test_vcycle_symmetric_positive_definite(spd):
    _, h = spd
    rng = np.random.default_rng(1)
    M = mg_preconditioner(h)
    for _ in range(5):
        x, y = rng.standard_normal((2, h.levels[0].dof))
        lhs, rhs = M(x) @ y, x @ M(y)
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
        assert M(x) @ x > 0


def test_vcycle_rejects_wrong_length(spd):
    _, h = spd
    with pytest.raises(ValueError, match="does not match"):
        vcycle(h, 0, np.ones(3))


# solve_mg


def test_mg_ip_poisson_m3():
    run = cached("poisson_ip", 3, 3, 1)
    assert run.mg.converged
    assert run.mg.iterations <= 10


def test_mg_identity_single_level():
    h = _identity_hierarchy(1, 0, 3)
    _, rep = solve_mg(h, np.ones(4))
    assert rep.iterations == 1 and rep.converged


def test_mg_identity_multilevel_contraction():
    # pre and post smoothing each multiply the error by (1 - 4/3)^3 and the
    # coarse correction is an orthogonal projection, so each cycle gains >= 729
    h = _identity_hierarchy(2, 3)
    assert h.n_levels == 3
    _, rep = solve_mg(h, np.random.default_rng(2).standard_normal(h.levels[0].dof))
    hist = np.array(rep.residual_history)
    assert rep.converged
    assert np.all(hist[1:] <= hist[:-1] / 729 * (1 + 1e-9))


def test_mg_history_strictly_decreasing(spd):
    s, h = spd
    u, rep = solve_mg(h, s.f)
    assert rep.converged and rep.reason == "tolerance"
    assert np.all(np.diff(rep.residual_history) < 0)
    assert len(rep.residual_history) == rep.iterations + 1
    assert np.linalg.norm(s.f - s.A.to_scipy() @ u) / np.linalg.norm(s.f) == pytest.approx(rep.final_residual)


def test_mg_reports_nonconvergence(spd):
    s, h = spd
    _, rep = solve_mg(h, s.f, CycleConfig(max_iters=2))
    assert not rep.converged and rep.reason == "max_iters" and rep.iterations == 2


def test_mg_zero_rhs(spd):
    _, h = spd
    u, rep = solve_mg(h, np.zeros(h.levels[0].dof))
    assert rep.converged and rep.iterations == 0 and not u.any()


# pcg


def test_pcg_ldg_m4_with_mg():
    run = cached("poisson_ldg", 3, 4, 1)
    assert run.pcg.converged
    assert run.pcg.iterations <= 10


def test_pcg_exact_preconditioner():
    A = random_spd(15, np.random.default_rng(3))
    Ainv = np.linalg.inv(A)
    _, rep = pcg(SparseMatrix.from_dense(A), lambda r: Ainv @ r, np.ones(15))
    assert rep.iterations == 1 and rep.converged


def test_pcg_identity_matches_textbook_cg():
    A = laplacian_1d(50)
    b = np.random.default_rng(4).standard_normal(50)
    cfg = CycleConfig(tol=1e-10, max_iters=200)
    x1, r1 = pcg(SparseMatrix.from_scipy(A), lambda r: r.copy(), b, cfg)
    x0, ref = textbook_cg(A, b, 1e-10, 200)
    assert r1.iterations == len(ref) - 1
    np.testing.assert_allclose(r1.residual_history, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(x1, x0, atol=1e-12 * np.abs(x0).max())


def test_pcg_detects_indefinite():
    A = SparseMatrix.from_dense(np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(NegativeCurvatureError):
        pcg(A, None, np.ones(3))


def test_pcg_mg_on_spd_fixture(spd):
    s, h = spd
    _, rep = pcg(s.A, mg_preconditioner(h), s.f, levels=h)
    assert rep.converged and rep.iterations <= 10
    assert [row["dof"] for row in rep.levels] == [lev.dof for lev in h.levels]


# pgmres


@pytest.mark.slow
def test_gmres_convection_diffusion_pe100():
    v = tuple(np.array([1.0, 2.0, 3.0]) / np.sqrt(14))
    s = assemble(ProblemSpec("convection_diffusion", CartesianMeshSpec(3, 3, 1), mu=0.02, velocity=v))
    h = build(s.A, s.graph, build_hierarchy(s.graph, 3), SetupConfig())
    _, rep = pgmres(s.A, mg_preconditioner(h), s.f, levels=h)
    assert rep.converged and rep.iterations <= 25


def test_gmres_identity():
    _, rep = pgmres(SparseMatrix.identity(9), None, np.arange(1.0, 10.0))
    assert rep.iterations == 1 and rep.converged


def test_gmres_full_krylov_space():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((20, 20)) + 5 * np.eye(20)
    b = rng.standard_normal(20)
    x, rep = pgmres(SparseMatrix.from_dense(A), None, b, CycleConfig(tol=1e-10, gmres_restart=20, max_iters=20))
    assert rep.converged and rep.iterations <= 20
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)


@given(st.integers(2, 25), st.integers(0, 10_000), st.integers(1, 30))
def test_gmres_unpreconditioned_residual_monotone(n, seed, restart):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) + 3 * np.sqrt(n) * np.eye(n)
    b = rng.standard_normal(n)
    x, rep = pgmres(SparseMatrix.from_dense(A), None, b, CycleConfig(tol=1e-9, gmres_restart=restart, max_iters=400))
    hist = np.array(rep.residual_history)
    assert np.all(hist[1:] <= hist[:-1] * (1 + 1e-10))
    if rep.converged:
        assert np.linalg.norm(A @ x - b) <= 1e-9 * np.linalg.norm(b) * (1 + 1e-6)


def test_gmres_breakdown_is_reported():
    # b lies in a 2-D invariant subspace, so the Krylov space stops growing at j = 2
    A = np.zeros((4, 4))
    A[:2, :2] = [[1.3, -0.7], [0.4, 2.9]]
    A[2:, 2:] = np.diag([5.0, 7.0])
    x, rep = pgmres(SparseMatrix.from_dense(A), None, np.array([0.3, 1.1, 0.0, 0.0]), CycleConfig(tol=1e-300))
    assert rep.iterations == 2
    assert "breakdown" in rep.reason and not rep.converged
    assert rep.final_residual <= 1e-14


def test_gmres_restart_and_limit():
    A = laplacian_1d(60)
    b = np.ones(60)
    _, rep = pgmres(SparseMatrix.from_scipy(A), None, b, CycleConfig(gmres_restart=5, max_iters=12))
    assert not rep.converged and rep.iterations == 12 and rep.reason == "max_iters"


# misc


def test_quality_probe_contracts(spd):
    _, h = spd
    assert 0 < quality_probe(h) < 0.5


def test_report_dict_roundtrip():
    rep = SolveReport("mg", 2, [1.0, 0.1, 0.01], True, 1.5, "tolerance", [])
    assert "wall_time" not in rep.to_dict(include_time=False)
    assert rep.to_dict()["final_residual"] == 0.01


def test_cycle_config_validation():
    with pytest.raises(ValueError):
        CycleConfig(tol=0.0)
    with pytest.raises(ValueError):
        CycleConfig(t_pre=-1)
