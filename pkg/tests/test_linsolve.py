import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from fractions import Fraction

from eyeflow.coupled import CoupledProblem, PhysicalParams, make_spaces
from eyeflow.exceptions import SolverError, ZeroPivotError
from eyeflow.linsolve import (AdditiveSchwarz, BlockSystem, PreconditionerOptions, build_block_preconditioner,
                              dense_solve, dump_matrix_market, gmres, ilu0)

from conftest import K_REGIONS


def diag_dominant(n, rng, density=0.1, symmetric=True):
    A = sp.random(n, n, density=density, random_state=np.random.RandomState(int(rng.integers(1 << 30))))
    if symmetric:
        A = A + A.T
    A = A + sp.diags(np.abs(A).sum(axis=1).A1 + 1.0 + rng.uniform(0, 5, n))
    return A.tocsr()


# ------------------------------------------------------------------ gmres

def test_identity_one_iteration(rng):
    b = rng.standard_normal(20)
    res = gmres(sp.identity(20, format="csr"), b)
    assert res.iterations == 1 and res.converged
    assert np.allclose(res.x, b)


def test_two_by_two():
    x, its, hist = gmres(np.array([[4.0, 1.0], [1.0, 3.0]]), np.array([1.0, 2.0]), tol=1e-12)
    assert np.allclose(x, [1 / 11, 7 / 11], atol=1e-12)
    assert its <= 2


def test_ilu_reduces_iterations(rng):
    A = diag_dominant(50, rng)
    b = rng.standard_normal(50)
    plain = gmres(A, b, tol=1e-10)
    pre = gmres(A, b, ilu0(A), tol=1e-10)
    assert plain.converged and pre.converged
    assert pre.iterations < plain.iterations
    assert np.linalg.norm(A @ pre.x - b) <= 1e-9 * np.linalg.norm(b)


def test_history_monotone_across_restarts(rng):
    A = diag_dominant(120, rng, symmetric=False) + sp.random(120, 120, density=0.2, random_state=3) * 5
    b = rng.standard_normal(120)
    res = gmres(A, b, ilu0(A.tocsr()), tol=1e-10, restart=5, max_iter=400)
    h = np.asarray(res.history)
    assert np.all(np.diff(h) <= 1e-12 * h[0])


def test_max_iter_flagged(rng):
    A = diag_dominant(80, rng, density=0.3, symmetric=False)
    res = gmres(A, rng.standard_normal(80), tol=1e-14, max_iter=3, restart=3)
    assert not res.converged and res.iterations == 3


def test_gmres_errors():
    A = np.eye(3)
    with pytest.raises(SolverError, match="tol"):
        gmres(A, np.ones(3), tol=1.5)
    with pytest.raises(SolverError, match="shape"):
        gmres(A, np.ones(4))
    with pytest.raises(SolverError, match="non-finite"):
        gmres(lambda v: v * np.nan, np.ones(3))


def test_happy_breakdown(rng):
    # rhs in a 2-dimensional invariant subspace: exact after 2 steps
    A = np.diag([1.0, 2.0, 3.0, 4.0])
    x, its, _ = gmres(A, np.array([1.0, 1.0, 0, 0]), tol=1e-14)
    assert its == 2 and np.allclose(x, [1, 0.5, 0, 0])


def test_zero_rhs():
    x, its, _ = gmres(np.eye(4), np.zeros(4))
    assert np.all(x == 0)


# ------------------------------------------------------------------ ilu

def test_ilu_diagonal_exact(rng):
    d = sp.diags(rng.uniform(1, 3, 30)).tocsr()
    b = rng.standard_normal(30)
    res = gmres(d, b, ilu0(d))
    assert res.iterations == 1 and np.allclose(res.x, b / d.diagonal())


def test_ilu_tridiagonal_equals_direct(rng):
    n = 40
    A = sp.diags([-np.ones(n - 1), 2.5 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    b = rng.standard_normal(n)
    assert np.abs(ilu0(A).solve(b) - np.linalg.solve(A.toarray(), b)).max() <= 1e-12


def test_ilu_keeps_pattern(rng):
    A = diag_dominant(30, rng)
    L, U = ilu0(A).factors()
    pattern = (abs(A) > 0).astype(int)
    assert ((abs(L) + abs(U) > 0).astype(int) - pattern).max() <= 0


def test_ilu_zero_pivot_names_row():
    A = sp.csr_matrix(np.array([[1.0, 2.0, 0], [3.0, 4.0, 1.0], [0, 1.0, 0.0]]))
    with pytest.raises(ZeroPivotError, match="row 2"):
        ilu0(A)


def test_additive_schwarz_is_a_preconditioner(rng):
    A = diag_dominant(60, rng)
    b = rng.standard_normal(60)
    res = gmres(A, b, AdditiveSchwarz(A), tol=1e-10)
    assert res.converged and np.linalg.norm(A @ res.x - b) <= 1e-9 * np.linalg.norm(b)


# ------------------------------------------------------------------ block preconditioner

def toy_system(rng, nu=6, np_=3, nT=4):
    F = diag_dominant(nu, rng, density=0.5, symmetric=False).toarray()
    B = rng.standard_normal((np_, nu))
    K = diag_dominant(nT, rng, density=0.5).toarray()
    C = rng.standard_normal((nu, nT))
    J = np.block([[F, -B.T, C], [B, np.zeros((np_, np_)), np.zeros((np_, nT))],
                  [np.zeros((nT, nu)), np.zeros((nT, np_)), K]])
    return BlockSystem(sp.csr_matrix(J), np.arange(nu), nu + np.arange(np_), nu + np_ + np.arange(nT))


def test_exact_block_preconditioner_toy(rng):
    system = toy_system(rng)
    M = build_block_preconditioner(system, None, PreconditionerOptions(schur="exact", inner="exact"))
    b = rng.standard_normal(system.matrix.shape[0])
    res = gmres(system.matrix, b, M, tol=1e-10)
    assert res.converged and res.iterations <= 3


def test_partition_validated(rng):
    with pytest.raises(SolverError, match="exactly once"):
        BlockSystem(sp.identity(5, format="csr"), np.arange(2), np.arange(2, 4), np.arange(3, 5))


def test_block_shapes(rng):
    s = toy_system(rng)
    assert s.A_uu.shape == (6, 6) and s.B_pu.shape == (3, 6) and s.B_up.shape == (6, 3)
    assert s.C_uT.shape == (6, 4) and s.D_Tu.shape == (4, 6) and s.K_TT.shape == (4, 4)


@pytest.fixture(scope="module")
def eye_jacobian(request):
    mesh = request.getfixturevalue("coarse_eye")
    problem = CoupledProblem(PhysicalParams(k=K_REGIONS), make_spaces(mesh))
    x = problem.initial_guess()
    x[problem.iu] = 1e-5 * np.random.default_rng(2).standard_normal(problem.n_u)
    x = problem.enforce(x)
    return problem, problem.jacobian(x)


@pytest.mark.parametrize("schur,inner", [("pcd", "ilu"), ("mass", "ilu"), ("pcd", "asm"), ("exact", "exact")])
def test_block_preconditioner_finite_and_linear(eye_jacobian, schur, inner, rng):
    problem, system = eye_jacobian
    M = build_block_preconditioner(system, problem.params, PreconditionerOptions(schur=schur, inner=inner))
    assert np.all(M(np.zeros(problem.n)) == 0.0)
    v = M(system.matrix @ rng.standard_normal(problem.n))
    assert np.all(np.isfinite(v))


def test_missing_gauge_is_singular(eye_jacobian):
    problem, system = eye_jacobian
    keep = np.setdiff1d(np.arange(problem.n), problem.ilam)
    nogauge = BlockSystem(system.matrix[keep][:, keep], problem.iu, problem.ip, problem.iT, aux=system.aux)
    with pytest.raises(SolverError, match="singular Schur"):
        build_block_preconditioner(nogauge, problem.params, PreconditionerOptions(schur="exact", inner="exact"))


def fluid_stokes(mesh):
    params = PhysicalParams(k=K_REGIONS, beta=0.0)
    problem = CoupledProblem(params, make_spaces(mesh), convection=False)
    J = problem.jacobian(problem.initial_guess())
    idx = np.concatenate([problem.iu, problem.ip, problem.ilam])
    nu, np_ = problem.n_u, problem.n_p
    system = BlockSystem(J.matrix[idx][:, idx], np.arange(nu), nu + np.arange(np_), np.zeros(0, int),
                         np.array([nu + np_]), J.aux)
    b = np.random.default_rng(0).standard_normal(len(idx))
    b[problem.dirichlet[problem.dirichlet < nu]] = 0.0
    return params, system, b


@pytest.mark.slow
def test_stokes_limit_iterations(desk_eye):
    params, system, b = fluid_stokes(desk_eye)
    counts = {}
    for inner in ("exact", "ilu"):
        M = build_block_preconditioner(system, params, PreconditionerOptions(schur="pcd", inner=inner))
        res = gmres(system.matrix, b, M, tol=1e-8, max_iter=500)
        assert res.converged
        assert np.linalg.norm(system.matrix @ res.x - b) <= 1e-7 * np.linalg.norm(b)
        counts[inner] = res.iterations
    assert counts["exact"] <= 40
    # loose ILU inner solves cost a few extra outer iterations
    assert counts["ilu"] <= 1.25 * counts["exact"]


# ------------------------------------------------------------------ dense

def test_dense_identity(rng):
    b = rng.standard_normal(5)
    assert np.array_equal(dense_solve(np.eye(5), b), b)


def test_hilbert_inverse():
    n = 4
    H = np.array([[1.0 / (i + j + 1) for j in range(n)] for i in range(n)])
    # exact inverse from the closed form with rational arithmetic
    from math import comb
    inv = np.array([[float(Fraction((-1) ** (i + j) * (i + j + 1) * comb(n + i, n - j - 1) * comb(n + j, n - i - 1)
                                    * comb(i + j, i) ** 2)) for j in range(n)] for i in range(n)])
    got = np.column_stack([dense_solve(H, e) for e in np.eye(n)])
    assert np.abs(got - inv).max() <= 1e-8
    assert inv[0].tolist() == [16, -120, 240, -140]


def test_dense_singular():
    with pytest.raises(SolverError, match="singular"):
        dense_solve(np.array([[1.0, 1.0], [1.0, 1.0]]), np.ones(2))


def test_dense_cap():
    with pytest.raises(SolverError, match="limited"):
        dense_solve(np.eye(3), np.ones(3), cap=2)


def test_matrix_market_round_trip(tmp_path, rng):
    A = diag_dominant(25, rng)
    path = tmp_path / "a.mtx"
    dump_matrix_market(A, path, "test")
    assert abs(scipy.io.mmread(str(path)) - A).max() == 0
