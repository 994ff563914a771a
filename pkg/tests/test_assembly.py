import warnings

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from eyeflow import assembly as asm
from eyeflow.exceptions import AssemblyError
from eyeflow.femspace import build_dof_map, cell_geometry, quadrature_rule, reference_basis_eval
from eyeflow.geometry import structured_square
from eyeflow.mesh import BoundaryTag, Mesh, RegionTag

AH = int(RegionTag.AQUEOUS_HUMOR)


def reference_triangle():
    return Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [AH],
                [[0, 1], [1, 2], [2, 0]], [BoundaryTag.GAMMA_SC, BoundaryTag.GAMMA_AMB, BoundaryTag.GAMMA_BODY])


def p1(mesh):
    return build_dof_map(mesh, "scalar", 1)


def direct_load(space, func, cells=None):
    """Per-cell quadrature oracle for int f phi_i, written out independently."""
    q = quadrature_rule(2, 6)
    vals, _ = reference_basis_eval(space.degree, q.points)
    out = np.zeros(space.n_dofs)
    for c in (space.cells if cells is None else cells):
        v = space.mesh.vertices[space.mesh.cells[c]]
        J = np.column_stack([v[1] - v[0], v[2] - v[0]])
        x = v[0] + q.points @ J.T
        f = func(x)
        for i, d in enumerate(space.scalar_dofs[space.cell_position[c]]):
            out[d] += abs(np.linalg.det(J)) * np.sum(q.weights * f * vals[:, i])
    return out


# ------------------------------------------------------------------ mass / diffusion

def test_p1_mass_reference_triangle():
    M = asm.assemble_mass(p1(reference_triangle())).toarray()
    assert np.allclose(M, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24, atol=1e-15)


def test_mass_sum_and_linearity(coarse_eye):
    s = build_dof_map(coarse_eye, "scalar", 2)
    M = asm.assemble_mass(s)
    assert M.sum() == pytest.approx(coarse_eye.cell_volumes.sum(), rel=1e-12)
    M2 = asm.assemble_mass(s, 2.0)
    assert np.array_equal(M2.data, 2 * M.data)
    assert abs(M - M.T).max() == 0.0


def test_p1_diffusion_reference_triangle():
    K = asm.assemble_diffusion(p1(reference_triangle())).toarray()
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_diffusion_kernel_and_doubling(coarse_eye):
    s = build_dof_map(coarse_eye, "scalar", 2)
    K = asm.assemble_diffusion(s)
    assert np.abs(K @ np.ones(s.n_dofs)).max() <= 1e-10 * abs(K).max()
    assert np.array_equal(asm.assemble_diffusion(s, 2.0).data, 2 * K.data)
    assert abs(K - K.T).max() == 0.0


def test_region_coefficients(coarse_eye):
    s = build_dof_map(coarse_eye, "scalar", 1)
    with pytest.raises(AssemblyError, match="missing"):
        asm.assemble_mass(s, {AH: 1.0})
    with pytest.raises(AssemblyError, match="non-positive"):
        asm.assemble_diffusion(s, {int(r): (0.0 if r == RegionTag.LENS else 1.0) for r in RegionTag})


# ------------------------------------------------------------------ convection

def test_convection_zero_velocity(coarse_eye):
    su = build_dof_map(coarse_eye, "vector", 2, support="ah")
    sT = build_dof_map(coarse_eye, "scalar", 2)
    N = asm.assemble_convection(sT, su, np.zeros(su.n_dofs))
    assert N.nnz == 0 or abs(N).max() == 0


def test_convection_row_sums_vanish_constant_u():
    m = reference_triangle()
    su = build_dof_map(m, "vector", 2, support="ah")
    s = p1(m)
    N = asm.assemble_convection(s, su, su.interpolate(lambda X: np.tile([0.3, -1.2], (len(X), 1))))
    assert np.allclose(N.toarray().sum(axis=1), 0.0, atol=1e-15)


def test_convection_matches_quadrature_oracle():
    m = structured_square(4)
    su = build_dof_map(m, "vector", 2, support="ah")
    sT = build_dof_map(m, "scalar", 2)
    N = asm.assemble_convection(sT, su, su.interpolate(lambda X: np.column_stack([np.ones(len(X)), 0 * X[:, 0]])), 2.5)
    T = sT.interpolate(lambda X: X[:, 0])
    oracle = direct_load(sT, lambda X: 2.5 * np.ones(len(X)))
    assert np.allclose(N @ T, oracle, atol=1e-14)


def test_convection_skew_adjoint_closed():
    m = structured_square(6)
    su = build_dof_map(m, "vector", 2, support="ah")
    sT = build_dof_map(m, "scalar", 2)
    u = su.interpolate(lambda X: np.column_stack([X[:, 0] ** 2, -2 * X[:, 0] * X[:, 1]]))
    N = asm.assemble_convection(sT, su, u)
    x = np.random.default_rng(0).standard_normal(sT.n_dofs)
    x[sT.tagged_dofs(list(BoundaryTag))] = 0.0
    assert abs(x @ ((N + N.T) @ x)) <= 1e-10 * abs(x @ (abs(N) @ abs(x)))


def test_convection_mesh_mismatch():
    a, b = structured_square(2), structured_square(2)
    with pytest.raises(AssemblyError, match="mismatch"):
        asm.assemble_convection(p1(a), build_dof_map(b, "vector", 2), np.zeros(2 * 25))


# ------------------------------------------------------------------ stokes blocks

@pytest.fixture(scope="module")
def th_square():
    m = structured_square(4)
    su = build_dof_map(m, "vector", 2, support="ah")
    sp_ = build_dof_map(m, "scalar", 1, support="ah")
    A, B = asm.assemble_stokes_blocks(su, sp_, 1.0)
    return su, sp_, A, B


def test_divergence_of_constant(th_square):
    su, _, _, B = th_square
    u = su.interpolate(lambda X: np.tile([1.0, -2.0], (len(X), 1)))
    assert np.abs(B @ u).max() < 1e-14


def test_divergence_free_field(th_square):
    su, _, _, B = th_square
    assert np.abs(B @ su.interpolate(lambda X: np.column_stack([X[:, 0], -X[:, 1]]))).max() < 1e-14


def test_divergence_mass_oracle(th_square):
    su, sp_, _, B = th_square
    row_sums = np.asarray(asm.assemble_mass(sp_).sum(axis=1)).ravel()
    Bu = B @ su.interpolate(lambda X: np.column_stack([X[:, 0], 0 * X[:, 0]]))
    assert np.allclose(np.abs(Bu), row_sums, atol=1e-14)


def test_equal_order_rejected():
    m = structured_square(2)
    with pytest.raises(AssemblyError, match="unstable pair"):
        asm.assemble_stokes_blocks(build_dof_map(m, "vector", 1), build_dof_map(m, "scalar", 1), 1.0)


def test_viscous_block_symmetric(th_square):
    A = th_square[2]
    assert abs(A - A.T).max() == 0.0


# ------------------------------------------------------------------ buoyancy

def test_buoyancy_beta_zero():
    m = structured_square(2)
    su, sT = build_dof_map(m, "vector", 2, support="ah"), build_dof_map(m, "scalar", 2)
    C, off = asm.assemble_buoyancy(su, sT, 1000.0, 0.0, 310.0, [0, -9.81])
    assert abs(C).max() == 0 and np.abs(off).max() == 0


def test_buoyancy_reference_temperature_cancels():
    m = structured_square(2)
    su, sT = build_dof_map(m, "vector", 2, support="ah"), build_dof_map(m, "scalar", 2)
    C, off = asm.assemble_buoyancy(su, sT, 1000.0, 3e-4, 310.0, [0, -9.81])
    assert np.abs(C @ np.full(sT.n_dofs, 310.0) + off).max() <= 1e-12 * np.abs(off).max()


def test_buoyancy_single_cell_oracle():
    m = reference_triangle()
    su, sT = build_dof_map(m, "vector", 2, support="ah"), build_dof_map(m, "scalar", 2)
    rho, beta, Tref = 1000.0, 3e-4, 310.0
    C, off = asm.assemble_buoyancy(su, sT, rho, beta, Tref, [0, -9.81])
    load = C @ np.full(sT.n_dofs, Tref + 1.0) + off
    one = direct_load(sT, lambda X: np.ones(len(X)))
    ux, uy = su.components(load).T
    assert np.allclose(ux, 0.0, atol=1e-15)
    assert np.allclose(uy, rho * beta * 9.81 * one, rtol=1e-12)


def test_buoyancy_dimension_mismatch():
    m = structured_square(1)
    with pytest.raises(AssemblyError, match="dimension"):
        asm.assemble_buoyancy(build_dof_map(m, "vector", 2), build_dof_map(m, "scalar", 2), 1, 1, 0, [0, 0, -1])


# ------------------------------------------------------------------ robin

def test_robin_single_edge():
    m = reference_triangle()
    h = 7.0
    R, _ = asm.apply_robin(p1(m), BoundaryTag.GAMMA_SC, h, 0.0)
    L = 1.0
    assert np.allclose(R.toarray()[:2, :2], h * L / 6 * np.array([[2, 1], [1, 2]]), atol=1e-14)
    assert abs(R.toarray()[2]).max() == 0


def test_robin_noop_and_equilibrium():
    m = structured_square(3)
    s = build_dof_map(m, "scalar", 2)
    R, b = asm.apply_robin(s, BoundaryTag.GAMMA_AMB, 0.0, 300.0, 0.0)
    assert abs(R).max() == 0 and np.abs(b).max() == 0
    R, b = asm.apply_robin(s, BoundaryTag.GAMMA_AMB, 10.0, 300.0, 0.0)
    assert np.abs(R @ np.full(s.n_dofs, 300.0) - b).max() <= 1e-12 * np.abs(b).max()
    assert b.sum() == pytest.approx(10.0 * 300.0)


def test_robin_errors():
    s = build_dof_map(reference_triangle(), "scalar", 1)
    with pytest.raises(AssemblyError, match="unknown tag"):
        asm.apply_robin(s, BoundaryTag.GAMMA_C, 1.0, 0.0)
    with pytest.raises(AssemblyError):
        asm.apply_robin(s, BoundaryTag.GAMMA_SC, -1.0, 0.0)


# ------------------------------------------------------------------ dirichlet

def test_constrain_all_dofs_gives_zero():
    m = structured_square(3)
    s = build_dof_map(m, "scalar", 2)
    K = asm.assemble_diffusion(s)
    A, b = asm.constrain(K, np.ones(s.n_dofs), np.arange(s.n_dofs), np.zeros(s.n_dofs))
    assert np.abs(spla.spsolve(A.tocsc(), b)).max() == 0.0


def test_constrained_row_is_unit():
    s = build_dof_map(structured_square(2), "scalar", 1)
    K = asm.assemble_diffusion(s)
    A, b, dofs = asm.apply_dirichlet(K, np.zeros(s.n_dofs), s, [BoundaryTag.GAMMA_BODY], 3.0)
    for i in dofs:
        row = A.getrow(i).toarray().ravel()
        assert row[i] == 1.0 and np.count_nonzero(row) == 1 and b[i] == 3.0


@pytest.mark.parametrize("symmetric", [False, True])
def test_linear_exactness(symmetric):
    m = structured_square(5, diagonal="left")
    s = build_dof_map(m, "scalar", 1)
    K = asm.assemble_diffusion(s)
    exact = lambda X: X[:, 0] + X[:, 1]
    A, b, _ = asm.apply_dirichlet(K, np.zeros(s.n_dofs), s, list(BoundaryTag)[4:7], exact, symmetric=symmetric)
    u = spla.spsolve(A.tocsc(), b)
    assert np.abs(u - s.interpolate(exact)).max() < 1e-13


def test_untouched_tag_warns():
    s = build_dof_map(structured_square(2), "scalar", 1)
    K = asm.assemble_diffusion(s)
    with pytest.warns(UserWarning, match="touches no dofs"):
        asm.apply_dirichlet(K, np.zeros(s.n_dofs), s, [BoundaryTag.GAMMA_C])


# ------------------------------------------------------------------ threading

def test_assembly_independent_of_threads(desk_eye):
    sT = build_dof_map(desk_eye, "scalar", 2)
    su = build_dof_map(desk_eye, "vector", 2, support="ah")
    u = su.interpolate(lambda X: np.column_stack([np.sin(3e3 * X[:, 1]), np.cos(2e3 * X[:, 0])]))
    k = {int(r): 0.5 + 0.1 * int(r) for r in RegionTag}
    prev = asm.get_num_threads()
    try:
        asm.set_num_threads(1)
        a = (asm.assemble_diffusion(sT, k), asm.assemble_convection(sT, su, u))
        asm.set_num_threads(4)
        b = (asm.assemble_diffusion(sT, k), asm.assemble_convection(sT, su, u))
    finally:
        asm.set_num_threads(prev)
    for x, y in zip(a, b):
        assert np.array_equal(x.indptr, y.indptr) and np.array_equal(x.indices, y.indices)
        assert np.array_equal(x.data, y.data)
