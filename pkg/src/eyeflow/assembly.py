"""Vectorized element assembly of the forms of the coupled flow/heat problem.

Cell peclet estimate behind the unstabilized heat convection: with
|u| ~ 1e-4 m/s, h ~ 2e-4 m and k / (rho cp) ~ 1.38e-7 m^2/s the cell peclet
number |u| h / (2 alpha) is about 0.07.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.sparse as sp

from .exceptions import AssemblyError
from .femspace import cell_geometry, physical_gradients, quadrature_rule, reference_basis_eval

#: Cells per assembly chunk; fixed so results do not depend on the thread count.
CHUNK = 4096
_threads = 1


def set_num_threads(n):
    global _threads
    _threads = max(1, int(n))


def get_num_threads():
    return _threads


def _map_chunks(func, n):
    """Apply ``func(slice)`` over fixed-size chunks of ``range(n)``; results in chunk order."""
    chunks = [slice(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)] or [slice(0, 0)]
    if _threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=_threads) as pool:
            return list(pool.map(func, chunks))
    return [func(s) for s in chunks]


def scatter(row_dofs, col_dofs, blocks, shape):
    """Sum element blocks ``(nc, nr, ncol)`` into a CSR matrix with sorted, unique indices."""
    nc, nr, ncol = blocks.shape
    rows = np.broadcast_to(row_dofs[:, :, None], (nc, nr, ncol)).ravel()
    cols = np.broadcast_to(col_dofs[:, None, :], (nc, nr, ncol)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def scatter_vector(dofs, blocks, n):
    return np.bincount(dofs.ravel(), weights=blocks.ravel(), minlength=n)


def cell_coefficient(space, coefficient, name="coefficient", positive=False, cells=None):
    """Per-cell values from a scalar or a ``{region: value}`` mapping."""
    mesh = space.mesh
    cells = space.cells if cells is None else cells
    if np.isscalar(coefficient):
        vals = np.full(len(cells), float(coefficient))
    else:
        regions = mesh.cell_region[cells]
        vals = np.empty(len(cells))
        table = {int(k): v for k, v in dict(coefficient).items()}
        for r in np.unique(regions):
            if int(r) not in table or table[int(r)] is None:
                raise AssemblyError(f"missing {name} for region {int(r)}")
            vals[regions == r] = float(table[int(r)])
    if positive and np.any(vals <= 0):
        raise AssemblyError(f"non-positive {name}")
    return vals


def _qdeg(space, kind):
    p = space.degree
    if kind == "mass":
        return 2 * p
    if kind == "diffusion":
        return max(1, 2 * p)
    return min(6, 3 * p - 1) if p > 1 else 3


def assemble_mass(space, coefficient=1.0, quad_degree=None):
    """Weighted mass matrix ``int c phi_i phi_j`` (block diagonal over vector components)."""
    c = cell_coefficient(space, coefficient, "mass coefficient")
    q = quadrature_rule(space.dim, quad_degree or _qdeg(space, "mass"))
    vals, _ = reference_basis_eval(space.degree, q.points)
    geom = cell_geometry(space.mesh, space.cells)
    ref = np.einsum("q,qi,qj->ij", q.weights, vals, vals)
    blocks = (geom.det * c)[:, None, None] * ref[None]
    # symmetric by construction
    blocks = 0.5 * (blocks + blocks.transpose(0, 2, 1))
    return _blockdiag(space, blocks)


def _blockdiag(space, blocks):
    n = space.n_scalar
    mats = [scatter(space.scalar_dofs, space.scalar_dofs, blocks, (n, n))]
    if space.ncomp == 1:
        return mats[0]
    return sp.block_diag(mats * space.ncomp, format="csr")


def assemble_diffusion(space, conductivity=1.0, quad_degree=None):
    """Stiffness matrix ``int k grad phi_i . grad phi_j`` (vector spaces: componentwise)."""
    k = cell_coefficient(space, conductivity, "conductivity", positive=True)
    q = quadrature_rule(space.dim, quad_degree or _qdeg(space, "diffusion"))
    _, dref = reference_basis_eval(space.degree, q.points)

    def work(s):
        geom = cell_geometry(space.mesh, space.cells[s])
        g = physical_gradients(dref, geom)
        w = (geom.det * k[s])[:, None] * q.weights[None, :]
        b = np.einsum("cq,cqik,cqjk->cij", w, g, g, optimize=True)
        return 0.5 * (b + b.transpose(0, 2, 1))

    blocks = np.concatenate(_map_chunks(work, len(space.cells)))
    return _blockdiag(space, blocks)


def _check_same_mesh(a, b):
    if a.mesh is not b.mesh:
        raise AssemblyError("velocity space/mesh mismatch")


def _rows_on(space, cells):
    pos = space.cell_position[cells]
    if np.any(pos < 0):
        raise AssemblyError("space does not cover the velocity support")
    return space.scalar_dofs[pos]


def _velocity_at(space_u, u, q):
    vals, dref = reference_basis_eval(space_u.degree, q.points)
    local = space_u.components(u)[space_u.scalar_dofs]  # (nc, nloc, ncomp)
    return np.einsum("qi,cik->cqk", vals, local, optimize=True), local, dref


def assemble_convection(space, velocity_space, velocity, coefficient=1.0, quad_degree=None):
    """Advection matrix ``int c (u . grad phi_j) phi_i`` over the velocity support.

    ``space`` is scalar; ``velocity`` holds coefficients of ``velocity_space``
    (zero outside its support).
    """
    _check_same_mesh(space, velocity_space)
    cells = velocity_space.cells
    c = cell_coefficient(velocity_space, coefficient, "rho_cp")
    q = quadrature_rule(space.dim, quad_degree or max(_qdeg(space, "conv"), _qdeg(velocity_space, "conv")))
    vals_u, _ = reference_basis_eval(velocity_space.degree, q.points)
    vals, dref = reference_basis_eval(space.degree, q.points)
    ulocal = velocity_space.components(velocity)[velocity_space.scalar_dofs]
    dofs = _rows_on(space, cells)

    def work(s):
        geom = cell_geometry(space.mesh, cells[s])
        g = physical_gradients(dref, geom)
        uq = np.einsum("qi,cik->cqk", vals_u, ulocal[s], optimize=True)
        w = (geom.det * c[s])[:, None] * q.weights[None, :]
        return np.einsum("cq,cqk,cqjk,qi->cij", w, uq, g, vals, optimize=True)

    blocks = np.concatenate(_map_chunks(work, len(cells)))
    n = space.n_dofs
    return scatter(dofs, dofs, blocks, (n, n))


def assemble_stokes_blocks(space_u, space_p, mu):
    """Viscous block ``A = mu * vector Laplacian`` and divergence ``B_kj = int psi_k div phi_j``."""
    _check_same_mesh(space_u, space_p)
    if space_u.degree <= space_p.degree:
        raise AssemblyError("unstable pair: equal-order velocity/pressure rejected (use P2/P1)")
    if not np.array_equal(space_u.cells, space_p.cells):
        raise AssemblyError("velocity and pressure spaces must share their support")
    A = assemble_diffusion(space_u, mu)
    B = assemble_divergence(space_u, space_p)
    return A, B


def assemble_divergence(space_u, space_p, quad_degree=None):
    q = quadrature_rule(space_u.dim, quad_degree or 2 * space_u.degree)
    _, dref = reference_basis_eval(space_u.degree, q.points)
    vp, _ = reference_basis_eval(space_p.degree, q.points)
    geom = cell_geometry(space_u.mesh, space_u.cells)
    g = physical_gradients(dref, geom)  # (nc, nq, nloc, dim)
    w = geom.det[:, None] * q.weights[None, :]
    # blocks[c, k, d, j] = int psi_k d(phi_j)/dx_d
    b = np.einsum("cq,qk,cqjd->ckdj", w, vp, g, optimize=True)
    nc = len(space_u.cells)
    blocks = b.reshape(nc, space_p.nloc, -1)
    cols = space_u.cell_dofs  # component-major, matches (d, j) ordering
    return scatter(space_p.scalar_dofs, cols, blocks, (space_p.n_dofs, space_u.n_dofs))


def assemble_buoyancy(space_u, space_T, rho, beta, T_ref, gravity):
    """Buoyancy coupling: returns ``(C, offset)`` with ``C @ T + offset`` the load of ``-rho beta (T - T_ref) g``."""
    _check_same_mesh(space_u, space_T)
    g = np.asarray(gravity, dtype=float).reshape(-1)
    if g.shape[0] != space_u.dim or space_u.ncomp != space_u.dim:
        raise AssemblyError(f"gravity has dimension {g.shape[0]}, mesh has {space_u.dim}")
    cells = space_u.cells
    coef = cell_coefficient(space_u, rho, "rho") * cell_coefficient(space_u, beta, "beta")
    q = quadrature_rule(space_u.dim, space_u.degree + space_T.degree)
    vu, _ = reference_basis_eval(space_u.degree, q.points)
    vt, _ = reference_basis_eval(space_T.degree, q.points)
    geom = cell_geometry(space_u.mesh, cells)
    w = geom.det[:, None] * q.weights[None, :] * coef[:, None]
    m = np.einsum("cq,qi,qj->cij", w, vu, vt, optimize=True)  # (nc, nloc_u, nloc_T)
    blocks = -np.concatenate([gd * m for gd in g], axis=1)
    tdofs = _rows_on(space_T, cells)
    C = scatter(space_u.cell_dofs, tdofs, blocks, (space_u.n_dofs, space_T.n_dofs))
    ones = np.einsum("cij->ci", m)
    offset_blocks = T_ref * np.concatenate([gd * ones for gd in g], axis=1)
    offset = scatter_vector(space_u.cell_dofs, offset_blocks, space_u.n_dofs)
    return C, offset


def assemble_vector_convection(space_u, w, rho, quad_degree=None):
    """``int rho (w . grad) phi_j . phi_i`` for vector spaces (same operator per component)."""
    scalar = _ScalarView(space_u)
    N = assemble_convection(scalar, space_u, w, rho, quad_degree)
    return sp.block_diag([N] * space_u.ncomp, format="csr")


def assemble_convection_reaction(space_u, u, rho, quad_degree=None):
    """Newton term ``int rho (du . grad) u . v``: entry (a-comp i, b-comp j) = int rho phi_j d_b u_a phi_i."""
    q = quadrature_rule(space_u.dim, quad_degree or _qdeg(space_u, "conv"))
    vals, dref = reference_basis_eval(space_u.degree, q.points)
    c = cell_coefficient(space_u, rho, "rho")
    local = space_u.components(u)[space_u.scalar_dofs]
    cells = space_u.cells
    d = space_u.ncomp

    def work(s):
        geom = cell_geometry(space_u.mesh, cells[s])
        g = physical_gradients(dref, geom)
        grad_u = np.einsum("cqid,cia->cqad", g, local[s], optimize=True)
        w = (geom.det * c[s])[:, None] * q.weights[None, :]
        b = np.einsum("cq,cqab,qi,qj->caibj", w, grad_u, vals, vals, optimize=True)
        n = b.shape[0]
        return b.reshape(n, d * space_u.nloc, d * space_u.nloc)

    blocks = np.concatenate(_map_chunks(work, len(cells)))
    n = space_u.n_dofs
    return scatter(space_u.cell_dofs, space_u.cell_dofs, blocks, (n, n))


def assemble_heat_velocity_coupling(space_T, space_u, T, rho_cp, quad_degree=None):
    """Newton term ``int rho_cp (du . grad T) w``: entry (i, b-comp j) = int rho_cp phi_j d_b T w_i."""
    _check_same_mesh(space_u, space_T)
    cells = space_u.cells
    q = quadrature_rule(space_u.dim, quad_degree or _qdeg(space_u, "conv"))
    vu, _ = reference_basis_eval(space_u.degree, q.points)
    vt, dt = reference_basis_eval(space_T.degree, q.points)
    c = cell_coefficient(space_u, rho_cp, "rho_cp")
    tdofs = _rows_on(space_T, cells)
    tloc = np.asarray(T)[tdofs]

    def work(s):
        geom = cell_geometry(space_u.mesh, cells[s])
        g = physical_gradients(dt, geom)
        gT = np.einsum("cqid,ci->cqd", g, tloc[s], optimize=True)
        w = (geom.det * c[s])[:, None] * q.weights[None, :]
        b = np.einsum("cq,cqd,qi,qj->cidj", w, gT, vt, vu, optimize=True)
        return b.reshape(b.shape[0], space_T.nloc, -1)

    blocks = np.concatenate(_map_chunks(work, len(cells)))
    return scatter(tdofs, space_u.cell_dofs, blocks, (space_T.n_dofs, space_u.n_dofs))


def assemble_load(space, func, quad_degree=6, cells=None):
    """Load vector ``int f . phi_i``; ``func(x)`` returns ``(n,)`` or ``(n, ncomp)``."""
    cells = space.cells if cells is None else cells
    q = quadrature_rule(space.dim, quad_degree)
    vals, _ = reference_basis_eval(space.degree, q.points)
    geom = cell_geometry(space.mesh, cells)
    xq = geom.x0[:, None, :] + np.einsum("cij,qj->cqi", geom.jac, q.points)
    f = np.asarray(func(xq.reshape(-1, space.dim)), dtype=float).reshape(len(cells), len(q), space.ncomp)
    w = geom.det[:, None] * q.weights[None, :]
    b = np.einsum("cq,cqk,qi->cki", w, f, vals).reshape(len(cells), -1)
    rows = space.cell_dofs[space.cell_position[cells]]
    return scatter_vector(rows, b, space.n_dofs)


class _ScalarView:
    """Scalar view of a vector space (same mesh, cells and scalar numbering)."""

    def __init__(self, space):
        self._s = space
        self.mesh = space.mesh
        self.degree = space.degree
        self.ncomp = 1
        self.cells = space.cells
        self.scalar_dofs = space.scalar_dofs
        self.cell_position = space.cell_position
        self.n_dofs = space.n_scalar
        self.dim = space.dim


# --------------------------------------------------------------------------
# boundary terms

def _facet_rule(dim, degree):
    if dim == 2:
        x, w = np.polynomial.legendre.leggauss(max(1, (degree + 2) // 2))
        s = 0.5 * (x + 1.0)
        return np.column_stack([1.0 - s, s]), 0.5 * w  # weights sum to 1 (unit facet)
    q = quadrature_rule(2, degree)
    bary = np.column_stack([1.0 - q.points.sum(1), q.points])
    return bary, 2.0 * q.weights


def facet_basis(space, facets, degree):
    """Basis values of ``space`` at facet quadrature points.

    Returns ``(dofs, vals, w)`` with ``dofs (nf, nloc)``, ``vals (nf, nq, nloc)``
    and physical weights ``w (nf, nq)``.
    """
    mesh = space.mesh
    facets = np.asarray(facets, dtype=np.int64).reshape(-1, mesh.dim)
    nf = len(facets)
    bary, fw = _facet_rule(mesh.dim, degree)
    uniq, nb = mesh.all_facets, mesh.facet_neighbours
    index = {tuple(f): k for k, f in enumerate(uniq.tolist())}
    cells = np.empty(nf, dtype=np.int64)
    for i, f in enumerate(np.sort(facets, axis=1).tolist()):
        k = index.get(tuple(f))
        if k is None:
            raise AssemblyError(f"facet {tuple(f)} is not part of the mesh")
        a, b = nb[k]
        if space.cell_position[a] >= 0:
            cells[i] = a
        elif b >= 0 and space.cell_position[b] >= 0:
            cells[i] = b
        else:
            raise AssemblyError(f"facet {tuple(f)} is outside the support of the space")
    ref_v = np.vstack([np.zeros(mesh.dim), np.eye(mesh.dim)])
    conn = mesh.cells[cells]
    loc = np.argmax(conn[:, :, None] == facets[:, None, :], axis=1)  # (nf, dim): local vertex of each facet vertex
    pts = np.einsum("qk,fkd->fqd", bary, ref_v[loc])
    vals, _ = reference_basis_eval(space.degree, pts.reshape(-1, mesh.dim))
    vals = vals.reshape(nf, len(fw), -1)
    w = mesh.facet_measures(facets)[:, None] * fw[None, :]
    dofs = space.scalar_dofs[space.cell_position[cells]]
    return dofs, vals, w


def apply_robin(space_T, tag, h, T_ext, flux_offset=0.0):
    """Robin term ``-k dT/dn = h (T - T_ext) + flux_offset`` on facets tagged ``tag``.

    Returns ``(matrix, load)``: matrix ``h int phi_i phi_j`` and load
    ``(h T_ext - flux_offset) int phi_i``.
    """
    tags = tag if isinstance(tag, (set, frozenset, list, tuple)) else [tag]
    facets = space_T.mesh.tagged_facets(tags)
    n = space_T.n_dofs
    if h < 0:
        raise AssemblyError("Robin transfer coefficient must be >= 0")
    if len(facets) == 0:
        raise AssemblyError(f"unknown tag: no facets tagged {tag!r}")
    dofs, vals, w = facet_basis(space_T, facets, 2 * space_T.degree)
    mblocks = h * np.einsum("fq,fqi,fqj->fij", w, vals, vals)
    mblocks = 0.5 * (mblocks + mblocks.transpose(0, 2, 1))
    lblocks = (h * T_ext - flux_offset) * np.einsum("fq,fqi->fi", w, vals)
    return scatter(dofs, dofs, mblocks, (n, n)), scatter_vector(dofs, lblocks, n)


def boundary_integral(space, coeffs, tags):
    """``int_Gamma v`` for a scalar field on facets carrying ``tags``."""
    facets = space.mesh.tagged_facets(tags)
    if len(facets) == 0:
        return 0.0
    dofs, vals, w = facet_basis(space, facets, 2 * space.degree)
    v = np.einsum("fqi,fi->fq", vals, np.asarray(coeffs)[dofs])
    return float((w * v).sum())


# --------------------------------------------------------------------------
# Dirichlet constraints

def dirichlet_values(space, dofs, value):
    """Prescribed values at ``dofs`` from a scalar, a full coefficient vector or a callable."""
    if callable(value):
        full = space.interpolate(value)
        return full[dofs]
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        return np.full(len(dofs), float(v))
    if v.shape[0] == space.n_dofs:
        return v[dofs]
    raise AssemblyError("Dirichlet value must be a scalar, a callable or a full coefficient vector")


def constrain(matrix, load, dofs, values, symmetric=False):
    """Replace rows ``dofs`` by identity rows with the prescribed values.

    With ``symmetric=True`` the matching columns are eliminated too and the
    known values are moved to the right-hand side.
    """
    n = matrix.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[dofs] = True
    keep = sp.diags((~mask).astype(float))
    full = np.zeros(n)
    full[dofs] = values
    b = np.array(load, dtype=float, copy=True)
    if symmetric:
        b = b - matrix @ full
        A = keep @ matrix @ keep
    else:
        A = keep @ matrix
    b[mask] = 0.0
    b += full
    A = (A + sp.diags(mask.astype(float))).tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    return A, b


def apply_dirichlet(matrix, load, space, tags, value=0.0, symmetric=False, components=None):
    """Constrain dofs of ``space`` on facets tagged ``tags``; returns ``(matrix, load, dofs)``.

    A tag that touches no dof emits a warning rather than failing.
    """
    tags = list(tags) if isinstance(tags, (set, frozenset, list, tuple)) else [tags]
    parts = []
    for t in tags:
        d = space.tagged_dofs([t], components)
        if len(d) == 0:
            warnings.warn(f"Dirichlet tag {t!r} touches no dofs of the space", stacklevel=2)
        parts.append(d)
    dofs = np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    vals = dirichlet_values(space, dofs, value)
    A, b = constrain(matrix, load, dofs, vals, symmetric)
    return A, b, dofs
