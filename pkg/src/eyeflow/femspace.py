"""Quadrature, Lagrange reference elements (degree 1 and 2) and degree-of-freedom maps."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import roots_jacobi

from .exceptions import SpaceError
from .mesh import RegionTag

#: Local edge ordering; P2 edge nodes follow the vertices in this order.
LOCAL_EDGES = {
    2: [(0, 1), (1, 2), (0, 2)],
    3: [(0, 1), (1, 2), (0, 2), (0, 3), (1, 3), (2, 3)],
}


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return len(self.weights)


def _orbit3(a, w):
    """Points (a, a), (1-2a, a), (a, 1-2a) in reference coordinates."""
    b = 1.0 - 2.0 * a
    return [(a, a), (b, a), (a, b)], [w] * 3


def _orbit6(a, b, w):
    c = 1.0 - a - b
    pts = [(a, b), (b, a), (b, c), (c, b), (a, c), (c, a)]
    return pts, [w] * 6


def _triangle_rule(degree):
    # symmetric rules with positive weights (Strang-Fix / Dunavant); weights sum to 1
    if degree <= 1:
        pts, w = [(1 / 3, 1 / 3)], [1.0]
    elif degree == 2:
        pts, w = _orbit3(1 / 6, 1 / 3)
    elif degree <= 4:
        p1, w1 = _orbit3(0.445948490915965, 0.223381589678011)
        p2, w2 = _orbit3(0.091576213509771, 0.109951743655322)
        pts, w = p1 + p2, w1 + w2
    elif degree == 5:
        p1, w1 = _orbit3(0.470142064105115, 0.132394152788506)
        p2, w2 = _orbit3(0.101286507323456, 0.125939180544827)
        pts, w = [(1 / 3, 1 / 3)] + p1 + p2, [0.225] + w1 + w2
    else:
        p1, w1 = _orbit3(0.249286745170910, 0.116786275726379)
        p2, w2 = _orbit3(0.063089014491502, 0.050844906370207)
        p3, w3 = _orbit6(0.310352451033785, 0.053145049844816, 0.082851075618374)
        pts, w = p1 + p2 + p3, w1 + w2 + w3
    return np.asarray(pts, dtype=float), 0.5 * np.asarray(w, dtype=float)


def _gauss_jacobi01(n, alpha):
    """Gauss-Jacobi rule on [0, 1] for the weight (1 - t)^alpha."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return 0.5 * (x + 1.0), w / 2.0 ** (alpha + 1)


def _tetrahedron_rule(degree):
    # collapsed-coordinate (conical product) rule, exact to 2n-1
    n = max(1, math.ceil((degree + 1) / 2))
    t1, w1 = _gauss_jacobi01(n, 2.0)
    t2, w2 = _gauss_jacobi01(n, 1.0)
    t3, w3 = _gauss_jacobi01(n, 0.0)
    pts, wts = [], []
    for a, wa in zip(t1, w1):
        for b, wb in zip(t2, w2):
            for c, wc in zip(t3, w3):
                z = a
                y = b * (1 - a)
                x = c * (1 - a) * (1 - b)
                pts.append((x, y, z))
                wts.append(wa * wb * wc)
    return np.asarray(pts), np.asarray(wts)


def quadrature_rule(dimension, degree):
    """Quadrature on the reference simplex exact for polynomials up to ``degree``."""
    if not (isinstance(degree, (int, np.integer)) and 1 <= degree <= 6):
        raise SpaceError(f"unsupported quadrature degree {degree!r} (need 1..6)")
    if dimension == 2:
        pts, w = _triangle_rule(int(degree))
    elif dimension == 3:
        pts, w = _tetrahedron_rule(int(degree))
    else:
        raise SpaceError(f"unsupported dimension {dimension}")
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, int(degree))


def reference_nodes(degree, dim=2):
    verts = np.vstack([np.zeros(dim), np.eye(dim)])
    if degree == 1:
        return verts
    mids = [0.5 * (verts[i] + verts[j]) for i, j in LOCAL_EDGES[dim]]
    return np.vstack([verts, mids])


def reference_basis_eval(degree, point):
    """Nodal basis values and reference gradients at one point or an array of points.

    Returns ``(values, gradients)`` with shapes ``(nloc,)``/``(nloc, dim)`` for a
    single point and ``(npts, nloc)``/``(npts, nloc, dim)`` for an array.
    """
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    n, dim = pts.shape
    lam = np.column_stack([1.0 - pts.sum(axis=1), pts])
    dlam = np.vstack([-np.ones(dim), np.eye(dim)])  # (dim+1, dim)
    if degree == 1:
        vals = lam
        grads = np.broadcast_to(dlam, (n, dim + 1, dim)).copy()
    elif degree == 2:
        edges = LOCAL_EDGES[dim]
        nloc = dim + 1 + len(edges)
        vals = np.empty((n, nloc))
        grads = np.empty((n, nloc, dim))
        for i in range(dim + 1):
            vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
            grads[:, i, :] = (4.0 * lam[:, i] - 1.0)[:, None] * dlam[i]
        for k, (i, j) in enumerate(edges):
            vals[:, dim + 1 + k] = 4.0 * lam[:, i] * lam[:, j]
            grads[:, dim + 1 + k, :] = 4.0 * (lam[:, j, None] * dlam[i] + lam[:, i, None] * dlam[j])
    else:
        raise SpaceError(f"unsupported polynomial degree {degree}")
    if single:
        return vals[0], grads[0]
    return vals, grads


@dataclass(frozen=True)
class CellGeometry:
    x0: np.ndarray  # (nc, dim)
    jac: np.ndarray  # (nc, dim, dim), columns are edge vectors
    det: np.ndarray  # (nc,) absolute determinant
    inv: np.ndarray  # (nc, dim, dim)


def cell_geometry(mesh, cells=None):
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells)
    x = mesh.vertices[mesh.cells[cells]]
    jac = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)
    det = np.linalg.det(jac)
    return CellGeometry(x[:, 0, :], jac, np.abs(det), np.linalg.inv(jac))


def physical_gradients(ref_grads, geom):
    """Map reference gradients ``(nq, nloc, dim)`` to physical ``(nc, nq, nloc, dim)``."""
    return np.einsum("qik,ckj->cqij", ref_grads, geom.inv, optimize=True)


_SUPPORTS = ("all", "ah")


@dataclass(frozen=True, eq=False)
class FunctionSpace:
    """Scalar or vector Lagrange space of degree 1 or 2 on the whole mesh or the aqueous humor.

    Vector components are stored in blocks: dof ``c * n_scalar + s`` is
    component ``c`` of scalar node ``s``.
    """

    mesh: object
    degree: int
    ncomp: int
    support: str
    cells: np.ndarray
    scalar_dofs: np.ndarray
    n_scalar: int
    node_vertex: np.ndarray
    node_edge: np.ndarray

    @property
    def dim(self):
        return self.mesh.dim

    @property
    def n_dofs(self):
        return self.n_scalar * self.ncomp

    @property
    def nloc(self):
        return self.scalar_dofs.shape[1]

    @property
    def is_vector(self):
        return self.ncomp > 1

    @cached_property
    def cell_dofs(self):
        """(n_cells_supported, ncomp * nloc) global dofs, component-major per cell."""
        return np.hstack([self.scalar_dofs + c * self.n_scalar for c in range(self.ncomp)])

    @cached_property
    def cell_position(self):
        """Map global cell id -> row in ``cells`` (-1 when unsupported)."""
        pos = np.full(self.mesh.n_cells, -1, dtype=np.int64)
        pos[self.cells] = np.arange(len(self.cells))
        return pos

    @cached_property
    def node_coords(self):
        v = self.mesh.vertices
        out = np.empty((self.n_scalar, self.dim))
        isv = self.node_vertex >= 0
        out[isv] = v[self.node_vertex[isv]]
        e = self.node_edge[~isv]
        out[~isv] = 0.5 * (v[e[:, 0]] + v[e[:, 1]])
        return out

    @cached_property
    def _vertex_to_node(self):
        m = np.full(self.mesh.n_vertices, -1, dtype=np.int64)
        isv = self.node_vertex >= 0
        m[self.node_vertex[isv]] = np.flatnonzero(isv)
        return m

    @cached_property
    def _edge_to_node(self):
        isv = self.node_vertex >= 0
        return {(int(a), int(b)): int(k) for k, (a, b) in zip(np.flatnonzero(~isv), self.node_edge[~isv])}

    def facet_scalar_dofs(self, facets):
        """Scalar node indices lying on the given facets (sorted, unique)."""
        facets = np.asarray(facets, dtype=np.int64).reshape(-1, self.dim)
        if len(facets) == 0:
            return np.zeros(0, dtype=np.int64)
        nodes = self._vertex_to_node[facets.ravel()]
        out = [nodes[nodes >= 0]]
        if self.degree == 2:
            e2n = self._edge_to_node
            extra = []
            for f in facets.tolist():
                for a, b in itertools.combinations(sorted(f), 2):
                    k = e2n.get((a, b))
                    if k is not None:
                        extra.append(k)
            out.append(np.asarray(extra, dtype=np.int64))
        return np.unique(np.concatenate(out))

    def tagged_dofs(self, tags, components=None):
        """Global dofs on facets carrying any of ``tags`` (all components by default)."""
        s = self.facet_scalar_dofs(self.mesh.tagged_facets(tags))
        comps = range(self.ncomp) if components is None else components
        return np.concatenate([s + c * self.n_scalar for c in comps]) if len(s) else s

    def interpolate(self, func):
        """Nodal interpolant of ``func(x)`` where ``x`` is ``(n, dim)``.

        ``func`` returns ``(n,)`` for scalar spaces and ``(n, ncomp)`` for vector ones.
        """
        vals = np.asarray(func(self.node_coords), dtype=float)
        if self.ncomp == 1:
            return np.broadcast_to(vals.reshape(-1), (self.n_scalar,)).astype(float)
        vals = np.broadcast_to(vals, (self.n_scalar, self.ncomp))
        return np.ascontiguousarray(vals.T).reshape(-1)

    def components(self, coeffs):
        """Reshape a coefficient vector into ``(n_scalar, ncomp)``."""
        return np.asarray(coeffs).reshape(self.ncomp, self.n_scalar).T

    def vertex_values(self, coeffs, fill=np.nan):
        """Values at mesh vertices, ``(n_vertices,)`` or ``(n_vertices, ncomp)``; ``fill`` off-support."""
        comp = self.components(coeffs)
        out = np.full((self.mesh.n_vertices, self.ncomp), fill, dtype=float)
        m = self._vertex_to_node
        ok = m >= 0
        out[ok] = comp[m[ok]]
        return out[:, 0] if self.ncomp == 1 else out

    def eval_cell(self, coeffs, cell, ref_points):
        """Values at reference points of global cell ``cell``; ``(npts,)`` or ``(npts, ncomp)``."""
        row = self.cell_position[cell]
        if row < 0:
            raise SpaceError(f"cell {cell} is outside the support of this space")
        vals, _ = reference_basis_eval(self.degree, np.atleast_2d(ref_points))
        comp = self.components(coeffs)[self.scalar_dofs[row]]  # (nloc, ncomp)
        out = vals @ comp
        return out[:, 0] if self.ncomp == 1 else out

    def at_quadrature(self, coeffs, quad):
        """Field values ``(nc, nq, ncomp)`` and physical gradients ``(nc, nq, ncomp, dim)``."""
        vals, dref = reference_basis_eval(self.degree, quad.points)
        geom = cell_geometry(self.mesh, self.cells)
        grads = physical_gradients(dref, geom)
        local = self.components(coeffs)[self.scalar_dofs]  # (nc, nloc, ncomp)
        u = np.einsum("qi,cik->cqk", vals, local, optimize=True)
        du = np.einsum("cqid,cik->cqkd", grads, local, optimize=True)
        return u, du


def build_dof_map(mesh, rank="scalar", degree=1, support="all"):
    """Build a :class:`FunctionSpace`; ``rank`` is ``'scalar'``, ``'vector'`` or a component count."""
    if degree not in (1, 2):
        raise SpaceError(f"unsupported polynomial degree {degree}")
    if support not in _SUPPORTS:
        raise SpaceError(f"unknown support {support!r}")
    if rank == "scalar":
        ncomp = 1
    elif rank == "vector":
        ncomp = mesh.dim
    else:
        ncomp = int(rank)
    if support == "ah":
        cells = mesh.region_cells(RegionTag.AQUEOUS_HUMOR)
        if len(cells) == 0:
            raise SpaceError("aqueous-humor support requested on a mesh without aqueous humor cells")
    else:
        cells = np.arange(mesh.n_cells)
    dim = mesh.dim
    conn = mesh.cells[cells]
    verts, vinv = np.unique(conn.ravel(), return_inverse=True)
    vdofs = vinv.reshape(conn.shape)
    node_vertex = verts.astype(np.int64)
    node_edge = np.full((len(verts), 2), -1, dtype=np.int64)
    if degree == 1:
        scalar_dofs = vdofs
        n_scalar = len(verts)
    else:
        edges = LOCAL_EDGES[dim]
        ekeys = np.sort(np.stack([conn[:, [i, j]] for i, j in edges], axis=1), axis=2)  # (nc, ne, 2)
        uniq, einv = np.unique(ekeys.reshape(-1, 2), axis=0, return_inverse=True)
        edofs = einv.reshape(len(cells), len(edges)) + len(verts)
        scalar_dofs = np.hstack([vdofs, edofs])
        n_scalar = len(verts) + len(uniq)
        node_vertex = np.concatenate([node_vertex, np.full(len(uniq), -1, dtype=np.int64)])
        node_edge = np.vstack([node_edge, uniq.astype(np.int64)])
    for a in (scalar_dofs, node_vertex, node_edge):
        a.setflags(write=False)
    cells = np.asarray(cells, dtype=np.int64)
    cells.setflags(write=False)
    return FunctionSpace(mesh, degree, ncomp, support, cells, scalar_dofs.astype(np.int64), int(n_scalar),
                         node_vertex, node_edge)
