"""Field export and derived metrics: VTK, CSV probes, pressure display, stream function."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from . import assembly as asm
from .exceptions import EyeflowError
from .femspace import build_dof_map, cell_geometry, quadrature_rule, reference_basis_eval
from .mesh import RegionTag

PA_PER_MMHG = 133.322
DISPLAY_OFFSET_MMHG = 15.5
#: Quadrature degree of the point set over which max |u| is taken.
METRIC_QUAD_DEGREE = 6
RECIRCULATION_THRESHOLD = 0.01
CSV_HEADER = ["s", "x", "y", "T_K", "umag_mps", "p_mmHg"]


def pressure_to_mmhg(pa, display_offset_mmHg=0.0):
    return np.asarray(pa) / PA_PER_MMHG + display_offset_mmHg


def physical_pressure(p, space_p, params):
    """Add back the hydrostatic head removed by the Boussinesq split: ``p + rho g . x``."""
    return np.asarray(p) + params.rho * (space_p.node_coords @ np.asarray(params.gravity))


def display_pressure(p_phys, gauge="max"):
    """Shift a pressure field so its maximum (or mean) is zero."""
    p_phys = np.asarray(p_phys, dtype=float)
    if gauge == "max":
        return p_phys - p_phys.max()
    if gauge == "mean":
        return p_phys - p_phys.mean()
    raise ValueError(f"unknown display gauge {gauge!r}")


@dataclass
class FieldOutput:
    """Converged (or flagged) solution with the metrics read off the fields."""

    state: object
    spaces: object
    mesh: object
    params: object
    report: object = None
    display_offset: float = DISPLAY_OFFSET_MMHG
    gauge: str = "max"
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.metrics:
            self.metrics = compute_metrics(self)

    @property
    def u(self):
        return self.state.u

    @property
    def T(self):
        return self.state.T

    @property
    def pressure_pa(self):
        """Display-gauged physical pressure at the pressure nodes (Pa)."""
        return display_pressure(physical_pressure(self.state.p, self.spaces.p, self.params), self.gauge)

    @property
    def pressure_mmhg(self):
        return pressure_to_mmhg(self.pressure_pa, self.display_offset)

    @property
    def converged(self):
        return self.report is None or bool(self.report.converged)


def max_speed(space_u, u, degree=METRIC_QUAD_DEGREE):
    """Maximum of ``|u|`` over quadrature points of every supported cell."""
    q = quadrature_rule(space_u.dim, degree)
    vals, _ = space_u.at_quadrature(u, q)
    return float(np.sqrt((vals ** 2).sum(axis=-1)).max())


def compute_metrics(out):
    p_pa = out.pressure_pa
    psi, count, extrema = stream_function(out)
    m = {
        "max_u": max_speed(out.spaces.u, out.u),
        "T_min": float(out.T.min()),
        "T_max": float(out.T.max()),
        "p_min_pa": float(p_pa.min()),
        "p_max_pa": float(p_pa.max()),
        "p_min_mmhg": float(pressure_to_mmhg(p_pa.min(), out.display_offset)),
        "p_max_mmhg": float(pressure_to_mmhg(p_pa.max(), out.display_offset)),
        "p_span_mmhg": float(np.ptp(p_pa) / PA_PER_MMHG),
        "recirculation": count,
        "psi_extrema": extrema,
        "wall_samples": wall_samples(out),
    }
    return m


# --------------------------------------------------------------------------
# stream function

def stream_function(out):
    """Stream function on the aqueous humor and its recirculation cells.

    Solves ``-lap psi = curl u`` with ``psi = 0`` on the flow-domain boundary.
    Returns ``(psi, count, extrema)`` where ``extrema`` lists ``(x, y, psi)``
    of the strict local extrema of the nodal graph beyond 1% of max |psi|
    (maxima where psi > 0, minima where psi < 0).
    """
    su = out.spaces.u
    if su.dim != 2:
        raise EyeflowError("stream function is only defined in 2D")
    s = build_dof_map(out.mesh, "scalar", su.degree, support="ah")
    u = np.asarray(out.u)
    if not np.any(u):
        return np.zeros(s.n_dofs), 0, []
    q = quadrature_rule(2, 2 * su.degree)
    vals, dref = reference_basis_eval(s.degree, q.points)
    _, du = su.at_quadrature(u, q)  # (nc, nq, 2, 2)
    omega = du[:, :, 1, 0] - du[:, :, 0, 1]
    geom = cell_geometry(out.mesh, su.cells)
    w = geom.det[:, None] * q.weights[None, :]
    load = asm.scatter_vector(s.scalar_dofs, np.einsum("cq,cq,qi->ci", w, omega, vals), s.n_dofs)
    K = asm.assemble_diffusion(s)
    bnd = _boundary_nodes(s)
    K, load = asm.constrain(K, load, bnd, np.zeros(len(bnd)), symmetric=True)
    psi = spla.spsolve(sp.csc_matrix(K), load)
    count, extrema = count_recirculation(s, psi, bnd)
    return psi, count, extrema


def _boundary_nodes(space):
    """Nodes on the boundary of the support of ``space``."""
    mesh = space.mesh
    sub = np.zeros(mesh.n_cells, dtype=bool)
    sub[space.cells] = True
    nb = mesh.facet_neighbours
    a = sub[nb[:, 0]]
    b = np.where(nb[:, 1] >= 0, sub[np.maximum(nb[:, 1], 0)], False)
    return space.facet_scalar_dofs(mesh.all_facets[a != b])


def node_graph(space):
    nloc = space.nloc
    rows = np.repeat(space.scalar_dofs, nloc, axis=1).ravel()
    cols = np.tile(space.scalar_dofs, (1, nloc)).ravel()
    g = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(space.n_scalar, space.n_scalar)).tocsr()
    g.setdiag(0)
    g.eliminate_zeros()
    return g


def count_recirculation(space, psi, boundary=(), threshold=RECIRCULATION_THRESHOLD):
    psi = np.asarray(psi, dtype=float)
    scale = np.abs(psi).max()
    if scale == 0:
        return 0, []
    g = node_graph(space)
    nbmax = np.full(len(psi), -np.inf)
    nbmin = np.full(len(psi), np.inf)
    for i in range(len(psi)):
        nbr = g.indices[g.indptr[i]:g.indptr[i + 1]]
        if len(nbr):
            nbmax[i] = psi[nbr].max()
            nbmin[i] = psi[nbr].min()
    interior = np.ones(len(psi), dtype=bool)
    interior[np.asarray(boundary, dtype=np.int64)] = False
    big = np.abs(psi) > threshold * scale
    is_max = (psi > 0) & (psi > nbmax)
    is_min = (psi < 0) & (psi < nbmin)
    idx = np.flatnonzero(interior & big & (is_max | is_min))
    xy = space.node_coords[idx]
    return len(idx), [(float(x), float(y), float(psi[i])) for (x, y), i in zip(xy, idx)]


# --------------------------------------------------------------------------
# point location and sampling

class Locator:
    """Point location by a straight-line cell walk from the nearest centroid."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.geom = cell_geometry(mesh)
        self.tree = cKDTree(mesh.vertices[mesh.cells].mean(axis=1))
        self.nb = mesh.cell_neighbours

    def _bary(self, c, x):
        ref = self.geom.inv[c] @ (x - self.geom.x0[c])
        return np.concatenate([[1.0 - ref.sum()], ref]), ref

    def locate(self, x, tol=1e-10):
        """Return ``(cell, reference coordinates)`` of point ``x``."""
        x = np.asarray(x, dtype=float)
        _, start = self.tree.query(x, k=min(4, self.mesh.n_cells))
        for c in np.atleast_1d(start):
            c = int(c)
            for _ in range(4 * self.mesh.n_cells):
                lam, ref = self._bary(c, x)
                j = int(np.argmin(lam))
                if lam[j] >= -tol:
                    return c, ref
                nxt = self.nb[c, j]
                if nxt < 0:
                    break
                c = int(nxt)
        # the walk can leave a non-convex domain; finish with an exhaustive search
        ref = np.einsum("cij,cj->ci", self.geom.inv, x - self.geom.x0)
        lam = np.column_stack([1.0 - ref.sum(1), ref]).min(axis=1)
        c = int(np.argmax(lam))
        if lam[c] >= -tol:
            return c, ref[c]
        raise EyeflowError(f"point {tuple(x)} is outside the mesh")


def sample(out, points, locator=None):
    """``T``, ``|u|``, pressure (mmHg) and velocity at physical points; NaN pressure outside the fluid."""
    loc = locator or Locator(out.mesh)
    sT, su, sp_ = out.spaces.T, out.spaces.u, out.spaces.p
    p_mmhg = out.pressure_mmhg
    res = []
    for x in np.atleast_2d(points):
        c, ref = loc.locate(x)
        T = float(sT.eval_cell(out.T, c, ref)[0])
        if su.cell_position[c] >= 0:
            vel = su.eval_cell(out.u, c, ref)[0]
            p = float(sp_.eval_cell(p_mmhg, c, ref)[0])
        else:
            vel = np.zeros(su.ncomp)
            p = float("nan")
        res.append((T, float(np.linalg.norm(vel)), p, vel))
    return res


def probe_line(out, start, end, n, locator=None):
    """``n`` equally spaced samples along a segment as CSV rows (header first)."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    pts = start[None, :] + t[:, None] * (end - start)[None, :]
    s = t * np.linalg.norm(end - start)
    rows = [CSV_HEADER]
    for si, x, (T, um, p, _) in zip(s, pts, sample(out, pts, locator)):
        rows.append([_fmt(si), _fmt(x[0]), _fmt(x[1]), _fmt(T), _fmt(um), _fmt(p)])
    return rows


def _fmt(v):
    return repr(float(v))


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def wall_samples(out, fractions=(0.15, 0.85), levels=(0.75, -0.75)):
    """Vertical velocity next to the anterior and posterior walls of the front chamber.

    For each level (fraction of the flow region's half height) the first
    fluid run along a horizontal line is the anterior chamber; samples are
    taken at ``fractions`` of its width.  Returns a list of dicts.
    """
    if out.spaces.u.dim != 2:
        return []
    ah = out.mesh.vertices[np.unique(out.mesh.cells[out.mesh.region_cells(RegionTag.AQUEOUS_HUMOR)])]
    (x0, y0), (x1, y1) = ah.min(axis=0), ah.max(axis=0)
    yc, half = 0.5 * (y0 + y1), 0.5 * (y1 - y0)
    loc = Locator(out.mesh)
    su = out.spaces.u
    samples = []
    for lev in levels:
        y = yc + lev * half
        xs = np.linspace(x0, x1, 401)
        inside = []
        for x in xs:
            try:
                c, _ = loc.locate((x, y))
            except EyeflowError:
                inside.append(False)
                continue
            inside.append(su.cell_position[c] >= 0)
        inside = np.array(inside)
        if not inside.any():
            continue
        first = int(np.argmax(inside))
        last = first
        while last + 1 < len(xs) and inside[last + 1]:
            last += 1
        xa, xb = xs[first], xs[last]
        for f in fractions:
            x = xa + f * (xb - xa)
            vel = sample(out, [(x, y)], loc)[0][3]
            samples.append({"x": float(x), "y": float(y), "side": "anterior" if f < 0.5 else "posterior",
                            "u_y": float(vel[1]), "u_x": float(vel[0])})
    return samples


# --------------------------------------------------------------------------
# VTK legacy output

def _vtk_fields(out, refine):
    mesh = out.mesh
    su, sp_, sT = out.spaces.u, out.spaces.p, out.spaces.T
    p_mmhg = out.pressure_mmhg
    if not refine:
        pts = mesh.vertices
        cells = mesh.cells
        vel = su.vertex_values(out.u, fill=0.0)
        T = sT.vertex_values(out.T)
        p = sp_.vertex_values(p_mmhg)
        return pts, cells, vel, p, T
    if mesh.dim != 2 or sT.degree != 2:
        raise EyeflowError("refined output needs a 2D P2 temperature space")
    pts = sT.node_coords
    d = sT.scalar_dofs  # local order: vertices 0..2, edges (0,1), (1,2), (0,2)
    v0, v1, v2, e01, e12, e02 = (d[:, i] for i in range(6))
    cells = np.concatenate([
        np.column_stack([v0, e01, e02]), np.column_stack([e01, v1, e12]),
        np.column_stack([e02, e12, v2]), np.column_stack([e01, e12, e02]),
    ]).reshape(4, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    T = np.asarray(out.T)
    vel = np.zeros((len(pts), 2))
    p = np.full(len(pts), np.nan)
    # velocity: P2 nodes of the fluid space coincide with those of the temperature space
    fluid_cells = su.cells
    tnodes = sT.scalar_dofs[sT.cell_position[fluid_cells]].ravel()
    unodes = su.scalar_dofs.ravel()
    vel[tnodes] = su.components(out.u)[unodes]
    # pressure is P1: interpolate to edge midpoints
    pv = sp_.components(p_mmhg)[:, 0][sp_.scalar_dofs]  # (nc, 3)
    tl = sT.scalar_dofs[sT.cell_position[fluid_cells]]
    pv6 = np.column_stack([pv, 0.5 * (pv[:, 0] + pv[:, 1]), 0.5 * (pv[:, 1] + pv[:, 2]), 0.5 * (pv[:, 0] + pv[:, 2])])
    p[tl.ravel()] = pv6.ravel()
    return pts, cells, vel, p, T


def vtk_text(out, refine=False, title="eyeflow solution"):
    pts, cells, vel, p, T = _vtk_fields(out, refine)
    n, dim = pts.shape
    nv = cells.shape[1]
    ctype = {3: 5, 4: 10}[nv]
    buf = io.StringIO()
    w = buf.write
    w("# vtk DataFile Version 3.0\n")
    w(title.replace("\n", " ")[:255] + "\n")
    w("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    w(f"POINTS {n} double\n")
    p3 = np.zeros((n, 3))
    p3[:, :dim] = pts
    for row in p3:
        w(" ".join(_g(v) for v in row) + "\n")
    w(f"CELLS {len(cells)} {len(cells) * (nv + 1)}\n")
    for c in cells:
        w(f"{nv} " + " ".join(str(int(i)) for i in c) + "\n")
    w(f"CELL_TYPES {len(cells)}\n")
    w("".join(f"{ctype}\n" for _ in range(len(cells))))
    w(f"POINT_DATA {n}\n")
    v3 = np.zeros((n, 3))
    v3[:, : vel.shape[1]] = vel
    w("VECTORS velocity double\n")
    for row in v3:
        w(" ".join(_g(v) for v in row) + "\n")
    for name, arr in (("pressure_mmHg", p), ("temperature_K", T)):
        w(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        w("".join(_g(v) + "\n" for v in arr))
    return buf.getvalue()


def _g(v):
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


def write_vtk(out, path, refine=False):
    text = vtk_text(out, refine)
    problems = validate_vtk(text)
    if problems:
        raise EyeflowError("invalid VTK output: " + "; ".join(problems))
    with open(path, "w") as fh:
        fh.write(text)


def validate_vtk(text):
    """Check a legacy ASCII unstructured-grid file against the format grammar; returns problems."""
    try:
        parse_vtk(text)
    except (EyeflowError, ValueError, IndexError) as exc:
        return [str(exc)]
    return []


def parse_vtk(text):
    """Parse legacy ASCII VTK unstructured grid: returns ``points, cells, cell_types, point_data``."""
    lines = text.split("\n")
    if not lines[0].startswith("# vtk DataFile Version"):
        raise EyeflowError("missing '# vtk DataFile Version' header")
    if len(lines) < 4 or lines[2].strip() != "ASCII":
        raise EyeflowError("only ASCII files are supported")
    if lines[3].split() != ["DATASET", "UNSTRUCTURED_GRID"]:
        raise EyeflowError("expected DATASET UNSTRUCTURED_GRID")
    toks = " ".join(lines[4:]).split()
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(toks):
            raise EyeflowError("unexpected end of file")
        out = toks[pos:pos + k]
        pos += k
        return out

    def keyword(word):
        t = take(1)[0]
        if t != word:
            raise EyeflowError(f"expected {word}, found {t!r}")

    keyword("POINTS")
    n, _ = int(take(1)[0]), take(1)
    points = np.array(take(3 * n), dtype=float).reshape(n, 3)
    keyword("CELLS")
    nc, size = int(take(1)[0]), int(take(1)[0])
    flat = np.array(take(size), dtype=np.int64)
    cells, i = [], 0
    while i < size:
        k = flat[i]
        cells.append(flat[i + 1:i + 1 + k])
        i += k + 1
    if len(cells) != nc or i != size:
        raise EyeflowError("CELLS section size mismatch")
    if any((c < 0).any() or (c >= n).any() for c in cells):
        raise EyeflowError("cell references a missing point")
    keyword("CELL_TYPES")
    if int(take(1)[0]) != nc:
        raise EyeflowError("CELL_TYPES count mismatch")
    types = np.array(take(nc), dtype=int)
    data = {}
    if pos < len(toks):
        keyword("POINT_DATA")
        if int(take(1)[0]) != n:
            raise EyeflowError("POINT_DATA count mismatch")
        while pos < len(toks):
            kind = take(1)[0]
            if kind == "VECTORS":
                name, _ = take(2)
                data[name] = np.array(take(3 * n), dtype=float).reshape(n, 3)
            elif kind == "SCALARS":
                name, _ = take(2)
                ncomp = 1
                if toks[pos] != "LOOKUP_TABLE":
                    ncomp = int(take(1)[0])
                keyword("LOOKUP_TABLE")
                take(1)
                arr = np.array(take(ncomp * n), dtype=float)
                data[name] = arr if ncomp == 1 else arr.reshape(n, ncomp)
            else:
                raise EyeflowError(f"unsupported point-data section {kind!r}")
    return points, cells, types, data


def read_vtk(path):
    with open(path) as fh:
        return parse_vtk(fh.read())
