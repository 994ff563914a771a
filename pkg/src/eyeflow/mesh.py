"""Tagged simplex meshes: data model, validation and Gmsh MSH 4.1 I/O."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import MeshError


class RegionTag(enum.IntEnum):
    CORNEA = 1
    AQUEOUS_HUMOR = 2
    IRIS = 3
    LENS = 4
    VITREOUS = 5
    OUTER_SHELL = 6


class BoundaryTag(enum.IntEnum):
    GAMMA_C = 1
    GAMMA_I = 2
    GAMMA_L = 3
    GAMMA_VH = 4
    GAMMA_SC = 5
    GAMMA_BODY = 6
    GAMMA_AMB = 7


#: Walls of the aqueous humor where the velocity vanishes.
NO_SLIP_TAGS = frozenset({BoundaryTag.GAMMA_C, BoundaryTag.GAMMA_I, BoundaryTag.GAMMA_L,
                          BoundaryTag.GAMMA_VH, BoundaryTag.GAMMA_SC})
OUTER_TAGS = frozenset({BoundaryTag.GAMMA_BODY, BoundaryTag.GAMMA_AMB})

#: AH-wall tag implied by the region on the other side of the wall.
WALL_TAG_BY_NEIGHBOUR = {
    RegionTag.CORNEA: BoundaryTag.GAMMA_C,
    RegionTag.IRIS: BoundaryTag.GAMMA_I,
    RegionTag.LENS: BoundaryTag.GAMMA_L,
    RegionTag.VITREOUS: BoundaryTag.GAMMA_VH,
    RegionTag.OUTER_SHELL: BoundaryTag.GAMMA_SC,
}

_REGION_NAMES = {
    "cornea": RegionTag.CORNEA,
    "aqueoushumor": RegionTag.AQUEOUS_HUMOR,
    "iris": RegionTag.IRIS,
    "lens": RegionTag.LENS,
    "vitreous": RegionTag.VITREOUS,
    "outershell": RegionTag.OUTER_SHELL,
}
_BOUNDARY_NAMES = {
    "gamma_c": BoundaryTag.GAMMA_C,
    "gamma_i": BoundaryTag.GAMMA_I,
    "gamma_l": BoundaryTag.GAMMA_L,
    "gamma_vh": BoundaryTag.GAMMA_VH,
    "gamma_sc": BoundaryTag.GAMMA_SC,
    "gamma_body": BoundaryTag.GAMMA_BODY,
    "gamma_amb": BoundaryTag.GAMMA_AMB,
}
_EXTRA_REGIONS: dict[str, int] = {}


def register_region(name):
    """Register an additional named region and return its integer code.

    Codes for extra regions start at 100. Registering an existing name returns
    the existing code.
    """
    key = name.strip().lower()
    if key in _REGION_NAMES:
        return int(_REGION_NAMES[key])
    if key not in _EXTRA_REGIONS:
        _EXTRA_REGIONS[key] = 100 + len(_EXTRA_REGIONS)
    return _EXTRA_REGIONS[key]


def region_code(name):
    if isinstance(name, (int, np.integer)):
        return int(name)
    key = name.strip().lower()
    if key in _REGION_NAMES:
        return int(_REGION_NAMES[key])
    if key in _EXTRA_REGIONS:
        return _EXTRA_REGIONS[key]
    raise MeshError(f"unmapped physical name {name!r}")


def region_name(code):
    for name, tag in _REGION_NAMES.items():
        if int(tag) == code:
            return name
    for name, c in _EXTRA_REGIONS.items():
        if c == code:
            return name
    return f"region_{code}"


def boundary_name(tag):
    for name, t in _BOUNDARY_NAMES.items():
        if t == tag:
            return name
    raise KeyError(tag)


def _as_frozen(a, dtype):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming simplex mesh with per-cell region codes and tagged facets.

    Coordinates are in meters. ``facets`` lists only the tagged facets:
    outer-boundary facets and facets on the wall of the aqueous humor.
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_region: np.ndarray
    facets: np.ndarray
    facet_tag: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (n, 2) or (n, 3) array")
        dim = vertices.shape[1]
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, dim + 1)
        facets = np.asarray(self.facets, dtype=np.int64).reshape(-1, dim)
        object.__setattr__(self, "vertices", _as_frozen(vertices, float))
        object.__setattr__(self, "cells", _as_frozen(cells, np.int64))
        object.__setattr__(self, "cell_region", _as_frozen(np.asarray(self.cell_region).reshape(-1), np.int64))
        object.__setattr__(self, "facets", _as_frozen(facets, np.int64))
        object.__setattr__(self, "facet_tag", _as_frozen(np.asarray(self.facet_tag).reshape(-1), np.int64))
        if len(self.cell_region) != len(self.cells):
            raise MeshError("cell_region length differs from the number of cells")
        if len(self.facet_tag) != len(self.facets):
            raise MeshError("facet_tag length differs from the number of facets")

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    def signed_volumes(self):
        x = self.vertices[self.cells]
        jac = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)
        fact = 2.0 if self.dim == 2 else 6.0
        return np.linalg.det(jac) / fact

    @cached_property
    def cell_volumes(self):
        return np.abs(self.signed_volumes())

    def region_cells(self, region):
        return np.flatnonzero(self.cell_region == int(region))

    def has_region(self, region):
        return bool(np.any(self.cell_region == int(region)))

    @cached_property
    def _facet_table(self):
        """All facets of the mesh (sorted vertex tuples) with their cell neighbours."""
        dim = self.dim
        local = list(itertools.combinations(range(dim + 1), dim))
        nc = self.n_cells
        allf = np.sort(self.cells[:, local].reshape(-1, dim), axis=1)
        owner = np.repeat(np.arange(nc), len(local))
        uniq, inverse, counts = np.unique(allf, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        neighbours = np.full((len(uniq), 2), -1, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        slot = np.zeros(len(uniq), dtype=np.int64)
        for k in order:
            f = inverse[k]
            if slot[f] < 2:
                neighbours[f, slot[f]] = owner[k]
            slot[f] += 1
        overfull = np.flatnonzero(counts > 2)
        return uniq, neighbours, overfull

    @property
    def all_facets(self):
        return self._facet_table[0]

    @property
    def facet_neighbours(self):
        return self._facet_table[1]

    @cached_property
    def _tag_lookup(self):
        return {tuple(sorted(f)): int(t) for f, t in zip(self.facets.tolist(), self.facet_tag.tolist())}

    def facet_tag_of(self, facet):
        return self._tag_lookup.get(tuple(sorted(facet)))

    def tagged_facets(self, tags):
        tags = {int(t) for t in (tags if np.iterable(tags) else [tags])}
        mask = np.isin(self.facet_tag, list(tags))
        return self.facets[mask]

    def facet_measures(self, facets):
        x = self.vertices[np.asarray(facets)]
        if self.dim == 2:
            return np.linalg.norm(x[:, 1] - x[:, 0], axis=1)
        return 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)

    def measure(self, tags):
        return float(self.facet_measures(self.tagged_facets(tags)).sum())

    def boundary_facets(self):
        uniq, nb, _ = self._facet_table
        return uniq[nb[:, 1] < 0]

    @cached_property
    def cell_neighbours(self):
        """(n_cells, dim+1) neighbour across the facet opposite each local vertex, -1 on the boundary."""
        dim = self.dim
        uniq, nb, _ = self._facet_table
        index = {tuple(f): k for k, f in enumerate(uniq.tolist())}
        out = np.full((self.n_cells, dim + 1), -1, dtype=np.int64)
        for c, cell in enumerate(self.cells.tolist()):
            for i in range(dim + 1):
                f = tuple(sorted(cell[:i] + cell[i + 1:]))
                a, b = nb[index[f]]
                out[c, i] = b if a == c else a
        return out

    def mirrored(self, axis=0):
        """Reflect the mesh across the plane ``x_axis = 0`` (orientation restored)."""
        v = self.vertices.copy()
        v[:, axis] *= -1.0
        cells = self.cells.copy()
        cells[:, [0, 1]] = cells[:, [1, 0]]
        return Mesh(v, cells, self.cell_region, self.facets, self.facet_tag)

    def scaled(self, factor):
        return Mesh(self.vertices * factor, self.cells, self.cell_region, self.facets, self.facet_tag)


def _structural_violations(mesh):
    out = []
    nv = mesh.n_vertices
    if mesh.n_cells == 0:
        return ["empty mesh: no cells"]
    if mesh.cells.min() < 0 or mesh.cells.max() >= nv:
        bad = np.flatnonzero((mesh.cells < 0).any(1) | (mesh.cells >= nv).any(1))
        return [f"index out of range: cell {int(c)}" for c in bad]
    if len(mesh.facets) and (mesh.facets.min() < 0 or mesh.facets.max() >= nv):
        bad = np.flatnonzero((mesh.facets < 0).any(1) | (mesh.facets >= nv).any(1))
        return [f"index out of range: facet {int(f)}" for f in bad]
    vol = mesh.signed_volumes()
    scale = np.abs(vol).max()
    for c in np.flatnonzero(vol <= 1e-14 * scale):
        out.append(f"negative volume: cell {int(c)} (signed volume {vol[c]:.3e})")
    for f in mesh._facet_table[2]:
        out.append(f"non-conforming facet: {tuple(mesh.all_facets[f])} shared by more than two cells")
    out.extend(_hanging_facets(mesh))
    return out


def _hanging_facets(mesh):
    """Boundary facets whose midpoint lies inside a cell other than their owner."""
    uniq, nb, _ = mesh._facet_table
    bmask = nb[:, 1] < 0
    bf = uniq[bmask]
    owners = nb[bmask, 0]
    if len(bf) == 0:
        return []
    mid = mesh.vertices[bf].mean(axis=1)
    x = mesh.vertices[mesh.cells]
    centroids = x.mean(axis=1)
    radius = np.linalg.norm(x - centroids[:, None, :], axis=2).max()
    tree = cKDTree(centroids)
    cand = tree.query_ball_point(mid, r=radius * 1.0001)
    jac = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)
    out = []
    for k, cells in enumerate(cand):
        for c in cells:
            if c == owners[k]:
                continue
            try:
                lam = np.linalg.solve(jac[c], mid[k] - x[c, 0])
            except np.linalg.LinAlgError:
                continue
            bary = np.concatenate([[1.0 - lam.sum()], lam])
            if bary.min() > -1e-10:
                out.append(f"non-conforming facet: {tuple(int(v) for v in bf[k])} lies inside cell {c}")
                break
    return out


def _tag_violations(mesh, outer_tags):
    out = []
    uniq, nb, _ = mesh._facet_table
    index = {tuple(f): k for k, f in enumerate(uniq.tolist())}
    ah = int(RegionTag.AQUEOUS_HUMOR)
    valid = {int(t) for t in BoundaryTag}
    seen = set()
    for k, (f, tag) in enumerate(zip(mesh.facets.tolist(), mesh.facet_tag.tolist())):
        key = tuple(sorted(f))
        if tag not in valid:
            out.append(f"invalid boundary tag: facet {k} has tag {tag}")
            continue
        if key in seen:
            out.append(f"duplicate tagged facet: facet {k}")
            continue
        seen.add(key)
        j = index.get(key)
        if j is None:
            out.append(f"dangling tagged facet: facet {k} is not a facet of any cell")
            continue
        a, b = nb[j]
        if b < 0:
            continue
        regions = {int(mesh.cell_region[a]), int(mesh.cell_region[b])}
        if not (ah in regions and len(regions) == 2):
            out.append(f"interior facet tagged: facet {k} is not on the boundary or the flow-region wall")
    for j in np.flatnonzero(nb[:, 1] < 0):
        tag = mesh._tag_lookup.get(tuple(uniq[j]))
        if tag is None:
            out.append(f"untagged boundary facet: {tuple(int(v) for v in uniq[j])}")
        elif outer_tags is not None and tag not in {int(t) for t in outer_tags}:
            out.append(f"outer boundary facet {tuple(int(v) for v in uniq[j])} tagged "
                       f"{BoundaryTag(tag).name}, expected one of {sorted(BoundaryTag(t).name for t in outer_tags)}")
    inner = np.flatnonzero(nb[:, 1] >= 0)
    ra = mesh.cell_region[nb[inner, 0]]
    rb = mesh.cell_region[nb[inner, 1]]
    wall = inner[(ra == ah) != (rb == ah)]
    for j in wall:
        if mesh._tag_lookup.get(tuple(uniq[j])) is None:
            out.append(f"untagged flow-region wall facet: {tuple(int(v) for v in uniq[j])}")
    return out


def mesh_validate(mesh, outer_tags=OUTER_TAGS):
    """Return a list of invariant violations; empty iff the mesh is valid.

    ``outer_tags`` restricts which tags may sit on the outer boundary; pass
    ``None`` to accept any tag there (unit-square verification meshes put
    wall tags on the outer boundary).
    """
    out = _structural_violations(mesh)
    if out:
        return out
    out.extend(_tag_violations(mesh, outer_tags))
    if not mesh.has_region(RegionTag.AQUEOUS_HUMOR):
        out.append("missing flow region: no cell tagged aqueoushumor")
    return out


# --------------------------------------------------------------------------
# Gmsh MSH 4.1 (ASCII)

_SIMPLEX_TYPES = {1: 1, 2: 2, 4: 3}  # element type -> dimension
_NON_SIMPLEX = {3: "quadrangle", 5: "hexahedron", 6: "prism", 7: "pyramid"}
_IGNORED_TYPES = {15}  # points


def _sections(text):
    lines = text.splitlines()
    sections = {}
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if not line.startswith("$"):
            raise MeshError(f"malformed section header at line {i + 1}: {line!r}")
        name = line[1:]
        if name.startswith("End"):
            raise MeshError(f"unexpected {line} at line {i + 1}")
        end = f"$End{name}"
        j = i + 1
        while j < len(lines) and lines[j].strip() != end:
            j += 1
        if j == len(lines):
            raise MeshError(f"section ${name} opened at line {i + 1} is never closed")
        sections[name] = (i + 2, [ln.split() for ln in lines[i + 1:j]])
        i = j + 1
    return sections


class _Cursor:
    def __init__(self, name, start, rows):
        self.name, self.start, self.rows, self.i = name, start, rows, 0

    def next(self):
        while self.i < len(self.rows) and not self.rows[self.i]:
            self.i += 1
        if self.i >= len(self.rows):
            raise MeshError(f"section ${self.name} ended early")
        row = self.rows[self.i]
        self.i += 1
        return row

    def fail(self, msg):
        return MeshError(f"${self.name} line {self.start + self.i - 1}: {msg}")


def parse_gmsh_msh(text):
    """Parse an ASCII Gmsh MSH 4.1 file with named physical groups into a :class:`Mesh`.

    Physical names are matched case-insensitively against the region and
    boundary enumerations. Cells are reoriented to positive volume.
    """
    sec = _sections(text)
    for required in ("MeshFormat", "Nodes", "Elements"):
        if required not in sec:
            raise MeshError(f"missing section ${required}")
    fmt = sec["MeshFormat"][1]
    if not fmt or len(fmt[0]) < 3:
        raise MeshError("malformed $MeshFormat")
    if fmt[0][0] != "4.1":
        raise MeshError(f"unsupported MSH version {fmt[0][0]} (need 4.1)")
    if fmt[0][1] != "0":
        raise MeshError("binary MSH files are not supported")

    phys_names = {}
    if "PhysicalNames" in sec:
        cur = _Cursor("PhysicalNames", *sec["PhysicalNames"])
        try:
            n = int(cur.next()[0])
            for _ in range(n):
                row = cur.next()
                dim, tag = int(row[0]), int(row[1])
                name = " ".join(row[2:]).strip().strip('"')
                phys_names[(dim, tag)] = name
        except (ValueError, IndexError) as exc:
            raise cur.fail(f"cannot parse physical name ({exc})") from None

    entity_phys = {}
    if "Entities" in sec:
        cur = _Cursor("Entities", *sec["Entities"])
        try:
            counts = [int(v) for v in cur.next()[:4]]
            for dim, count in enumerate(counts):
                for _ in range(count):
                    row = cur.next()
                    tag = int(row[0])
                    k = 4 if dim == 0 else 7
                    nphys = int(row[k])
                    entity_phys[(dim, tag)] = [int(v) for v in row[k + 1:k + 1 + nphys]]
        except (ValueError, IndexError) as exc:
            raise cur.fail(f"cannot parse entity ({exc})") from None
    elif phys_names:
        raise MeshError("physical groups present but $Entities section missing")

    cur = _Cursor("Nodes", *sec["Nodes"])
    try:
        nblocks, nnodes = (int(v) for v in cur.next()[:2])
        tags, coords = [], []
        for _ in range(nblocks):
            edim, etag, parametric, nin = (int(v) for v in cur.next()[:4])
            block_tags = [int(cur.next()[0]) for _ in range(nin)]
            for _ in range(nin):
                row = cur.next()
                coords.append([float(v) for v in row[:3]])
            tags.extend(block_tags)
    except (ValueError, IndexError) as exc:
        raise cur.fail(f"cannot parse node ({exc})") from None
    if len(tags) != nnodes:
        raise MeshError(f"$Nodes declares {nnodes} nodes but lists {len(tags)}")
    order = np.argsort(tags, kind="stable")
    tag_to_index = {tags[k]: i for i, k in enumerate(order)}
    xyz = np.asarray(coords, dtype=float).reshape(-1, 3)[order]

    cur = _Cursor("Elements", *sec["Elements"])
    by_dim = {1: [], 2: [], 3: []}
    try:
        nblocks = int(cur.next()[0])
        for _ in range(nblocks):
            edim, etag, etype, nin = (int(v) for v in cur.next()[:4])
            if etype in _NON_SIMPLEX:
                raise MeshError(f"non-simplex element: {_NON_SIMPLEX[etype]} (type {etype}) in entity ({edim}, {etag})")
            rows = [cur.next() for _ in range(nin)]
            if etype in _IGNORED_TYPES:
                continue
            if etype not in _SIMPLEX_TYPES:
                raise MeshError(f"unsupported element type {etype}")
            nv = _SIMPLEX_TYPES[etype] + 1
            conn = []
            for row in rows:
                if len(row) < nv + 1:
                    raise cur.fail("element line too short")
                try:
                    conn.append([tag_to_index[int(v)] for v in row[1:nv + 1]])
                except KeyError as exc:
                    raise cur.fail(f"element references unknown node {exc.args[0]}") from None
            by_dim[_SIMPLEX_TYPES[etype]].append((etag, conn))
    except (ValueError, IndexError) as exc:
        raise cur.fail(f"cannot parse element ({exc})") from None

    dim = 3 if by_dim[3] else 2
    if not by_dim[dim]:
        raise MeshError("no triangle or tetrahedron elements found")

    def physical_name(edim, etag):
        phys = entity_phys.get((edim, etag), [])
        if len(phys) != 1:
            raise MeshError(f"entity ({edim}, {etag}) must belong to exactly one physical group, has {len(phys)}")
        name = phys_names.get((edim, phys[0]))
        if name is None:
            raise MeshError(f"physical group ({edim}, {phys[0]}) has no name")
        return name

    cells, regions = [], []
    for etag, conn in by_dim[dim]:
        code = region_code(physical_name(dim, etag))
        cells.extend(conn)
        regions.extend([code] * len(conn))
    facets, ftags = [], []
    for etag, conn in by_dim[dim - 1]:
        name = physical_name(dim - 1, etag).strip().lower()
        if name not in _BOUNDARY_NAMES:
            raise MeshError(f"unmapped physical name {name!r}")
        facets.extend(conn)
        ftags.extend([int(_BOUNDARY_NAMES[name])] * len(conn))

    cells = np.asarray(cells, dtype=np.int64)
    if dim == 2:
        vertices = xyz[:, :2]
    else:
        vertices = xyz
    mesh = Mesh(vertices, cells, regions, np.asarray(facets, dtype=np.int64).reshape(-1, dim), ftags)
    vol = mesh.signed_volumes()
    if np.any(vol < 0):
        cells = cells.copy()
        flip = vol < 0
        cells[flip, 0], cells[flip, 1] = cells[flip, 1].copy(), cells[flip, 0].copy()
        mesh = Mesh(vertices, cells, regions, mesh.facets, mesh.facet_tag)
    problems = _structural_violations(mesh)
    tagp = [p for p in _tag_violations(mesh, None)
            if p.startswith(("dangling", "duplicate", "interior facet", "invalid"))]
    if problems or tagp:
        raise MeshError("invalid mesh: " + "; ".join((problems + tagp)[:5]))
    return mesh


def write_gmsh_msh(mesh):
    """Serialize a mesh as ASCII MSH 4.1 with one entity per physical group."""
    dim = mesh.dim
    lines = ["$MeshFormat", "4.1 0 8", "$EndMeshFormat"]
    region_codes = sorted(set(mesh.cell_region.tolist()))
    ftags = sorted(set(mesh.facet_tag.tolist()))
    lines.append("$PhysicalNames")
    lines.append(str(len(region_codes) + len(ftags)))
    for t in ftags:
        lines.append(f'{dim - 1} {t} "{boundary_name(BoundaryTag(t))}"')
    for c in region_codes:
        lines.append(f'{dim} {c} "{region_name(c)}"')
    lines.append("$EndPhysicalNames")

    def bbox(idx):
        pts = mesh.vertices[np.unique(idx)]
        lo = np.zeros(3)
        hi = np.zeros(3)
        lo[:dim] = pts.min(0)
        hi[:dim] = pts.max(0)
        return " ".join(f"{v:.17g}" for v in (*lo, *hi))

    lines.append("$Entities")
    counts = [0, 0, 0, 0]
    counts[dim - 1] = len(ftags)
    counts[dim] = len(region_codes)
    lines.append(" ".join(str(c) for c in counts))
    for t in ftags:
        lines.append(f"{t} {bbox(mesh.facets[mesh.facet_tag == t])} 1 {t} 0")
    for c in region_codes:
        lines.append(f"{c} {bbox(mesh.cells[mesh.cell_region == c])} 1 {c} 0")
    lines.append("$EndEntities")

    nv = mesh.n_vertices
    lines.append("$Nodes")
    lines.append(f"1 {nv} 1 {nv}")
    lines.append(f"{dim} {region_codes[0]} 0 {nv}")
    lines.extend(str(i + 1) for i in range(nv))
    for p in mesh.vertices:
        xyz = list(p) + [0.0] * (3 - dim)
        lines.append(" ".join(f"{v:.17g}" for v in xyz))
    lines.append("$EndNodes")

    ftype = {1: 1, 2: 2}[dim - 1]
    ctype = {2: 2, 3: 4}[dim]
    blocks = []
    tag = 1
    for t in ftags:
        conn = mesh.facets[mesh.facet_tag == t]
        blocks.append((dim - 1, t, ftype, conn))
    for c in region_codes:
        conn = mesh.cells[mesh.cell_region == c]
        blocks.append((dim, c, ctype, conn))
    total = sum(len(b[3]) for b in blocks)
    lines.append("$Elements")
    lines.append(f"{len(blocks)} {total} 1 {total}")
    for edim, etag, etype, conn in blocks:
        lines.append(f"{edim} {etag} {etype} {len(conn)}")
        for row in conn:
            lines.append(f"{tag} " + " ".join(str(int(v) + 1) for v in row))
            tag += 1
    lines.append("$EndElements")
    return "\n".join(lines) + "\n"


def read_mesh(path):
    with open(path, encoding="utf-8") as fh:
        return parse_gmsh_msh(fh.read())
