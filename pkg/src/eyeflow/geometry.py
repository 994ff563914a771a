"""Parametric 2D vertical cut of the eye, meshed with constrained Delaunay triangulation.

Axes: ``x`` runs along the optical axis from the corneal apex (x = 0) to the
posterior pole (x = axial_length), so the anterior direction is -x; ``y`` is
vertical when the subject stands. The default dimensions are literature-typical
placeholders, chosen so the aqueous humor spans roughly 6 mm vertically.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import triangle

from .exceptions import GeometryError, MeshError
from .mesh import WALL_TAG_BY_NEIGHBOUR, BoundaryTag, Mesh, RegionTag, mesh_validate


@dataclass(frozen=True)
class EyeGeometry:
    """Geometry parameters in meters."""

    axial_length: float = 0.024
    sclera_radius: float = 0.0115
    shell_thickness: float = 0.001
    cornea_radius: float = 0.0078
    cornea_thickness: float = 0.00055
    chamber_depth: float = 0.003
    chamber_height: float = 0.0062
    iris_thickness: float = 0.0004
    pupil_aperture: float = 0.003
    lens_gap: float = 0.0002
    pc_depth: float = 0.0005
    lens_thickness: float = 0.004
    lens_height: float = 0.009
    amb_strip: float = 0.0015
    h: float = 0.0004
    ah_refinement: float = 0.5

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def with_(self, **kw):
        return replace(self, **kw)

    def as_dict(self):
        return asdict(self)

    def layout(self):
        """Derived key coordinates (meters); raises GeometryError when degenerate."""
        return _layout(self)


@dataclass(frozen=True)
class Layout:
    apex: tuple
    pole: tuple
    x_limbus: float
    y_limbus: float
    x_inner_junction: float
    y_inner_junction: float
    x_iris_front: float
    x_iris_back: float
    x_vh: float
    y_vh_top: float
    x_lens: float
    y_lens_vh: float
    x_amb_limit: float
    cornea_inner_at_top: float
    half_height: float
    half_pupil: float
    sclera_center: float


def _circle_intersection(c1, r1, c2, r2):
    """Upper intersection point of two circles centred on the x axis."""
    x = (r1 ** 2 - r2 ** 2 - c1 ** 2 + c2 ** 2) / (2.0 * (c2 - c1))
    y2 = r1 ** 2 - (x - c1) ** 2
    if y2 <= 0:
        return None
    return x, math.sqrt(y2)


def _layout(g):
    vals = {f: getattr(g, f) for f in EyeGeometry.field_names()}
    for name, v in vals.items():
        if not (v > 0 and math.isfinite(v)):
            raise GeometryError(f"degenerate geometry: {name} must be positive (got {v})")
    if g.ah_refinement > 1:
        raise GeometryError("degenerate geometry: ah_refinement must be <= 1")
    rc, tc = g.cornea_radius, g.cornea_thickness
    rs, ts = g.sclera_radius, g.shell_thickness
    xs = g.axial_length - rs
    rci, rsi = rc - tc, rs - ts
    if rci <= 0 or rsi <= 0:
        raise GeometryError("degenerate geometry: shell thicker than its radius")
    outer = _circle_intersection(rc, rc, xs, rs)
    inner = _circle_intersection(rc, rci, xs, rsi)
    if outer is None or inner is None or outer[0] <= 0 or xs - rs <= 0:
        raise GeometryError("degenerate geometry: cornea does not protrude from the sclera")
    hh = 0.5 * g.chamber_height
    hp = 0.5 * g.pupil_aperture
    if hp >= hh:
        raise GeometryError("degenerate geometry: pupil aperture must be smaller than the chamber height")
    if hh >= rci or hh >= inner[1]:
        raise GeometryError("degenerate geometry: chamber taller than the inner cornea")
    x_ct = rc - math.sqrt(rci ** 2 - hh ** 2)
    x_if = tc + g.chamber_depth
    if x_if <= x_ct:
        raise GeometryError("degenerate geometry: chamber depth <= 0 at the chamber angle")
    x_ib = x_if + g.iris_thickness
    x_vh = x_ib + g.pc_depth
    if g.lens_gap >= g.pc_depth:
        raise GeometryError("degenerate geometry: lens gap must be smaller than the posterior chamber depth")
    if x_vh <= inner[0]:
        raise GeometryError("degenerate geometry: posterior chamber reaches the limbus")
    a, b = 0.5 * g.lens_thickness, 0.5 * g.lens_height
    x_l = x_ib + g.lens_gap + a
    s = (x_vh - x_l) / a
    if not -1 < s < 1:
        raise GeometryError("degenerate geometry: lens does not cross the vitreous interface")
    y_star = b * math.sqrt(1 - s * s)
    if y_star >= hh:
        raise GeometryError("degenerate geometry: lens taller than the posterior chamber")
    if b <= hh or x_l + a >= g.axial_length - ts:
        raise GeometryError("degenerate geometry: lens does not fit inside the globe")
    y_vt2 = rsi ** 2 - (x_vh - xs) ** 2
    if y_vt2 <= hh ** 2:
        raise GeometryError("degenerate geometry: vitreous interface outside the globe")
    return Layout(
        apex=(0.0, 0.0), pole=(g.axial_length, 0.0),
        x_limbus=outer[0], y_limbus=outer[1],
        x_inner_junction=inner[0], y_inner_junction=inner[1],
        x_iris_front=x_if, x_iris_back=x_ib, x_vh=x_vh, y_vh_top=math.sqrt(y_vt2),
        x_lens=x_l, y_lens_vh=y_star, x_amb_limit=outer[0] + g.amb_strip,
        cornea_inner_at_top=x_ct, half_height=hh, half_pupil=hp, sclera_center=xs,
    )


def _n_pieces(length, spacing):
    return max(1, int(math.ceil(length / spacing - 1e-9)))


def _arc(cx, cy, rx, ry, t0, t1, spacing):
    """Points on an elliptic arc x = cx + rx cos t, y = cy + ry sin t, endpoints included."""
    length = abs(t1 - t0) * max(rx, ry)
    n = _n_pieces(length, spacing)
    t = np.linspace(t0, t1, n + 1)
    return np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])


def _line(p, q, spacing):
    p, q = np.asarray(p, float), np.asarray(q, float)
    n = _n_pieces(np.linalg.norm(q - p), spacing)
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    return p + s * (q - p)


class _Pslg:
    def __init__(self, tol):
        self.points = []
        self.index = {}
        self.segments = []
        self.tol = tol

    def _vid(self, p):
        key = (round(p[0] / self.tol), round(p[1] / self.tol))
        if key not in self.index:
            self.index[key] = len(self.points)
            self.points.append((float(p[0]), float(p[1])))
        return self.index[key]

    def add(self, pts):
        ids = [self._vid(p) for p in pts]
        self.segments.extend((a, b) for a, b in zip(ids[:-1], ids[1:]) if a != b)


def _polylines(g, lay, scale):
    """All interface curves in scaled units (upper half mirrored to the lower half)."""
    h = g.h * scale
    hf = g.ah_refinement * h
    rc, rci = g.cornea_radius * scale, (g.cornea_radius - g.cornea_thickness) * scale
    rs, rsi = g.sclera_radius * scale, (g.sclera_radius - g.shell_thickness) * scale
    xs = lay.sclera_center * scale
    xl, yl = lay.x_limbus * scale, lay.y_limbus * scale
    xi, yi = lay.x_inner_junction * scale, lay.y_inner_junction * scale
    hh, hp = lay.half_height * scale, lay.half_pupil * scale
    xct = lay.cornea_inner_at_top * scale
    xif, xib, xvh = lay.x_iris_front * scale, lay.x_iris_back * scale, lay.x_vh * scale
    yvt = lay.y_vh_top * scale
    xlc, ys = lay.x_lens * scale, lay.y_lens_vh * scale
    a, b = 0.5 * g.lens_thickness * scale, 0.5 * g.lens_height * scale

    curves = []
    # outer cornea, split at the apex
    th = math.atan2(yl, xl - rc)
    curves.append(_arc(rc, 0, rc, rc, th, math.pi, h))
    curves.append(_arc(rc, 0, rc, rc, math.pi, 2 * math.pi - th, h))
    # outer sclera, split at the posterior pole
    ph = math.atan2(yl, xl - xs)
    curves.append(_arc(xs, 0, rs, rs, ph, 0.0, h))
    curves.append(_arc(xs, 0, rs, rs, 0.0, -ph, h))
    # inner sclera from the vitreous interface around the back
    pv = math.atan2(yvt, xvh - xs)
    curves.append(_arc(xs, 0, rsi, rsi, pv, 0.0, h))
    curves.append(_arc(xs, 0, rsi, rsi, 0.0, -pv, h))
    # inner cornea: junction -> chamber angle (coarse), chamber wall (fine)
    tj = math.atan2(yi, xi - rc)
    tt = math.atan2(hh, xct - rc)
    for sgn in (1, -1):
        seg = _arc(rc, 0, rci, rci, tj, tt, h)
        seg[:, 1] *= sgn
        curves.append(seg)
    curves.append(_arc(rc, 0, rci, rci, tt, math.pi, hf))
    curves.append(_arc(rc, 0, rci, rci, math.pi, 2 * math.pi - tt, hf))
    # lens: front (fine, faces the chambers) and back (coarse, faces the vitreous)
    ts = math.atan2(ys / b, (xvh - xlc) / a)
    curves.append(_arc(xlc, 0, a, b, ts, math.pi, hf))
    curves.append(_arc(xlc, 0, a, b, math.pi, 2 * math.pi - ts, hf))
    curves.append(_arc(xlc, 0, a, b, ts, 0.0, h))
    curves.append(_arc(xlc, 0, a, b, 0.0, -ts, h))
    for sgn in (1, -1):
        def pt(x, y):
            return (x, sgn * y)
        curves.append(_line(pt(xl, yl), pt(xi, yi), hf))  # limbus
        curves.append(_line(pt(xct, hh), pt(xif, hh), hf))  # chamber angle wall
        curves.append(_line(pt(xif, hp), pt(xif, hh), hf))  # iris front
        curves.append(_line(pt(xif, hp), pt(xib, hp), hf))  # pupil margin
        curves.append(_line(pt(xib, hp), pt(xib, hh), hf))  # iris back
        curves.append(_line(pt(xif, hh), pt(xib, hh), hf))  # iris root
        curves.append(_line(pt(xib, hh), pt(xvh, hh), hf))  # posterior chamber roof
        curves.append(_line(pt(xvh, ys), pt(xvh, hh), hf))  # chamber / vitreous
        curves.append(_line(pt(xvh, hh), pt(xvh, yvt), h))  # ciliary block / vitreous
    return curves


def _seeds(g, lay, scale):
    hh, hp = lay.half_height, lay.half_pupil
    s = [
        (RegionTag.CORNEA, 0.5 * g.cornea_thickness, 0.0),
        (RegionTag.AQUEOUS_HUMOR, g.cornea_thickness + 0.5 * g.chamber_depth, 0.0),
        (RegionTag.LENS, lay.x_lens, 0.0),
        (RegionTag.VITREOUS, lay.sclera_center + 0.5 * (g.sclera_radius - g.shell_thickness), 0.0),
    ]
    for sgn in (1, -1):
        s.append((RegionTag.IRIS, 0.5 * (lay.x_iris_front + lay.x_iris_back), sgn * 0.5 * (hh + hp)))
        s.append((RegionTag.OUTER_SHELL, lay.sclera_center, sgn * (g.sclera_radius - 0.5 * g.shell_thickness)))
    return [(tag, x * scale, y * scale) for tag, x, y in s]


def generate_eye_cross_section(params=None):
    """Mesh the parametric eye cut; returns a validated 2D :class:`Mesh` in meters."""
    g = params or EyeGeometry()
    lay = g.layout()
    scale = 1.0 / g.h  # work in units of the target element size
    pslg = _Pslg(tol=1e-9)
    for c in _polylines(g, lay, scale):
        pslg.add(c)
    area = math.sqrt(3) / 4.0
    area_fine = area * g.ah_refinement ** 2
    regions = []
    for tag, x, y in _seeds(g, lay, scale):
        regions.append([x, y, float(tag), area_fine if tag == RegionTag.AQUEOUS_HUMOR else area])
    data = dict(vertices=np.asarray(pslg.points), segments=np.asarray(pslg.segments, dtype=np.int32),
                regions=np.asarray(regions))
    out = triangle.triangulate(data, "pq28Aa")
    if "triangle_attributes" not in out:
        raise MeshError("mesher failed: no regional attributes in output")
    verts = out["vertices"] / scale
    cells = out["triangles"].astype(np.int64)
    region = np.rint(out["triangle_attributes"][:, 0]).astype(np.int64)
    if np.any(region == 0):
        raise MeshError("mesher failed: cells outside every seeded region")
    bare = Mesh(verts, cells, region, np.zeros((0, 2), np.int64), [])
    facets, tags = _classify_facets(bare, lay)
    mesh = Mesh(verts, cells, region, facets, tags)
    problems = mesh_validate(mesh)
    if problems:
        raise MeshError("mesher failed to reach conformity: " + "; ".join(problems[:3]))
    return mesh


def _classify_facets(mesh, lay):
    uniq, nb = mesh.all_facets, mesh.facet_neighbours
    facets, tags = [], []
    ah = int(RegionTag.AQUEOUS_HUMOR)
    for f, (a, b) in zip(uniq, nb):
        if b < 0:
            xm = mesh.vertices[f, 0].mean()
            tags.append(int(BoundaryTag.GAMMA_AMB if xm <= lay.x_amb_limit else BoundaryTag.GAMMA_BODY))
            facets.append(f)
            continue
        ra, rb = int(mesh.cell_region[a]), int(mesh.cell_region[b])
        if (ra == ah) != (rb == ah):
            other = rb if ra == ah else ra
            tags.append(int(WALL_TAG_BY_NEIGHBOUR[RegionTag(other)]))
            facets.append(f)
    return np.asarray(facets, dtype=np.int64).reshape(-1, 2), np.asarray(tags, dtype=np.int64)


def _segment_area(r, d):
    """Area of the smaller circular segment cut by a chord at distance d from the centre."""
    d = abs(d)
    return r * r * math.acos(d / r) - d * math.sqrt(r * r - d * d)


def eye_area(params=None):
    """Exact area of the eye cut bounded by the two outer circles."""
    g = params or EyeGeometry()
    lay = g.layout()
    cornea = _segment_area(g.cornea_radius, g.cornea_radius - lay.x_limbus)
    sclera = math.pi * g.sclera_radius ** 2 - _segment_area(g.sclera_radius, lay.sclera_center - lay.x_limbus)
    return cornea + sclera


def structured_square(n, length=1.0, diagonal="right"):
    """Unit-square style triangulation with ``n`` cells per side, all aqueous humor.

    Boundary tags: x = 0 is GAMMA_BODY, x = L is GAMMA_AMB, y = 0 and y = L are
    GAMMA_SC. ``diagonal='cross'`` alternates diagonals (union-jack pattern).
    """
    xs = np.linspace(0.0, length, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            flip = diagonal == "cross" and (i + j) % 2 == 1
            if flip:
                cells += [(a, b, d), (b, c, d)]
            else:
                cells += [(a, b, c), (a, c, d)]
    facets, tags = [], []
    for k in range(n):
        facets.append((vid(0, k), vid(0, k + 1)))
        tags.append(BoundaryTag.GAMMA_BODY)
        facets.append((vid(n, k), vid(n, k + 1)))
        tags.append(BoundaryTag.GAMMA_AMB)
        facets.append((vid(k, 0), vid(k + 1, 0)))
        tags.append(BoundaryTag.GAMMA_SC)
        facets.append((vid(k, n), vid(k + 1, n)))
        tags.append(BoundaryTag.GAMMA_SC)
    return Mesh(verts, np.asarray(cells), np.full(len(cells), int(RegionTag.AQUEOUS_HUMOR)),
                np.asarray(facets), np.asarray(tags, dtype=np.int64))
