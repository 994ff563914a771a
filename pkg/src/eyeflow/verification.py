"""Manufactured solutions, the buoyant cavity benchmark and hydrostatic checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import sympy

from . import assembly as asm
from .coupled import CoupledProblem, NewtonOptions, PhysicalParams, make_spaces, solve_newton
from .exceptions import SolverError
from .femspace import cell_geometry, quadrature_rule
from .geometry import structured_square
from .mesh import BoundaryTag, RegionTag
from .postproc import PA_PER_MMHG

SQUARE_WALLS = (BoundaryTag.GAMMA_BODY, BoundaryTag.GAMMA_AMB, BoundaryTag.GAMMA_SC)
CAVITY_REFERENCE = 1.118  # classical Ra = 1e3 value, only a sanity anchor


def l2_error(space, coeffs, exact, degree=6, subtract_mean=False):
    """L2 norm of ``u_h - exact`` over the support of ``space``."""
    q = quadrature_rule(space.dim, degree)
    vals, _ = space.at_quadrature(coeffs, q)
    geom = cell_geometry(space.mesh, space.cells)
    xq = geom.x0[:, None, :] + np.einsum("cij,qj->cqi", geom.jac, q.points)
    ex = np.asarray(exact(xq.reshape(-1, space.dim)), dtype=float).reshape(vals.shape)
    w = geom.det[:, None] * q.weights[None, :]
    diff = vals - ex
    if subtract_mean:
        diff = diff - (w[..., None] * diff).sum((0, 1)) / w.sum()
    return float(np.sqrt((w[..., None] * diff ** 2).sum()))


# --------------------------------------------------------------------------
# manufactured solutions

_x, _y = sympy.symbols("x y")


@dataclass
class MmsCase:
    """Closed-form fields with the forcing that makes them solve the coupled equations."""

    u: tuple
    p: object
    T: object
    params: PhysicalParams = field(default_factory=lambda: PhysicalParams(
        mu=1.0, rho=1.0, cp=1.0, beta=1.0, k={RegionTag.AQUEOUS_HUMOR: 1.0}, g=1.0, T_ref=0.0, T_bl=0.0))

    def __post_init__(self):
        self.u = tuple(sympy.sympify(c) for c in self.u)
        self.p = sympy.sympify(self.p)
        self.T = sympy.sympify(self.T)
        div = sympy.simplify(sympy.diff(self.u[0], _x) + sympy.diff(self.u[1], _y))
        if div != 0:
            raise ValueError("manufactured velocity must be divergence free")

    def forcing(self):
        """Return callables ``(f_u, f_T)`` of ``x`` with shape ``(n, 2)``."""
        P = self.params
        u, p, T = self.u, self.p, self.T
        gvec = P.gravity
        k = P.k[int(RegionTag.AQUEOUS_HUMOR)]
        fu = []
        for a in range(2):
            conv = u[0] * sympy.diff(u[a], _x) + u[1] * sympy.diff(u[a], _y)
            lap = sympy.diff(u[a], _x, 2) + sympy.diff(u[a], _y, 2)
            dp = sympy.diff(p, (_x, _y)[a])
            fu.append(P.rho * conv - P.mu * lap + dp + P.rho * P.beta * (T - P.T_ref) * float(gvec[a]))
        convT = u[0] * sympy.diff(T, _x) + u[1] * sympy.diff(T, _y)
        lapT = sympy.diff(T, _x, 2) + sympy.diff(T, _y, 2)
        fT = P.rho * P.cp * convT - k * lapT
        return _vector(fu), _scalar(fT)

    def exact(self):
        return _vector(self.u), _scalar(self.p), _scalar(self.T)


def _scalar(expr):
    f = sympy.lambdify((_x, _y), expr, "numpy")
    return lambda X: np.broadcast_to(np.asarray(f(X[:, 0], X[:, 1]), dtype=float), (len(X),)).copy()


def _vector(exprs):
    fs = [_scalar(e) for e in exprs]
    return lambda X: np.column_stack([f(X) for f in fs])


def default_mms_case():
    """Stream-function velocity, cosine pressure and a nonlinear temperature."""
    psi = sympy.sin(sympy.pi * _x) * sympy.sin(sympy.pi * _y)
    u = (sympy.diff(psi, _y), -sympy.diff(psi, _x))
    p = sympy.cos(sympy.pi * _x) * sympy.cos(sympy.pi * _y)
    T = sympy.exp(_y) * sympy.sin(sympy.pi * _x) + _x * _y ** 2
    return MmsCase(u, p, T)


def linear_temperature_case():
    case = default_mms_case()
    return MmsCase(case.u, case.p, _x + _y)


def zero_case():
    return MmsCase((0, 0), 0, 0)


def mms_problem(case, n, jitter=0.0, seed=0):
    mesh = structured_square(n)
    if jitter:
        mesh = jittered(mesh, jitter / n, seed)
    spaces = make_spaces(mesh)
    f_u, f_T = case.forcing()
    ue, pe, Te = case.exact()
    problem = CoupledProblem(case.params, spaces, robin=[], velocity_tags=SQUARE_WALLS,
                             temperature_dirichlet=(SQUARE_WALLS, Te), f_u=f_u, f_T=f_T, T_shift=0.0,
                             velocity_value=ue)
    return problem


def jittered(mesh, amplitude, seed=0):
    """Move interior vertices by a random offset of at most ``amplitude`` per coordinate."""
    from .mesh import Mesh

    rng = np.random.default_rng(seed)
    v = mesh.vertices.copy()
    bnd = np.unique(mesh.boundary_facets())
    inner = np.setdiff1d(np.arange(mesh.n_vertices), bnd)
    v[inner] += rng.uniform(-amplitude, amplitude, size=(len(inner), mesh.dim))
    return Mesh(v, mesh.cells, mesh.cell_region, mesh.facets, mesh.facet_tag)


def run_mms(case=None, levels=(8, 16, 32), solve=True, jitter=0.0, newton_opts=None):
    """L2 errors of ``u, p, T`` per level and observed orders between consecutive levels.

    With ``solve=False`` the exact fields are interpolated instead (the
    interpolation-error baseline).
    """
    case = case or default_mms_case()
    if len(levels) < 3:
        raise ValueError("at least three refinement levels are required")
    ue, pe, Te = case.exact()
    rows = []
    for n in levels:
        problem = mms_problem(case, n, jitter)
        su, sp_, sT = problem.spaces
        if solve:
            x0 = problem.initial_guess()
            opts = newton_opts or NewtonOptions(linear_solver="direct", scaled_norm=False)
            state, rep = solve_newton(x0, problem, opts)
            if not rep.converged:
                raise SolverError(f"MMS Newton failed at n = {n}: {rep.message}")
            u, p, T = state.u, state.p, state.T
            its = rep.iterations
        else:
            u, p, T = su.interpolate(ue), sp_.interpolate(pe), sT.interpolate(Te)
            its = 0
        rows.append({
            "n": n, "h": 1.0 / n,
            "u": l2_error(su, u, ue), "p": l2_error(sp_, p, pe, subtract_mean=True), "T": l2_error(sT, T, Te),
            "newton": its,
        })
    for a, b in zip(rows, rows[1:]):
        for f in ("u", "p", "T"):
            b[f"order_{f}"] = _order(a[f], b[f], a["h"], b["h"])
    return rows


def _order(ea, eb, ha, hb):
    if ea <= 0 or eb <= 0:
        return float("nan")
    return float(np.log(ea / eb) / np.log(ha / hb))


def format_table(rows, fields):
    head = "  ".join(f"{f:>12s}" for f in fields)
    lines = [head]
    for r in rows:
        cells = []
        for f in fields:
            v = r.get(f, float("nan"))
            cells.append(f"{v:12d}" if isinstance(v, (int, np.integer)) else f"{v:12.4e}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# differentially heated cavity

def cavity_params(rayleigh=1e3, prandtl=0.71):
    """Unit cavity, unit temperature difference: rho = cp = k = g = 1, mu = Pr, beta = Ra Pr."""
    return PhysicalParams(mu=prandtl, rho=1.0, cp=1.0, beta=rayleigh * prandtl, k={RegionTag.AQUEOUS_HUMOR: 1.0},
                          g=1.0, T_ref=0.5, T_bl=0.5)


def cavity_problem(n, rayleigh=1e3, prandtl=0.71):
    """Hot wall x = 0 (T = 1), cold wall x = 1 (T = 0), adiabatic top and bottom."""
    mesh = structured_square(n)
    spaces = make_spaces(mesh)
    params = cavity_params(rayleigh, prandtl)
    hot = spaces.T.tagged_dofs([BoundaryTag.GAMMA_BODY])
    cold = spaces.T.tagged_dofs([BoundaryTag.GAMMA_AMB])
    problem = CoupledProblem(params, spaces, robin=[], velocity_tags=SQUARE_WALLS,
                             temperature_dirichlet=([BoundaryTag.GAMMA_BODY, BoundaryTag.GAMMA_AMB],
                                                    lambda X: (X[:, 0] < 0.5).astype(float)),
                             T_shift=0.5)
    return problem, hot, cold


def wall_heat_flux(problem, state, dofs):
    """Consistent (reaction) heat flux into the domain through the wall carrying ``dofs``."""
    r = problem.heat_residual(state.data if hasattr(state, "data") else state)
    return float(r[dofs].sum())


def cavity_nusselt(n, rayleigh=1e3, prandtl=0.71, opts=None):
    problem, hot, cold = cavity_problem(n, rayleigh, prandtl)
    # hot and cold walls share no dofs on the unit square
    opts = opts or NewtonOptions(linear_solver="direct", continuation=True)
    state, rep = solve_newton(problem.initial_guess(), problem, opts)
    if not rep.converged:
        raise SolverError(f"cavity Newton diverged at Ra = {rayleigh:g}, n = {n}: {rep.message}")
    nu_hot = wall_heat_flux(problem, state, hot)
    nu_cold = -wall_heat_flux(problem, state, cold)
    return {"n": n, "nu_hot": nu_hot, "nu_cold": nu_cold, "newton": rep.iterations,
            "max_u": float(np.abs(state.u).max())}


def richardson(values, ratio=2.0):
    """Richardson extrapolation from the last three values of a sequence refined by ``ratio``."""
    a, b, c = values[-3:]
    d1, d2 = b - a, c - b
    if d1 == 0 or d2 == 0 or d1 * d2 < 0:
        return c, float("nan")
    p = np.log(abs(d1 / d2)) / np.log(ratio)
    return c + d2 / (ratio ** p - 1.0), float(p)


def run_cavity_benchmark(rayleigh=1e3, prandtl=0.71, mesh_sizes=(8, 16, 32)):
    rows = [cavity_nusselt(n, rayleigh, prandtl) for n in mesh_sizes]
    nu = [r["nu_hot"] for r in rows]
    extrapolated, order = richardson(nu) if len(nu) >= 3 else (nu[-1], float("nan"))
    return {"rows": rows, "extrapolated": extrapolated, "order": order, "reference": CAVITY_REFERENCE}


# --------------------------------------------------------------------------
# hydrostatics

def hydrostatic_head_mmhg(mesh, params):
    """``rho g H`` with ``H`` the extent of the flow region along gravity, in mmHg."""
    ah = mesh.vertices[np.unique(mesh.cells[mesh.region_cells(RegionTag.AQUEOUS_HUMOR)])]
    d = np.asarray(params.gravity_dir)
    proj = ah @ d
    H = float(proj.max() - proj.min()) if params.g > 0 else 0.0
    return params.rho * params.g * H / PA_PER_MMHG, H


def run_hydrostatic_check(output):
    """Compare the solved pressure span with ``rho g H`` along gravity."""
    head, H = hydrostatic_head_mmhg(output.mesh, output.params)
    span = output.metrics["p_span_mmhg"]
    ratio = span / head if head > 0 else float("nan")
    return {"span_mmhg": span, "rho_g_H_mmhg": head, "H_m": H, "ratio": ratio}
