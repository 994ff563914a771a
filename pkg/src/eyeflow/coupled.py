"""Monolithic Boussinesq flow + conjugate heat transfer: residual, Jacobian, Newton.

State layout: ``[u (component-blocked P2 on AH), p (P1 on AH), T (P2 on all), lambda]``
where ``lambda`` is the Lagrange multiplier of the mean-zero pressure gauge.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly as asm
from .exceptions import SolverError
from .femspace import build_dof_map
from .linsolve import BlockSystem, PreconditionerOptions, build_block_preconditioner, gmres
from .mesh import NO_SLIP_TAGS, BoundaryTag, RegionTag, region_code

log = logging.getLogger("eyeflow.newton")

POSTURES = ("standing", "prone", "supine")


def posture_gravity(posture, g=9.81, dim=2):
    """Gravity vector for a posture; x is the optical (anterior-posterior) axis, y vertical when standing."""
    if g < 0:
        raise ValueError("gravity magnitude must be >= 0")
    vec = {"standing": [0.0, -g, 0.0], "prone": [-g, 0.0, 0.0], "supine": [g, 0.0, 0.0]}
    if posture not in vec:
        raise ValueError(f"unknown posture {posture!r}; expected one of {POSTURES}")
    return np.array(vec[posture][:dim]) + 0.0


@dataclass(frozen=True)
class PhysicalParams:
    mu: float = 1e-3
    rho: float = 1000.0
    cp: float = 4178.0
    beta: float = 3e-4
    k: dict = field(default_factory=lambda: {RegionTag.AQUEOUS_HUMOR: 0.576})
    g: float = 9.81
    T_ref: float = 298.0
    h_bl: float = 65.0
    h_amb: float = 10.0
    h_r: float = 6.0
    E: float = 40.0
    T_bl: float = 310.0
    T_amb: float = 307.0
    gravity_dir: tuple = (0.0, -1.0)

    def __post_init__(self):
        for name in ("mu", "rho", "cp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("beta", "h_bl", "h_amb", "h_r", "g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        k = {region_code(r): (None if v is None else float(v)) for r, v in dict(self.k).items()}
        for r, v in k.items():
            if v is not None and not v > 0:
                raise ValueError(f"conductivity of region {r} must be > 0")
        object.__setattr__(self, "k", k)
        d = np.asarray(self.gravity_dir, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            d = np.array([0.0, -1.0])
        elif abs(n - 1.0) > 1e-12:
            raise ValueError("gravity direction must be a unit vector")
        object.__setattr__(self, "gravity_dir", tuple(d))

    @property
    def gravity(self):
        return self.g * np.asarray(self.gravity_dir)

    def with_posture(self, posture):
        g = posture_gravity(posture, 1.0)
        return replace(self, gravity_dir=tuple(g))

    def with_(self, **kw):
        return replace(self, **kw)


class Spaces(NamedTuple):
    u: object
    p: object
    T: object


def make_spaces(mesh):
    """Taylor-Hood P2/P1 on the aqueous humor, P2 temperature on the whole domain."""
    return Spaces(
        build_dof_map(mesh, "vector", 2, support="ah"),
        build_dof_map(mesh, "scalar", 1, support="ah"),
        build_dof_map(mesh, "scalar", 2),
    )


def eye_robin(params, ambient_reference="t_amb"):
    """Robin data ``(tags, h, T_ext, flux_offset)`` of the body and ambient boundaries."""
    if ambient_reference not in ("t_amb", "t_bl_verbatim"):
        raise ValueError(f"ambient_reference must be t_amb or t_bl_verbatim, got {ambient_reference!r}")
    t_ext = params.T_amb if ambient_reference == "t_amb" else params.T_bl
    return [
        ([BoundaryTag.GAMMA_BODY], params.h_bl, params.T_bl, 0.0),
        ([BoundaryTag.GAMMA_AMB], params.h_amb + params.h_r, t_ext, params.E),
    ]


class StateVector:
    """Monolithic coefficient vector with views of its blocks."""

    def __init__(self, data, spaces):
        self.spaces = spaces
        self.data = np.asarray(data, dtype=float)
        nu, np_, nt = spaces.u.n_dofs, spaces.p.n_dofs, spaces.T.n_dofs
        if self.data.shape != (nu + np_ + nt + 1,):
            raise SolverError("state size does not match the spaces")
        self.su = slice(0, nu)
        self.sp = slice(nu, nu + np_)
        self.sT = slice(nu + np_, nu + np_ + nt)

    @property
    def u(self):
        return self.data[self.su]

    @property
    def p(self):
        return self.data[self.sp]

    @property
    def T(self):
        return self.data[self.sT]

    @property
    def lam(self):
        return self.data[-1]

    def copy(self):
        return StateVector(self.data.copy(), self.spaces)


class CoupledProblem:
    """Static operators plus residual/Jacobian evaluation for one parameter set.

    ``robin`` is a list of ``(tags, h, T_ext, flux_offset)``; ``f_u``/``f_T``
    are optional volumetric source callables; ``temperature_dirichlet`` is an
    optional ``(tags, value)`` pair.  The heat equation is evaluated on
    ``theta = T - T_shift`` to keep the residual free of the large absolute
    temperature.
    """

    def __init__(self, params, spaces, robin=None, velocity_tags=NO_SLIP_TAGS, temperature_dirichlet=None,
                 f_u=None, f_T=None, ambient_reference="t_amb", T_shift=None, convection=True,
                 velocity_value=0.0):
        self.params = params
        self.spaces = spaces
        su, sp_, sT = spaces
        self.n_u, self.n_p, self.n_T = su.n_dofs, sp_.n_dofs, sT.n_dofs
        self.n = self.n_u + self.n_p + self.n_T + 1
        self.iu = np.arange(self.n_u)
        self.ip = self.n_u + np.arange(self.n_p)
        self.iT = self.n_u + self.n_p + np.arange(self.n_T)
        self.ilam = np.array([self.n - 1])
        self.convection = convection
        self.robin = eye_robin(params, ambient_reference) if robin is None else robin
        self.T_shift = params.T_bl if T_shift is None else float(T_shift)
        mu, rho, cp = params.mu, params.rho, params.cp

        self.A, self.B = asm.assemble_stokes_blocks(su, sp_, mu)
        self.mp = np.asarray(asm.assemble_mass(sp_).sum(axis=1)).ravel()
        self.Kdiff = asm.assemble_diffusion(sT, params.k)
        Kr = sp.csr_matrix((self.n_T, self.n_T))
        g_theta = np.zeros(self.n_T)
        for tags, h, t_ext, q in self.robin:
            M, b = asm.apply_robin(sT, list(tags), h, t_ext - self.T_shift, q)
            Kr = Kr + M
            g_theta += b
        self.Krobin = Kr
        self.K = (self.Kdiff + Kr).tocsr()
        self.load_T = g_theta
        self.set_beta(params.beta)
        self.f_u = asm.assemble_load(su, f_u) if f_u is not None else np.zeros(self.n_u)
        if f_T is not None:
            self.load_T = self.load_T + asm.assemble_load(sT, f_T)

        self.dir_u = np.unique(np.concatenate([su.tagged_dofs([t]) for t in velocity_tags])) if velocity_tags else np.zeros(0, int)
        self.g_u = asm.dirichlet_values(su, self.dir_u, velocity_value)
        if temperature_dirichlet is not None:
            tags, value = temperature_dirichlet
            self.dir_T = sT.tagged_dofs(list(tags))
            self.g_T = asm.dirichlet_values(sT, self.dir_T, value)
        else:
            self.dir_T = np.zeros(0, dtype=np.int64)
            self.g_T = np.zeros(0)
        self.dirichlet = np.concatenate([self.iu[self.dir_u], self.iT[self.dir_T]]).astype(np.int64)
        self.dirichlet_values = np.concatenate([self.g_u, self.g_T])
        mask = np.zeros(self.n, dtype=bool)
        mask[self.dirichlet] = True
        self.free = sp.diags((~mask).astype(float))
        self.fixed = sp.diags(mask.astype(float))
        self.mask = mask
        # pressure operators for the PCD Schur approximation
        self.Mp = asm.assemble_mass(sp_)
        self.Ap = asm.assemble_diffusion(sp_)
        self.row_scale = None

    def set_beta(self, beta):
        p = self.params
        su, _, sT = self.spaces
        self.beta = beta
        self.C, _ = asm.assemble_buoyancy(su, sT, p.rho, beta, 0.0, p.gravity)

    # ------------------------------------------------------------------
    def split(self, x):
        x = np.asarray(x)
        return x[self.iu], x[self.ip], x[self.iT], x[-1]

    def enforce(self, x):
        x = np.array(x, dtype=float, copy=True)
        x[self.dirichlet] = self.dirichlet_values
        return x

    def _convection_T(self, u):
        su, _, sT = self.spaces
        return asm.assemble_convection(sT, su, u, self.params.rho * self.params.cp)

    def residual(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise SolverError("NaN in state")
        p = self.params
        u, pr, T, lam = self.split(x)
        theta = T - self.T_shift
        r_u = self.A @ u - self.B.T @ pr - self.C @ (T - p.T_ref) - self.f_u
        KT = self.K
        if self.convection:
            r_u = r_u + asm.assemble_vector_convection(self.spaces.u, u, p.rho) @ u
            KT = KT + self._convection_T(u)
        r_p = self.B @ u + self.mp * lam
        r_T = self._heat_rows(u, T, KT)
        r = np.concatenate([r_u, r_p, r_T, [self.mp @ pr]])
        r[self.dirichlet] = x[self.dirichlet] - self.dirichlet_values
        return r

    def _heat_rows(self, u, T, KT=None):
        if KT is None:
            KT = self.K + self._convection_T(u) if self.convection else self.K
        return KT @ (T - self.T_shift) - self.load_T

    def heat_residual(self, x):
        """Heat rows without Dirichlet replacement (reaction fluxes at constrained dofs)."""
        u, _, T, _ = self.split(x)
        return self._heat_rows(u, T)

    def jacobian(self, x):
        p = self.params
        su, sp_, sT = self.spaces
        u, pr, T, lam = self.split(x)
        F = self.A
        KT = self.K
        D = sp.csr_matrix((self.n_T, self.n_u))
        Np = None
        if self.convection:
            F = F + asm.assemble_vector_convection(su, u, p.rho) + asm.assemble_convection_reaction(su, u, p.rho)
            KT = KT + self._convection_T(u)
            D = asm.assemble_heat_velocity_coupling(sT, su, T, p.rho * p.cp)
            Np = asm.assemble_convection(sp_, su, u, 1.0)
        m = sp.csr_matrix(self.mp[:, None])
        J = sp.bmat([
            [F, -self.B.T, -self.C, None],
            [self.B, None, None, m],
            [D, None, KT, None],
            [None, m.T, None, None],
        ], format="csr")
        J = (self.free @ J @ self.free + self.fixed).tocsr()
        J.eliminate_zeros()
        J.sort_indices()
        aux = {"Mp": self.Mp, "Ap": self.Ap}
        if Np is not None:
            aux["Np"] = Np
        return BlockSystem(J, self.iu, self.ip, self.iT, self.ilam, aux)

    def initial_guess(self):
        """u = 0, p = 0, T from the linear heat problem with u = 0."""
        K = self.K
        b = self.load_T.copy()
        if len(self.dir_T):
            K, b = asm.constrain(K, b, self.dir_T, self.g_T - self.T_shift, symmetric=True)
        theta = spla.spsolve(sp.csc_matrix(K), b)
        if not np.all(np.isfinite(theta)):
            raise SolverError("heat solve failed")
        x = np.zeros(self.n)
        x[self.iT] = theta + self.T_shift
        return self.enforce(x)

    # ------------------------------------------------------------------
    def scaled_norm(self, r):
        if self.row_scale is None:
            return float(np.linalg.norm(r))
        return float(np.linalg.norm(r / self.row_scale))

    def set_row_scale(self, system):
        """Row scaling ``1 / max_j |J_ij|`` taken from a Jacobian, fixed for the whole solve."""
        J = abs(system.matrix).tocsr()
        s = J.max(axis=1).toarray().ravel()
        s[s == 0] = 1.0
        self.row_scale = s


@dataclass
class NewtonOptions:
    rtol: float = 1e-8
    atol: float = 1e-12
    stol: float = 1e-10
    max_iter: int = 25
    max_halvings: int = 8
    armijo: float = 1e-4
    linear_solver: str = "gmres"  # gmres | direct
    linear_rtol: float = 1e-10
    restart: int = 100
    max_linear_iter: int = 500
    precond: PreconditionerOptions = field(default_factory=PreconditionerOptions)
    continuation: bool = False
    continuation_steps: tuple = (0.25, 0.5, 1.0)
    scaled_norm: bool = True
    log_file: str | None = None


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    residuals: list
    halvings: list
    linear_iterations: list
    message: str = ""
    wall_time: float = 0.0
    continuation: list = field(default_factory=list)

    def quadratic_ratios(self):
        r = self.residuals
        return [r[k + 1] / r[k] ** 2 for k in range(len(r) - 1) if r[k] > 0]

    def lines(self):
        out = []
        for k, res in enumerate(self.residuals):
            hv = self.halvings[k - 1] if k else 0
            li = self.linear_iterations[k - 1] if k else 0
            out.append(f"newton {k:3d}  residual {res:.6e}  halvings {hv}  linear {li}")
        out.append(f"newton {'converged' if self.converged else 'NOT converged'} ({self.message})")
        return out


def newton(residual, solve, x0, norm=np.linalg.norm, rtol=1e-8, atol=1e-12, max_iter=25, max_halvings=8,
           armijo=1e-4, emit=None, stol=0.0):
    """Damped Newton with Armijo backtracking by halving.

    ``solve(x, r)`` returns ``(dx, linear_iterations)`` with ``J(x) dx = -r``.
    At least one step is taken.  A full step with ``|dx| <= stol |x|`` is
    taken without line search and ends the iteration (the residual is then at
    round-off).  Returns ``(x, report)``; on failure the best iterate is
    returned and the report is flagged.
    """
    x = np.array(x0, dtype=float, copy=True)
    r = residual(x)
    r0 = norm(r)
    rep = NewtonReport(False, 0, [r0], [], [])
    best = (r0, x.copy())
    emit = emit or (lambda s: None)
    emit(rep.lines()[0])
    target = rtol * r0 + atol
    for it in range(1, max_iter + 1):
        try:
            dx, lits = solve(x, r)
        except SolverError as exc:
            rep.message = f"linear solve failure: {exc}"
            break
        rn = norm(r)
        if stol > 0 and np.linalg.norm(dx) <= stol * np.linalg.norm(x):
            x = x + dx
            r = residual(x)
            rep.iterations = it
            rep.residuals.append(norm(r))
            rep.halvings.append(0)
            rep.linear_iterations.append(lits)
            emit(rep.lines()[it])
            rep.converged = True
            rep.message = f"step {np.linalg.norm(dx):.3e} <= stol * |x|"
            return x, rep
        t = 1.0
        for h in range(max_halvings + 1):
            xt = x + t * dx
            rt = residual(xt)
            rtn = norm(rt)
            if np.isfinite(rtn) and rtn <= (1.0 - armijo * t) * rn:
                break
            if rtn <= target:
                break
            t *= 0.5
        else:
            rep.halvings.append(max_halvings)
            rep.linear_iterations.append(lits)
            rep.iterations = it
            rep.message = "line search stagnation"
            if np.isfinite(rtn) and rtn < best[0]:
                best = (rtn, xt)
            break
        x, r = xt, rt
        rep.iterations = it
        rep.residuals.append(rtn)
        rep.halvings.append(h)
        rep.linear_iterations.append(lits)
        emit(rep.lines()[it])
        if rtn < best[0]:
            best = (rtn, x.copy())
        if rtn <= target:
            rep.converged = True
            rep.message = f"residual {rtn:.3e} <= {target:.3e}"
            return x, rep
    if not rep.message:
        rep.message = "maximum iterations reached"
    return best[1], rep


def _linear_solver(problem, opts):
    def solve(x, r):
        system = problem.jacobian(x)
        if opts.linear_solver == "direct":
            dx = spla.spsolve(sp.csc_matrix(system.matrix), -r)
            if not np.all(np.isfinite(dx)):
                raise SolverError("direct solve produced non-finite values")
            return dx, 1
        M = build_block_preconditioner(system, problem.params, opts.precond)
        res = gmres(system.matrix, -r, M, tol=opts.linear_rtol, restart=opts.restart, max_iter=opts.max_linear_iter)
        if not res.converged:
            rel = res.history[-1] / max(res.history[0], 1e-300)
            if not rel < 1e-4:
                raise SolverError(f"GMRES stalled at relative residual {rel:.2e} after {res.iterations} iterations")
        dx = res.x
        dx[problem.dirichlet] = 0.0
        return dx, res.iterations

    return solve


def _emitter(opts):
    fh = open(opts.log_file, "a") if opts.log_file else None

    def emit(line):
        log.info(line)
        if fh is not None:
            fh.write(line + "\n")
            fh.flush()

    return emit, fh


def solve_newton(initial, problem, opts=None):
    """Newton solve of ``problem`` from ``initial`` (a vector or StateVector)."""
    opts = opts or NewtonOptions()
    x0 = problem.enforce(initial.data if isinstance(initial, StateVector) else initial)
    if opts.scaled_norm:
        problem.set_row_scale(problem.jacobian(x0))
    else:
        problem.row_scale = None
    emit, fh = _emitter(opts)
    t0 = time.perf_counter()
    try:
        beta = problem.params.beta
        x, rep = _run(problem, x0, opts, emit)
        if not rep.converged and opts.continuation and beta > 0:
            emit("newton continuation in beta")
            stages = []
            x = x0
            for frac in opts.continuation_steps:
                problem.set_beta(frac * beta)
                x, rep = _run(problem, x, opts, emit)
                stages.append((frac, rep.iterations, rep.converged))
                if not rep.converged:
                    break
            problem.set_beta(beta)
            rep.continuation = stages
        emit(rep.lines()[-1])
    finally:
        if fh is not None:
            fh.close()
    rep.wall_time = time.perf_counter() - t0
    return StateVector(x, problem.spaces), rep


def _run(problem, x0, opts, emit):
    return newton(problem.residual, _linear_solver(problem, opts), x0, norm=problem.scaled_norm, rtol=opts.rtol,
                  atol=opts.atol, max_iter=opts.max_iter, max_halvings=opts.max_halvings, armijo=opts.armijo,
                  emit=emit, stol=opts.stol)


def initial_guess(problem):
    return StateVector(problem.initial_guess(), problem.spaces)


def residual(state, problem):
    return problem.residual(state.data if isinstance(state, StateVector) else state)


def jacobian(state, problem):
    return problem.jacobian(state.data if isinstance(state, StateVector) else state)
