"""Scenario configuration and the mesh -> assemble -> solve -> postprocess pipeline."""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources

import numpy as np

from . import assembly
from .coupled import POSTURES, CoupledProblem, NewtonOptions, PhysicalParams, make_spaces, solve_newton
from .exceptions import ConfigError, EyeflowError, StageError
from .geometry import EyeGeometry, generate_eye_cross_section
from .linsolve import PreconditionerOptions, dump_matrix_market
from .mesh import RegionTag, read_mesh, region_name
from .postproc import FieldOutput, probe_line, write_csv, write_vtk

log = logging.getLogger("eyeflow")

SECTIONS = ("physics", "geometry", "solver", "output")

# config key -> (PhysicalParams field, default); None means required when the region is meshed
PHYSICS_KEYS = {
    "mu": 1e-3, "rho": 1000.0, "cp": 4178.0, "beta": 3e-4, "g": 9.81, "t_ref": 298.0,
    "h_bl": 65.0, "h_amb": 10.0, "h_r": 6.0, "e": 40.0, "t_bl": 310.0, "t_amb": 307.0,
}
CONDUCTIVITY_KEYS = {
    "k_ah": (RegionTag.AQUEOUS_HUMOR, 0.576),
    "k_cornea": (RegionTag.CORNEA, None),
    "k_iris": (RegionTag.IRIS, None),
    "k_lens": (RegionTag.LENS, None),
    "k_vitreous": (RegionTag.VITREOUS, None),
    "k_outershell": (RegionTag.OUTER_SHELL, None),
}
_FIELD = {"t_ref": "T_ref", "t_bl": "T_bl", "t_amb": "T_amb", "e": "E"}
POSITIVE = {"mu", "rho", "cp"}
NON_NEGATIVE = {"beta", "g", "h_bl", "h_amb", "h_r"}


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-8
    atol: float = 1e-12
    max_iter: int = 25
    max_halvings: int = 8
    linear_solver: str = "gmres"
    linear_rtol: float = 1e-10
    restart: int = 100
    max_linear_iter: int = 500
    schur: str = "pcd"
    inner: str = "ilu"
    inner_tol: float = 1e-2
    inner_maxiter: int = 30
    continuation: bool = False
    ambient_reference: str = "t_amb"
    threads: int = 1

    def newton_options(self, log_file=None):
        return NewtonOptions(
            rtol=self.rtol, atol=self.atol, max_iter=self.max_iter, max_halvings=self.max_halvings,
            linear_solver=self.linear_solver, linear_rtol=self.linear_rtol, restart=self.restart,
            max_linear_iter=self.max_linear_iter, continuation=self.continuation, log_file=log_file,
            precond=PreconditionerOptions(schur=self.schur, inner=self.inner, inner_tol=self.inner_tol,
                                          inner_maxiter=self.inner_maxiter, inner_restart=self.inner_maxiter),
        )


_CHOICES = {
    "linear_solver": ("gmres", "direct"),
    "schur": ("pcd", "mass"),
    "inner": ("ilu", "asm"),
    "ambient_reference": ("t_amb", "t_bl_verbatim"),
    "display_gauge": ("max", "mean"),
    "posture": POSTURES,
}


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    vtk: bool = True
    refine_vtk: bool = False
    probes: tuple = ("axis",)
    probe_samples: int = 101
    display_offset_mmhg: float = 15.5
    display_gauge: str = "max"


@dataclass(frozen=True)
class ScenarioConfig:
    physics: dict = field(default_factory=dict)
    posture: str = "standing"
    geometry: EyeGeometry | None = field(default_factory=EyeGeometry)
    mesh_path: str | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if (self.geometry is None) == (self.mesh_path is None):
            raise ConfigError("exactly one of geometry parameters or a mesh path must be set")
        if self.posture not in POSTURES:
            raise ConfigError(f"posture: unknown value {self.posture!r}")

    def params(self):
        """PhysicalParams for the configured posture."""
        phys = {**PHYSICS_KEYS, **{k: v for k, v in self.physics.items() if k in PHYSICS_KEYS}}
        k = {region: self.physics.get(key, default) for key, (region, default) in CONDUCTIVITY_KEYS.items()}
        kw = {_FIELD.get(key, key): float(v) for key, v in phys.items()}
        return PhysicalParams(k=k, **kw).with_posture(self.posture)

    def with_(self, **kw):
        return replace(self, **kw)


def _line_of(text, section, key):
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip().lower()
        elif current == section and "=" in s and s.split("=", 1)[0].strip().lower() == key:
            return n
    return 0


def _convert(kind, raw, where):
    try:
        if kind is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            v = float(raw)
            if not np.isfinite(v):
                raise ValueError(raw)
            return v
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw.strip()!r} as {kind.__name__}") from None


def load_config(text):
    """Parse config text (flat ``key = value`` sections, ``#`` comments, SI units)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                   interpolation=None, empty_lines_in_values=False)
    cp.optionxform = str.lower
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        raise ConfigError(f"line {line}: {msg}" if line else msg) from None
    for sec in cp.sections():
        if sec.lower() not in SECTIONS:
            raise ConfigError(f"line {_section_line(text, sec)}: unknown section [{sec}]")

    def items(sec):
        return cp.items(sec) if cp.has_section(sec) else []

    def where(sec, key):
        return f"line {_line_of(text, sec, key)}: {key}"

    physics = {}
    posture = "standing"
    for key, raw in items("physics"):
        if key == "posture":
            posture = _choice("posture", raw, where("physics", key))
        elif key in PHYSICS_KEYS or key in CONDUCTIVITY_KEYS:
            v = _convert(float, raw, where("physics", key))
            if (key in POSITIVE or key in CONDUCTIVITY_KEYS) and not v > 0:
                raise ConfigError(f"{where('physics', key)} must be > 0 (got {v!r})")
            if key in NON_NEGATIVE and v < 0:
                raise ConfigError(f"{where('physics', key)} must be >= 0 (got {v!r})")
            physics[key] = v
        else:
            raise ConfigError(f"{where('physics', key)}: unknown key")

    geo = {}
    mesh_path = None
    gfields = {f.name: f for f in fields(EyeGeometry)}
    for key, raw in items("geometry"):
        if key == "mesh":
            mesh_path = raw.strip()
        elif key in gfields:
            geo[key] = _convert(float, raw, where("geometry", key))
        else:
            raise ConfigError(f"{where('geometry', key)}: unknown key")
    if mesh_path is not None and geo:
        raise ConfigError("[geometry] sets both a mesh path and geometry parameters")
    geometry = None if mesh_path is not None else EyeGeometry(**geo)

    solver = _section_dataclass(SolverConfig, items("solver"), lambda k: where("solver", k))
    output = _section_dataclass(OutputConfig, items("output"), lambda k: where("output", k))
    try:
        cfg = ScenarioConfig(physics=physics, posture=posture, geometry=geometry, mesh_path=mesh_path,
                             solver=solver, output=output)
        cfg.params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _section_line(text, sec):
    for n, line in enumerate(text.splitlines(), 1):
        if line.strip().lower().startswith(f"[{sec.lower()}"):
            return n
    return 0


def _choice(key, raw, where):
    v = raw.strip().lower()
    if v not in _CHOICES[key]:
        raise ConfigError(f"{where}: expected one of {', '.join(_CHOICES[key])}, got {raw.strip()!r}")
    return v


def _section_dataclass(cls, pairs, where):
    kinds = {f.name: f.type for f in fields(cls)}
    kw = {}
    for key, raw in pairs:
        if key not in kinds:
            raise ConfigError(f"{where(key)}: unknown key")
        kind = kinds[key]
        if key in _CHOICES:
            kw[key] = _choice(key, raw, where(key))
        elif key == "probes":
            kw[key] = tuple(p.strip() for p in raw.split(";") if p.strip())
            for p in kw[key]:
                if p != "axis" and len(p.split()) != 4:
                    raise ConfigError(f"{where(key)}: probe must be 'axis' or 'x0 y0 x1 y1'")
        else:
            t = {"float": float, "int": int, "bool": bool, "str": str}[kind]
            kw[key] = _convert(t, raw, where(key))
            if t in (int, float) and key not in ("display_offset_mmhg",) and kw[key] < 0:
                raise ConfigError(f"{where(key)} must be >= 0")
    return cls(**kw)


def dump_config(cfg):
    """Serialize a ScenarioConfig; ``load_config(dump_config(c)) == c``."""
    out = ["[physics]", f"posture = {cfg.posture}"]
    for key in list(PHYSICS_KEYS) + list(CONDUCTIVITY_KEYS):
        if key in cfg.physics:
            out.append(f"{key} = {cfg.physics[key]!r}")
    out.append("")
    out.append("[geometry]")
    if cfg.mesh_path is not None:
        out.append(f"mesh = {cfg.mesh_path}")
    else:
        for k, v in cfg.geometry.as_dict().items():
            out.append(f"{k} = {v!r}")
    for name, obj in (("solver", cfg.solver), ("output", cfg.output)):
        out.append("")
        out.append(f"[{name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = "; ".join(v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


def read_config(path):
    with open(path) as fh:
        return load_config(fh.read())


def example_config_text():
    """The shipped example config (published parameter values plus marked placeholder conductivities)."""
    return resources.files("eyeflow").joinpath("data", "eye_default.cfg").read_text()


# --------------------------------------------------------------------------
# pipeline

def _stage(name, func, *args, **kw):
    try:
        return func(*args, **kw)
    except StageError:
        raise
    except (EyeflowError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def build_mesh(cfg):
    if cfg.mesh_path is not None:
        return read_mesh(cfg.mesh_path)
    return generate_eye_cross_section(cfg.geometry)


def _check_conductivities(mesh, params):
    missing = []
    for r in np.unique(mesh.cell_region):
        if params.k.get(int(r)) is None:
            missing.append(region_name(int(r)))
    if missing:
        keys = ", ".join(f"k_{m}" for m in missing)
        raise ConfigError(f"missing conductivity for region(s) {', '.join(missing)}: set {keys} in [physics]")


def axis_probe(mesh):
    """Pupillary axis (y = 0) from the posterior pole to the corneal apex, slightly inset."""
    x = mesh.vertices[:, 0]
    x0, x1 = x.min(), x.max()
    inset = 1e-6 * (x1 - x0)
    return (x1 - inset, 0.0), (x0 + inset, 0.0)


def run_scenario(cfg, posture=None, mesh=None, out_dir=None, dump_matrices=False, threads=None, write=True):
    """Run the full pipeline; returns a FieldOutput (``.converged`` reflects Newton)."""
    if posture is not None:
        cfg = cfg.with_(posture=posture)
    if mesh is not None and isinstance(mesh, str):
        cfg = cfg.with_(mesh_path=mesh, geometry=None)
        mesh = None
    nthreads = threads if threads is not None else cfg.solver.threads
    previous = assembly.get_num_threads()
    assembly.set_num_threads(nthreads)
    try:
        return _run(cfg, mesh, out_dir, dump_matrices, write)
    finally:
        assembly.set_num_threads(previous)


def _run(cfg, mesh, out_dir, dump_matrices, write):
    params = _stage("config", cfg.params)
    if mesh is None:
        mesh = _stage("mesh", build_mesh, cfg)
    _stage("config", _check_conductivities, mesh, params)
    out_dir = out_dir or cfg.output.directory
    if write:
        os.makedirs(out_dir, exist_ok=True)
    log_file = os.path.join(out_dir, "newton.log") if write else None
    if log_file and os.path.exists(log_file):
        os.remove(log_file)

    def assemble():
        spaces = make_spaces(mesh)
        problem = CoupledProblem(params, spaces, ambient_reference=cfg.solver.ambient_reference)
        return spaces, problem

    spaces, problem = _stage("assemble", assemble)
    x0 = _stage("solve", problem.initial_guess)
    state, report = _stage("solve", solve_newton, x0, problem, cfg.solver.newton_options(log_file))
    if dump_matrices and write:
        _stage("output", dump_matrix_market, problem.jacobian(state.data).matrix,
               os.path.join(out_dir, "jacobian.mtx"), "Newton Jacobian at the final iterate")
    out = _stage("postprocess", FieldOutput, state, spaces, mesh, params, report,
                 cfg.output.display_offset_mmhg, cfg.output.display_gauge)
    out.problem = problem
    if write:
        _stage("output", write_outputs, out, cfg, out_dir)
    return out


def probe_segments(cfg, mesh):
    segs = []
    for i, p in enumerate(cfg.output.probes):
        if p == "axis":
            segs.append(("axis", *axis_probe(mesh)))
        else:
            x0, y0, x1, y1 = (float(v) for v in p.split())
            segs.append((f"probe{i}", (x0, y0), (x1, y1)))
    return segs


def metrics_text(out):
    m = out.metrics
    lines = [f"converged = {out.converged}"]
    if out.report is not None:
        lines.append(f"newton_iterations = {out.report.iterations}")
    for key in ("max_u", "T_min", "T_max", "p_min_pa", "p_max_pa", "p_min_mmhg", "p_max_mmhg", "p_span_mmhg",
                "recirculation"):
        lines.append(f"{key} = {m[key]!r}")
    for e in m["psi_extrema"]:
        lines.append(f"psi_extremum = {e[0]!r} {e[1]!r} {e[2]!r}")
    for s in m["wall_samples"]:
        lines.append(f"wall_sample = {s['side']} {s['x']!r} {s['y']!r} {s['u_y']!r}")
    return "\n".join(lines) + "\n"


def write_outputs(out, cfg, out_dir):
    if cfg.output.vtk:
        write_vtk(out, os.path.join(out_dir, "solution.vtk"), refine=cfg.output.refine_vtk)
    for name, a, b in probe_segments(cfg, out.mesh):
        write_csv(probe_line(out, a, b, cfg.output.probe_samples), os.path.join(out_dir, f"{name}.csv"))
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(metrics_text(out))
    if out.report is not None:
        with open(os.path.join(out_dir, "convergence.txt"), "w") as fh:
            fh.write("\n".join(out.report.lines()) + "\n")
