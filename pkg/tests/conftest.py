import numpy as np
import pytest

from eyeflow.coupled import CoupledProblem, NewtonOptions, PhysicalParams, make_spaces, solve_newton
from eyeflow.geometry import EyeGeometry, generate_eye_cross_section, structured_square
from eyeflow.mesh import RegionTag
from eyeflow.scenario import load_config, run_scenario

# placeholder conductivities for the non-aqueous regions (same as the shipped example config)
K_REGIONS = {
    RegionTag.CORNEA: 0.58,
    RegionTag.AQUEOUS_HUMOR: 0.576,
    RegionTag.IRIS: 1.0042,
    RegionTag.LENS: 0.40,
    RegionTag.VITREOUS: 0.603,
    RegionTag.OUTER_SHELL: 1.0042,
}

CONFIG_K = """
[physics]
k_cornea = 0.58
k_iris = 1.0042
k_lens = 0.40
k_vitreous = 0.603
k_outershell = 1.0042
"""


def two_triangle_square():
    return structured_square(1)


@pytest.fixture(scope="session")
def coarse_eye():
    """Eye cross-section at h = 0.8 mm (fast tests)."""
    return generate_eye_cross_section(EyeGeometry(h=0.0008))


@pytest.fixture(scope="session")
def desk_eye():
    """Eye cross-section at the default h = 0.4 mm."""
    return generate_eye_cross_section(EyeGeometry())


@pytest.fixture(scope="session")
def params():
    return PhysicalParams(k=K_REGIONS)


def solve_eye(mesh, params, **opts):
    spaces = make_spaces(mesh)
    problem = CoupledProblem(params, spaces)
    state, rep = solve_newton(problem.initial_guess(), problem, NewtonOptions(**opts))
    return problem, state, rep


@pytest.fixture(scope="session")
def coarse_standing(coarse_eye, params):
    return solve_eye(coarse_eye, params, linear_solver="direct")


class ScenarioCache:
    """Default desk scenarios, solved once per session with the block-preconditioned Newton-Krylov solver."""

    def __init__(self, tmp_root):
        self.tmp_root = tmp_root
        self._out = {}
        self.cfg = load_config(CONFIG_K)

    def get(self, posture):
        if posture not in self._out:
            d = self.tmp_root / posture
            self._out[posture] = run_scenario(self.cfg, posture=posture, out_dir=str(d))
        return self._out[posture]


@pytest.fixture(scope="session")
def scenarios(tmp_path_factory):
    return ScenarioCache(tmp_path_factory.mktemp("scenarios"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

@pytest.fixture
def criterion(request):
    """``record(number, title, ok, detail)``: prints a pass/fail line and keeps it for the summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number, title, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
