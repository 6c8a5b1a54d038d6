import numpy as np
import pytest

from rmioc import harness as hz
from rmioc.dynamics import ARM_FEATURES, ARM_WEIGHTS, ARM_X_GOAL, ARM_X_START, arm_system, quadratic_feature_library
from rmioc.forward import FixedEndpointOcp, SolverOptions, lqr_features, reference_lqr_problem, solve_fixed_endpoint, solve_lqr

# (criterion, ok, detail) lines collected by the acceptance module
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def lqr():
    p = reference_lqr_problem()
    return p, solve_lqr(p), p.system, lqr_features()


@pytest.fixture(scope="session")
def arm_solution():
    sysd = arm_system(hz.DESK_DT)
    feats = quadratic_feature_library(ARM_FEATURES, 4, 2)
    ocp = FixedEndpointOcp(sysd, feats, ARM_WEIGHTS, ARM_X_START, ARM_X_GOAL, hz.DESK_T)
    return ocp, solve_fixed_endpoint(ocp, SolverOptions())


@pytest.fixture(scope="session")
def arm(arm_solution):
    ocp, res = arm_solution
    return res.trajectory, ocp.system, ocp.features


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, text in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {text}")
