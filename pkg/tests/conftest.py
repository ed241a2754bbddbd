import numpy as np
import pytest

from nelsonvc import opcore as oc

# acceptance lines, echoed in the terminal summary so they survive capture
ACCEPTANCE_LINES = []


def variable_coeffs(dim=1):
    """Smooth variable coefficients used throughout the 1d tests."""
    return oc.CoefficientSet(
        a=oc.MatrixField.scalar(1.0, dim, oc.ScalarField.sinusoid(1.0, 0.3, 1.0)),
        v=oc.ScalarField.constant(0.0),
        m=oc.ScalarField.constant(1.0),
        A=oc.MatrixField.scalar(1.0, dim, oc.ScalarField.sinusoid(1.0, 0.2, 1.0)),
        W=oc.ScalarField.sinusoid(1.0, -1.0, 1.0, np.pi / 2),
    )


@pytest.fixture(scope="session")
def const_ops():
    pg = oc.build_grid(1, 16, 2 * np.pi)
    bg = oc.build_grid(1, 64, 2 * np.pi)
    return oc.build_operators(pg, bg, oc.CoefficientSet.constant(1), sigma=0.5)


@pytest.fixture(scope="session")
def var_ops():
    pg = oc.build_grid(1, 16, 2 * np.pi)
    bg = oc.build_grid(1, 32, 2 * np.pi)
    return oc.build_operators(pg, bg, variable_coeffs(), sigma=0.5)


@pytest.fixture(scope="session")
def density_1d():
    return oc.make_density("gaussian", 1.0, 2 * np.pi / 16, dim=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
