import pytest

from coupled_fbsde.hjb import GridSpec
from coupled_fbsde.policy import extract_policy

from _support import solved

# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def grid():
    return GridSpec.box()


@pytest.fixture(scope="session")
def linear_field():
    return solved("uncontrolled-linear")


@pytest.fixture(scope="session")
def b1_field():
    return solved("B1")


@pytest.fixture(scope="session")
def b2_field():
    return solved("B2")


@pytest.fixture(scope="session")
def b2_policy(b2_field):
    spec, coeffs, fld = b2_field
    return extract_policy(fld, coeffs, spec.controls)


@pytest.fixture(scope="session")
def b1_policy(b1_field):
    spec, coeffs, fld = b1_field
    return extract_policy(fld, coeffs, spec.controls)
