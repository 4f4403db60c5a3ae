import pytest

from dyadgrid.cubes import build_system
from dyadgrid.haar import make_haar
from dyadgrid.model import make_model


@pytest.fixture(scope="session")
def sup1():
    """TorusSup, k=1, depth 10."""
    return build_system(make_model("TorusSup", 1, 10))


@pytest.fixture(scope="session")
def sup1_deep():
    """TorusSup, k=1, depth 12."""
    return build_system(make_model("TorusSup", 1, 12))


@pytest.fixture(scope="session")
def sup2():
    """TorusSup, k=2, depth 5."""
    return build_system(make_model("TorusSup", 2, 5))


@pytest.fixture(scope="session")
def sq1():
    """TorusSquared, depth 8."""
    return build_system(make_model("TorusSquared", 1, 8))


@pytest.fixture(scope="session")
def haar1(sup1):
    return make_haar(sup1)


@pytest.fixture(scope="session")
def haar1_deep(sup1_deep):
    return make_haar(sup1_deep)


@pytest.fixture(scope="session")
def haar2(sup2):
    return make_haar(sup2)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
