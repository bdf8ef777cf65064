import sys

import numpy as np
import pytest

from stacklq.filtering_sim import closed_loop_system
from stacklq.game_model import GENERIC_CID, CidSpec, TimeGrid
from stacklq.riccati_solvers import solve_cid


def cid(**overrides) -> CidSpec:
    """Generic scalar game with some fields replaced."""
    fields = dict(GENERIC_CID.__dict__)
    fields.update(overrides)
    return CidSpec(**fields)


@pytest.fixture(scope="session")
def grid100():
    return TimeGrid(1.0, 100)


@pytest.fixture(scope="session")
def generic_leader(grid100):
    return solve_cid(GENERIC_CID, grid100)


@pytest.fixture(scope="session")
def generic_system(generic_leader):
    return closed_loop_system(GENERIC_CID, generic_leader)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
