import numpy as np
import pytest

from hjbcheck.core import (
    ControlProblem,
    interval_controls,
    state_slab,
    whole_space,
)
from hjbcheck.gallery import get_entry

# lines collected by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sin1x():
    return get_entry("sin1x")


@pytest.fixture(scope="session")
def oscillator():
    return get_entry("oscillator")


@pytest.fixture(scope="session")
def fuller():
    return get_entry("fuller")


@pytest.fixture(scope="session")
def counterexample():
    return get_entry("counterexample_L")


@pytest.fixture(scope="session")
def decay():
    return get_entry("infinite_decay")


def zero_problem(dim=1, cost=1.0, target=None):
    """f = 0, constant running cost, zero final cost."""
    return ControlProblem(
        dim=dim,
        dynamics=lambda t, x, u: np.zeros(np.shape(x)),
        running_cost=lambda t, x, u: np.full(np.shape(x)[:-1], cost),
        final_cost=lambda t, x: np.zeros(np.shape(x)[:-1]),
        target=target if target is not None else state_slab([10.0] * dim, [11.0] * dim),
        domain=whole_space(),
        control_set=interval_controls(-1.0, 1.0),
    )
