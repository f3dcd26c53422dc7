import itertools

import numpy as np
import pytest

from staircase_ldp.domain import LocationDomain
from staircase_ldp.geo import EncodedLocation
from staircase_ldp.synthetic import random_domain, synthetic_domain


def exhaustive_log_ratio(Q: np.ndarray) -> float:
    """max over (x, x', y) of ln(q(y|x) / q(y|x')) by plain loops over output columns."""
    worst = -np.inf
    for y in range(Q.shape[1]):
        col = Q[:, y]
        worst = max(worst, float(np.log(col.max()) - np.log(col.min())))
    return worst


def triple_loop_log_ratio(Q: np.ndarray) -> float:
    d = Q.shape[0]
    worst = -np.inf
    for x, x2, y in itertools.product(range(d), range(d), range(Q.shape[1])):
        worst = max(worst, np.log(Q[x, y] / Q[x2, y]))
    return float(worst)


@pytest.fixture(scope="session")
def four_cells():
    return LocationDomain([EncodedLocation(2, v) for v in range(4)])


@pytest.fixture(scope="session")
def dom64():
    return random_domain(64, 12, np.random.default_rng(64))


@pytest.fixture(scope="session")
def porto374():
    return synthetic_domain(374, 1)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"acceptance {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
