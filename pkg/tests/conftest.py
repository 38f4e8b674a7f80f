import numpy as np
import pytest

from sonec.config import ExperimentConfig
from sonec.topology import CombinationMatrices, build_random_topology, topology_from_edges, uniform_weights


@pytest.fixture
def small_config():
    return ExperimentConfig(n_nodes=6, L=4, n_iters=150, n_runs=4, topology_degree=2, pilot_len=50)


@pytest.fixture
def small_topology(small_config):
    return build_random_topology(small_config.n_nodes, small_config.topology_degree, seed=7)


@pytest.fixture
def two_node():
    top = topology_from_edges(2, [(0, 1)])
    return top, uniform_weights(top)


def full_pair_weights():
    w = np.full((2, 2), 0.5)
    return CombinationMatrices(w.copy(), w.copy())


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
