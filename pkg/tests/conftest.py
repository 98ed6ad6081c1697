import numpy as np
import pytest
from scipy import sparse

from coarsemp.coarsening import from_partition
from coarsemp.datasets import GeometricConfig, random_geometric_graph

# Six-node toy graph (0-based) and its three super-nodes {0,1}, {2,3,4}, {5}.
TOY_EDGES = [(0, 1), (0, 2), (1, 3), (2, 3), (2, 4), (3, 4), (4, 5)]
TOY_ASSIGNMENT = [0, 0, 1, 1, 1, 2]


def adjacency_from_edges(n, edges, weights=None):
    i, j = np.array(edges, dtype=np.int64).T if edges else (np.array([], int), np.array([], int))
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=float)
    A = sparse.coo_matrix((w, (i, j)), shape=(n, n))
    return (A + A.T).tocsr()


def random_graph(rng, n, p):
    """Erdos-Renyi adjacency with unit weights."""
    upper = np.triu(rng.random((n, n)) < p, k=1)
    return sparse.csr_matrix((upper | upper.T).astype(float))


@pytest.fixture
def toy_adjacency():
    return adjacency_from_edges(6, TOY_EDGES)


@pytest.fixture
def toy_coarsening():
    return from_partition(TOY_ASSIGNMENT)


@pytest.fixture(scope="session")
def geometric_200():
    return random_geometric_graph(GeometricConfig(n=200, threshold=0.112, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, filled by test_acceptance.py and echoed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
