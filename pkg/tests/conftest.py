import numpy as np
import pytest

from graphtext.graph_store import Graph


def random_graph(seed: int, max_nodes: int = 12, directed: bool = False, p: float = 0.35) -> Graph:
    """Seeded Erdos-Renyi graph for property tests."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_nodes + 1))
    edges = [
        (i, j)
        for i in range(n)
        for j in range(n)
        if i != j and (directed or i < j) and rng.random() < p
    ]
    return Graph.build([f"n{i}" for i in range(n)], edges, directed)


def random_dag(seed: int, max_nodes: int = 12, p: float = 0.3) -> Graph:
    """Seeded DAG: edges only run from lower to higher index."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_nodes + 1))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return Graph.build([f"n{i}" for i in range(n)], edges, directed=True)


@pytest.fixture
def path3() -> Graph:
    return Graph.build(["a", "b", "c"], [(0, 1), (1, 2)], directed=False)


@pytest.fixture
def triangle() -> Graph:
    return Graph.build(["a", "b", "c"], [(0, 1), (0, 2), (1, 2)], directed=False)


@pytest.fixture
def two_cliques() -> Graph:
    """Two disjoint K4s on 8 nodes."""
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    edges += [(i, j) for i in range(4, 8) for j in range(i + 1, 8)]
    return Graph.build([f"n{i}" for i in range(8)], edges, directed=False)
