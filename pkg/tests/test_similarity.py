import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphtext.graph_store import Graph
from graphtext.similarity import (SimilarityKind, SimilarityMatrix, batch_similarity_rows,
                                  load_similarity, mutual_neighbor_similarity, save_similarity,
                                  simrank)

from conftest import random_dag, random_graph


def brute_force_mutual_neighbor(graph: Graph) -> np.ndarray:
    """Direct double loop: count shared neighbors, then cosine of profiles."""
    a = graph.adjacency()
    n = graph.num_nodes
    profiles = np.array([[sum(a[i, k] * a[j, k] for k in range(n)) for j in range(n)] for i in range(n)])
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ni, nj = np.linalg.norm(profiles[i]), np.linalg.norm(profiles[j])
            if ni > 0 and nj > 0:
                out[i, j] = profiles[i] @ profiles[j] / (ni * nj)
    return out


def reference_simrank(graph: Graph, decay: float, max_iters: int, tol: float) -> np.ndarray:
    """Nested-loop SimRank straight from the recurrence."""
    n = graph.num_nodes
    nbrs = graph.in_neighbor_sets()
    s = np.eye(n)
    for _ in range(max_iters):
        nxt = np.eye(n)
        for a in range(n):
            for b in range(n):
                if a == b or not nbrs[a] or not nbrs[b]:
                    continue
                total = sum(s[i, j] for i in nbrs[a] for j in nbrs[b])
                nxt[a, b] = decay * total / (len(nbrs[a]) * len(nbrs[b]))
        if np.max(np.abs(nxt - s)) < tol:
            s = nxt
            break
        s = nxt
    return s


class TestMutualNeighborCosine:
    def test_path_graph_values(self, path3):
        sim = mutual_neighbor_similarity(path3)
        assert sim.kind is SimilarityKind.MUTUAL_NEIGHBOR_COSINE
        # A @ A.T rows are (1,0,1), (0,2,0), (1,0,1)
        assert sim.values[0, 2] == pytest.approx(1.0)
        assert sim.values[0, 1] == pytest.approx(0.0)

    def test_triangle_value(self, triangle):
        assert mutual_neighbor_similarity(triangle).values[0, 1] == pytest.approx(5 / 6, abs=1e-12)

    def test_isolated_node_zero_everywhere(self):
        g = Graph.build(["a", "b", "c"], [(0, 1)], False)
        sim = mutual_neighbor_similarity(g).values
        assert np.all(sim[2, :] == 0.0)
        assert sim[2, 2] == 0.0

    def test_directed_rejected(self):
        g = Graph.build(["a", "b"], [(0, 1)], directed=True)
        with pytest.raises(ValueError, match="undirected"):
            mutual_neighbor_similarity(g)

    def test_matches_brute_force(self):
        for seed in range(40):
            g = random_graph(seed, max_nodes=12)
            got = mutual_neighbor_similarity(g).values
            assert np.max(np.abs(got - brute_force_mutual_neighbor(g))) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_symmetry_and_range(self, seed):
        g = random_graph(seed, max_nodes=100, p=0.1)
        sim = mutual_neighbor_similarity(g).values
        assert np.array_equal(sim, sim.T)
        assert sim.min() >= 0.0 and sim.max() <= 1.0

    def test_diagonal_one_for_connected_nodes(self):
        for seed in range(10):
            g = random_graph(seed, max_nodes=15)
            sim = mutual_neighbor_similarity(g).values
            degs = g.adjacency().sum(axis=1)
            for i in range(g.num_nodes):
                if degs[i] > 0:
                    assert sim[i, i] == pytest.approx(1.0, abs=1e-9)


class TestSimrank:
    def test_diagonal_is_one(self):
        for seed in range(5):
            g = random_graph(seed, max_nodes=10)
            assert np.all(np.diag(simrank(g).values) == 1.0)

    def test_star_leaves(self):
        star = Graph.build(["hub", "b", "c"], [(0, 1), (0, 2)], False)
        sim = simrank(star, decay=0.8)
        assert sim.values[1, 2] == pytest.approx(0.8, abs=1e-12)

    def test_edgeless_graph_identity(self):
        g = Graph.build(["a", "b", "c"], [], False)
        assert np.array_equal(simrank(g).values, np.eye(3))

    def test_matches_reference_implementation(self):
        for seed in range(15):
            g = random_graph(seed, max_nodes=10, directed=bool(seed % 2))
            got = simrank(g, 0.8, 20, 0.0).values
            ref = reference_simrank(g, 0.8, 20, 0.0)
            assert np.max(np.abs(got - ref)) < 1e-6

    def test_convergence_deltas_non_increasing(self):
        for seed in range(12):
            g = random_dag(seed, max_nodes=12)
            prev, deltas = np.eye(g.num_nodes), []
            for iters in range(1, 8):
                cur = simrank(g, 0.8, iters, 0.0).values
                deltas.append(np.max(np.abs(cur - prev)))
                prev = cur
            for earlier, later in zip(deltas[1:], deltas[2:]):
                assert later <= earlier + 1e-12

    def test_parameter_validation(self):
        g = Graph.build(["a", "b"], [(0, 1)], False)
        with pytest.raises(ValueError):
            simrank(g, decay=1.5)
        with pytest.raises(ValueError):
            simrank(g, max_iters=0)


class TestBatchSimilarityRows:
    def test_normalization(self):
        sim = SimilarityMatrix(np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]),
                               SimilarityKind.SIMRANK)
        rows = batch_similarity_rows(sim, [0, 1, 2])
        assert np.allclose(rows.rows[0], [0.5, 0.25, 0.25])
        assert not rows.degenerate_rows

    def test_degenerate_row_flagged(self):
        sim = SimilarityMatrix(np.array([[0.0, 0.0], [0.0, 1.0]]), SimilarityKind.SIMRANK)
        rows = batch_similarity_rows(sim, [0, 1])
        assert rows.degenerate_rows == {0}
        assert np.all(rows.rows[0] == 0.0)
        assert rows.rows[1].sum() == pytest.approx(1.0)

    def test_single_element_batch(self):
        sim = SimilarityMatrix(np.array([[1.0, 0.2], [0.2, 1.0]]), SimilarityKind.SIMRANK)
        rows = batch_similarity_rows(sim, [1])
        assert rows.rows.shape == (1, 1)
        assert rows.rows[0, 0] == pytest.approx(1.0)

    def test_duplicate_nodes_rejected(self):
        sim = SimilarityMatrix(np.eye(3), SimilarityKind.SIMRANK)
        with pytest.raises(ValueError, match="duplicate"):
            batch_similarity_rows(sim, [0, 0, 1])

    def test_row_stochastic_over_random_batches(self):
        rng = np.random.default_rng(0)
        for seed in range(100):
            g = random_graph(seed, max_nodes=20)
            sim = mutual_neighbor_similarity(g)
            size = int(rng.integers(1, g.num_nodes + 1))
            batch = rng.choice(g.num_nodes, size=size, replace=False)
            rows = batch_similarity_rows(sim, batch)
            sums = rows.rows.sum(axis=1)
            for i, s in enumerate(sums):
                if i in rows.degenerate_rows:
                    assert s == 0.0
                else:
                    assert abs(s - 1.0) < 1e-6
            assert rows.rows.min() >= 0.0


class TestBinaryExport:
    def test_round_trip(self, tmp_path):
        g = random_graph(4, max_nodes=15)
        sim = mutual_neighbor_similarity(g)
        save_similarity(tmp_path / "sim.bin", sim)
        loaded = load_similarity(tmp_path / "sim.bin")
        assert loaded.kind is sim.kind
        assert np.allclose(loaded.values, sim.values, atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"NOTSIM" + b"\x00" * 16)
        with pytest.raises(Exception, match="magic"):
            load_similarity(tmp_path / "bad.bin")
