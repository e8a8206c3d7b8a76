import numpy as np
import pytest
import torch

from graphtext.datasets import CorpusRecord
from graphtext.errors import ConfigError, MissingClassError, ZeroVarianceError
from graphtext.evaluation import (EvalPairs, LmEvalConfig, auc_from_scores, bootstrap_pvalue,
                                  classify_nodes, compute_embeddings, distance_coupling,
                                  link_prediction_auc, mean_text_embeddings,
                                  perplexity_comparison, sample_eval_pairs,
                                  text_simrank_correlation, topk_accuracy)
from graphtext.graph_store import Graph, conform_features, make_splits, svd_features
from graphtext.node_encoder import GATConfig
from graphtext.similarity import SimilarityKind, SimilarityMatrix, simrank
from graphtext.text_encoder import TextEncoderConfig, Tokenizer
from graphtext.trainer import DualEncoder, SplitData

from conftest import random_graph


def brute_force_auc(pos, neg):
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_hand_example(self):
        assert auc_from_scores([0.9, 0.4], [0.5, 0.1]) == pytest.approx(0.75)

    def test_all_ties(self):
        assert auc_from_scores([0.5] * 4, [0.5] * 3) == pytest.approx(0.5)

    def test_perfect_separation(self):
        assert auc_from_scores([0.9, 0.8], [0.2, 0.1]) == pytest.approx(1.0)

    def test_matches_all_pairs_definition(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pos = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=int(rng.integers(2, 40)))
            neg = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=int(rng.integers(2, 40)))
            assert auc_from_scores(pos, neg) == pytest.approx(brute_force_auc(pos, neg), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            auc_from_scores([], [0.5])


class TestSampleEvalPairs:
    def _graph_and_split(self, seed=0):
        g = random_graph(seed, max_nodes=20, p=0.4)
        while g.num_nodes < 10:
            seed += 1
            g = random_graph(seed, max_nodes=20, p=0.4)
        return g, make_splits(g, (0.5, 0.2, 0.3), seed=1)

    def test_counts_and_validity(self):
        g, s = self._graph_and_split()
        pairs = sample_eval_pairs(g, s, seed=0)
        assert len(pairs.negatives) == len(pairs.positives)
        from graphtext.graph_store import split_graph
        sub = split_graph(g, s, "test")
        for i, j in pairs.negatives:
            assert i != j and not sub.has_edge(i, j)

    def test_deterministic(self):
        g, s = self._graph_and_split(3)
        assert sample_eval_pairs(g, s, 5) == sample_eval_pairs(g, s, 5)

    def test_complete_subgraph_rejected(self):
        # All 20 nodes fully connected: the test split is a clique.
        n = 8
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
        g = Graph.build([f"n{i}" for i in range(n)], edges, False)
        s = make_splits(g, (0.5, 0.25, 0.25), seed=0)
        with pytest.raises(ConfigError, match="dense"):
            sample_eval_pairs(g, s, seed=0)

    def test_no_induced_edges_rejected(self):
        g = Graph.build([f"n{i}" for i in range(9)], [(0, 1)], False)
        s = make_splits(g, (0.34, 0.33, 0.33), seed=4)
        if not s.induced_edges["test"]:
            with pytest.raises(ConfigError, match="no induced edges"):
                sample_eval_pairs(g, s, seed=0)


class TestTopkAccuracy:
    def test_perfect_alignment(self):
        embs = np.eye(5)
        accs = topk_accuracy(embs, embs, np.arange(5), k_max=3)
        assert accs[0] == 1.0

    def test_monotone_and_saturating(self):
        rng = np.random.default_rng(1)
        text = rng.normal(size=(30, 8))
        node = rng.normal(size=(10, 8))
        accs = topk_accuracy(text, node, rng.integers(10, size=30), k_max=10)
        assert np.all(np.diff(accs) >= 0)
        assert accs[-1] == 1.0

    def test_random_embeddings_expected_accuracy(self):
        # Independent embeddings: P(true node in top k) = k / N.
        hits = []
        n_nodes, k = 8, 3
        for seed in range(200):
            rng = np.random.default_rng(seed)
            text = rng.normal(size=(12, 6))
            node = rng.normal(size=(n_nodes, 6))
            accs = topk_accuracy(text, node, rng.integers(n_nodes, size=12), k_max=k)
            hits.append(accs[k - 1])
        expected = k / n_nodes
        se = np.sqrt(expected * (1 - expected) / (200 * 12))
        assert abs(np.mean(hits) - expected) < 3 * se

    def test_tie_break_by_ascending_index(self):
        node = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        text = np.array([[1.0, 0.0]])
        accs_true1 = topk_accuracy(text, node, [1], k_max=2)
        assert accs_true1[0] == 0.0 and accs_true1[1] == 1.0
        accs_true0 = topk_accuracy(text, node, [0], k_max=2)
        assert accs_true0[0] == 1.0

    def test_missing_truth_rejected(self):
        with pytest.raises(ValueError):
            topk_accuracy(np.eye(2), np.eye(2), [0, 5], k_max=1)


class TestDistanceCoupling:
    def test_identical_embeddings(self):
        rng = np.random.default_rng(0)
        embs = rng.normal(size=(10, 4))
        corr = distance_coupling(embs, embs.copy(), np.arange(10))
        assert corr == pytest.approx(1.0, abs=1e-9)

    def test_anti_correlated_fixture(self):
        # Text pair cosines (0.5, -0.5, 0.5); node pair cosines (0, 1, 0)
        # = 0.5 - text exactly, so the correlation is exactly -1.
        s = np.sqrt(3) / 2
        text = np.array([[1.0, 0.0], [0.5, s], [-0.5, s]])
        node = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        corr = distance_coupling(text, node, np.arange(3))
        assert corr == pytest.approx(-1.0, abs=1e-9)

    def test_zero_variance_error(self):
        embs = np.ones((4, 3))
        with pytest.raises(ZeroVarianceError):
            distance_coupling(embs, embs, np.arange(4))

    def test_pair_cap_sampling_deterministic(self):
        rng = np.random.default_rng(2)
        text = rng.normal(size=(40, 5))
        node = rng.normal(size=(40, 5))
        a = distance_coupling(text, node, np.arange(40), max_pairs=100, seed=9)
        b = distance_coupling(text, node, np.arange(40), max_pairs=100, seed=9)
        assert a == b

    def test_pearson_matches_textbook(self):
        rng = np.random.default_rng(3)
        text = rng.normal(size=(15, 4))
        node = rng.normal(size=(15, 4))
        truth = np.arange(15)
        mine = distance_coupling(text, node, truth)

        def norm(m):
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        ti, tj = np.triu_indices(15, k=1)
        x = np.einsum("ij,ij->i", norm(text)[ti], norm(text)[tj])
        y = np.einsum("ij,ij->i", norm(node)[truth][ti], norm(node)[truth][tj])
        assert mine == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


class TestSimrankCorrelation:
    def test_constructed_perfect_correlation(self):
        values = np.array([[1.0, 0.8, 0.2], [0.8, 1.0, 0.5], [0.2, 0.5, 1.0]])
        sim = SimilarityMatrix(values, SimilarityKind.SIMRANK)
        # Build 3 text embeddings whose pairwise cosines equal the entries.
        # Cheat: use 3 texts mapped to 3 nodes and check correlation of
        # identical sequences instead.
        text = np.array([[1.0, 0.0], [0.8, 0.6], [0.2, np.sqrt(1 - 0.04)]])
        got_pairs_text = []
        for i, j in ((0, 1), (0, 2), (1, 2)):
            got_pairs_text.append(text[i] @ text[j])
        # Overwrite similarity entries with exactly those cosines.
        for (i, j), v in zip(((0, 1), (0, 2), (1, 2)), got_pairs_text):
            values[i, j] = values[j, i] = v
        corr = text_simrank_correlation(text, sim, np.arange(3))
        assert corr == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_similarity_error(self):
        sim = SimilarityMatrix(np.full((3, 3), 0.5), SimilarityKind.SIMRANK)
        rng = np.random.default_rng(0)
        with pytest.raises(ZeroVarianceError):
            text_simrank_correlation(rng.normal(size=(3, 4)), sim, np.arange(3))

    def test_random_embeddings_near_zero(self):
        attempt = 8
        g = random_graph(attempt, max_nodes=12, p=0.4)
        while g.num_nodes < 12 or g.num_edges < 8:
            attempt += 1
            g = random_graph(attempt, max_nodes=12, p=0.4)
        sim = simrank(g)
        corrs = []
        for seed in range(50):
            rng = np.random.default_rng(seed)
            text = rng.normal(size=(24, 6))
            truth = rng.integers(g.num_nodes, size=24)
            try:
                corrs.append(abs(text_simrank_correlation(text, sim, truth)))
            except ZeroVarianceError:
                continue
        assert np.median(corrs) < 0.3


class TestMeanTextEmbeddings:
    def test_per_node_average(self):
        text = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]])
        out, covered = mean_text_embeddings(text, [0, 0, 2], n_nodes=3)
        assert np.allclose(out[0], [2.0, 0.0])
        assert covered.tolist() == [True, False, True]
        assert np.all(out[1] == 0)


class TestClassifyNodes:
    def test_separable_fixture(self):
        rng = np.random.default_rng(0)
        n = 40
        y = np.array(["a"] * 20 + ["b"] * 20)
        embs = rng.normal(size=(n, 4))
        embs[:20, 0] += 4.0
        embs[20:, 0] -= 4.0
        out = classify_nodes({"node": embs}, y, seed=1)
        assert out["node"]["macro_f1"] == pytest.approx(1.0)
        assert out["majority"]["macro_f1"] < 0.5

    def test_constant_embeddings_tie_majority(self):
        y = np.array(["a"] * 12 + ["b"] * 8)
        embs = np.ones((20, 3))
        out = classify_nodes({"node": embs}, y, seed=0)
        assert abs(out["node"]["macro_f1"] - out["majority"]["macro_f1"]) < 1e-6
        assert abs(out["node"]["accuracy"] - out["majority"]["accuracy"]) < 1e-6

    def test_missing_class_error(self):
        y = np.array(["a"] * 9 + ["b"])
        embs = np.random.default_rng(0).normal(size=(10, 3))
        saw = False
        for seed in range(40):
            try:
                classify_nodes({"node": embs}, y, seed=seed)
            except MissingClassError:
                saw = True
                break
        assert saw

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        y = np.array(["a", "b"] * 10)
        embs = rng.normal(size=(20, 5))
        assert classify_nodes({"node": embs}, y, 7) == classify_nodes({"node": embs}, y, 7)

    def test_solver_coefficients_deterministic(self):
        from sklearn.linear_model import LogisticRegression
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 4))
        y = rng.integers(3, size=30)
        fits = [LogisticRegression(C=1.0, solver="lbfgs", max_iter=10_000, tol=1e-6).fit(x, y)
                for _ in range(2)]
        assert np.max(np.abs(fits[0].coef_ - fits[1].coef_)) < 1e-9


class TestRelabelingInvariance:
    def test_metrics_invariant_to_consistent_permutation(self):
        rng = np.random.default_rng(6)
        n_nodes, n_texts = 9, 21
        node = rng.normal(size=(n_nodes, 5))
        text = rng.normal(size=(n_texts, 5))
        truth = rng.integers(n_nodes, size=n_texts)
        perm = rng.permutation(n_nodes)
        inv = np.argsort(perm)

        acc = topk_accuracy(text, node, truth, 5)
        acc_p = topk_accuracy(text, node[inv], perm[truth], 5)
        assert np.allclose(acc, acc_p)

        coup = distance_coupling(text, node, truth)
        coup_p = distance_coupling(text, node[inv], perm[truth])
        assert coup == pytest.approx(coup_p, abs=1e-12)

        pairs = EvalPairs(((0, 1), (2, 3)), ((4, 5), (6, 7)), seed=0)
        relabeled = EvalPairs(tuple((perm[a], perm[b]) for a, b in pairs.positives),
                              tuple((perm[a], perm[b]) for a, b in pairs.negatives), seed=0)
        assert link_prediction_auc(node, pairs) == pytest.approx(
            link_prediction_auc(node[inv], relabeled), abs=1e-12)


class TestBootstrap:
    def test_zero_deltas_p_one(self):
        assert bootstrap_pvalue(np.zeros(30)) == pytest.approx(1.0)

    def test_strong_effect_small_p(self):
        assert bootstrap_pvalue(np.full(50, 2.0) + np.random.default_rng(0).normal(0, 0.1, 50)) < 0.01


class TestPerplexityComparison:
    def _encoders(self, vocab):
        cfg = TextEncoderConfig(vocab_size=vocab, layers=1, heads=2, d_model=16,
                                ffn_dim=32, max_len=12, causal=True)
        from graphtext.text_encoder import TransformerTextEncoder
        from graphtext.torchutil import seeded_init_
        a, b = TransformerTextEncoder(cfg), TransformerTextEncoder(cfg)
        seeded_init_(a, torch.Generator().manual_seed(0))
        seeded_init_(b, torch.Generator().manual_seed(0))
        return a, b

    def test_identical_models_null_result(self):
        texts = ["a b c", "b c a", "c a b", "a c b"]
        tok = Tokenizer.train(texts, min_count=1)
        a, b = self._encoders(tok.size)
        cfg = LmEvalConfig(epochs=1, batch_size=2, resamples=500)
        ppl_a, ppl_b, p = perplexity_comparison(a, b, tok, texts, texts, cfg)
        assert ppl_a == pytest.approx(ppl_b, abs=1e-9)
        assert p == pytest.approx(1.0)

    def test_non_causal_rejected(self):
        texts = ["a b", "b a"]
        tok = Tokenizer.train(texts, min_count=1)
        cfg = TextEncoderConfig(vocab_size=tok.size, layers=1, heads=1, d_model=8,
                                ffn_dim=16, max_len=8, causal=False)
        from graphtext.text_encoder import TransformerTextEncoder
        enc = TransformerTextEncoder(cfg)
        with pytest.raises(ConfigError, match="causal"):
            perplexity_comparison(enc, enc, tok, texts, texts, LmEvalConfig(epochs=1))


class TestComputeEmbeddings:
    def test_shapes_and_truth(self):
        g = Graph.build(["a", "b", "c"], [(0, 1), (1, 2)], False)
        feats = conform_features(svd_features(g, 8), 8)
        recs = [CorpusRecord("t0", "a", "x y"), CorpusRecord("t1", "c", "y z")]
        tok = Tokenizer.train([r.text for r in recs], min_count=1)
        model = DualEncoder(
            TextEncoderConfig(vocab_size=tok.size, layers=1, heads=1, d_model=8,
                              ffn_dim=16, max_len=8),
            GATConfig(in_dim=8, hidden_dim=8, out_dim=8), embed_dim=8)
        model.init_parameters(0)
        data = SplitData.build(g, feats, recs)
        text_embs, node_embs, truth = compute_embeddings(model, tok, data)
        assert text_embs.shape == (2, 8)
        assert node_embs.shape == (3, 8)
        assert truth.tolist() == [0, 2]
