"""Evaluation metrics: link prediction, retrieval, embedding-distance
correlations, frozen-embedding classification, and perplexity comparison.

All metrics run on frozen post-adapter embeddings, stay deterministic
given a seed, and are invariant to node relabeling applied consistently
to embeddings, graphs, and truth maps.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score, f1_score

from .errors import ConfigError, MissingClassError, ZeroVarianceError
from .graph_store import DataSplit, Graph, split_graph
from .node_encoder import inner_products, message_edges
from .similarity import SimilarityMatrix
from .text_encoder import LanguageModelHead, TextBatch, Tokenizer, tokenize, train_causal_lm
from .torchutil import seeded_init_
from .trainer import DualEncoder, SplitData

MAX_CORRELATION_PAIRS = 200_000


@dataclass(frozen=True)
class EvalPairs:
    """Positive edges and an equal number of sampled non-edges."""

    positives: tuple[tuple[int, int], ...]
    negatives: tuple[tuple[int, int], ...]
    seed: int


@dataclass
class MetricsReport:
    values: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def auc_from_scores(pos_scores, neg_scores) -> float:
    """Rank-sum AUC; ties count one half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC requires both positive and negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    pos_rank_sum = ranks[: pos.size].sum()
    return float((pos_rank_sum - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


def sample_eval_pairs(graph: Graph, split: DataSplit, seed: int, which: str = "test") -> EvalPairs:
    """Positives are the split's induced edges (in split-local indices);
    negatives are uniform non-edges within the split, equal in count."""
    sub = split_graph(graph, split, which)
    if sub.num_edges == 0:
        raise ConfigError(f"{which} split has no induced edges")
    rng = np.random.default_rng(seed)
    n = sub.num_nodes
    negatives: list[tuple[int, int]] = []
    attempts, budget = 0, 100 * sub.num_edges
    while len(negatives) < sub.num_edges:
        attempts += 1
        if attempts > budget:
            raise ConfigError(f"{which} split too dense to sample non-edges")
        i, j = int(rng.integers(n)), int(rng.integers(n))
        if i == j or sub.has_edge(i, j):
            continue
        negatives.append((i, j))
    return EvalPairs(tuple(sub.edges), tuple(negatives), seed)


def link_prediction_auc(node_embs: np.ndarray, pairs: EvalPairs) -> float:
    """AUC of inner-product decoding over positives vs sampled negatives.

    Ranks by the raw inner products: the sigmoid is strictly monotone, so
    the AUC is identical, and large-magnitude dots would saturate the
    probabilities into exact float ties.
    """
    if not pairs.positives:
        raise ValueError("no positive pairs")
    pos = inner_products(node_embs, pairs.positives)
    neg = inner_products(node_embs, pairs.negatives)
    return auc_from_scores(pos, neg)


def _row_normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mat / norms


def topk_accuracy(text_embs: np.ndarray, node_embs: np.ndarray, true_node,
                  k_max: int = 10) -> np.ndarray:
    """accuracy@k for k = 1..k_max under cosine ranking of all candidate
    nodes, ties broken by ascending node index."""
    truth = np.asarray(true_node, dtype=int)
    if truth.shape[0] != text_embs.shape[0]:
        raise ValueError("one true node index per text is required")
    if truth.min() < 0 or truth.max() >= node_embs.shape[0]:
        raise ValueError("true node index outside the candidate set")
    sims = _row_normalize(text_embs) @ _row_normalize(node_embs).T
    true_sims = sims[np.arange(sims.shape[0]), truth]
    better = (sims > true_sims[:, None]).sum(axis=1)
    tied_earlier = ((sims == true_sims[:, None]) & (np.arange(sims.shape[1])[None, :] < truth[:, None])).sum(axis=1)
    rank = 1 + better + tied_earlier
    ks = np.arange(1, k_max + 1)
    return (rank[:, None] <= ks[None, :]).mean(axis=0)


def _sample_text_pairs(n_texts: int, max_pairs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    total = n_texts * (n_texts - 1) // 2
    if total <= max_pairs:
        return np.triu_indices(n_texts, k=1)
    rng = np.random.default_rng(seed)
    left = rng.integers(n_texts, size=2 * max_pairs)
    right = rng.integers(n_texts, size=2 * max_pairs)
    keep = left != right
    return left[keep][:max_pairs], right[keep][:max_pairs]


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if np.std(x) == 0 or np.std(y) == 0:
        raise ZeroVarianceError("correlation undefined: zero variance on one side")
    xc, yc = x - x.mean(), y - y.mean()
    return float((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)))


def distance_coupling(text_embs: np.ndarray, node_embs: np.ndarray, true_node,
                      max_pairs: int = MAX_CORRELATION_PAIRS, seed: int = 0) -> float:
    """Pearson correlation between text-pair cosine similarity and the
    corresponding node-pair cosine similarity."""
    if text_embs.shape[0] < 2:
        raise ValueError("need at least 2 texts")
    truth = np.asarray(true_node, dtype=int)
    ti, tj = _sample_text_pairs(text_embs.shape[0], max_pairs, seed)
    t = _row_normalize(text_embs)
    g = _row_normalize(node_embs)
    text_sims = np.einsum("ij,ij->i", t[ti], t[tj])
    node_sims = np.einsum("ij,ij->i", g[truth[ti]], g[truth[tj]])
    return _pearson(text_sims, node_sims)


def text_simrank_correlation(text_embs: np.ndarray, sim: SimilarityMatrix, true_node,
                             max_pairs: int = MAX_CORRELATION_PAIRS, seed: int = 0) -> float:
    """Like distance_coupling with node-side cosines replaced by the
    graph similarity entries."""
    if text_embs.shape[0] < 2:
        raise ValueError("need at least 2 texts")
    truth = np.asarray(true_node, dtype=int)
    ti, tj = _sample_text_pairs(text_embs.shape[0], max_pairs, seed)
    t = _row_normalize(text_embs)
    text_sims = np.einsum("ij,ij->i", t[ti], t[tj])
    graph_sims = sim.values[truth[ti], truth[tj]]
    return _pearson(text_sims, graph_sims)


def mean_text_embeddings(text_embs: np.ndarray, true_node, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Average text embedding per node; second value flags covered nodes."""
    truth = np.asarray(true_node, dtype=int)
    out = np.zeros((n_nodes, text_embs.shape[1]))
    counts = np.zeros(n_nodes)
    np.add.at(out, truth, text_embs)
    np.add.at(counts, truth, 1.0)
    covered = counts > 0
    out[covered] /= counts[covered, None]
    return out, covered


def classify_nodes(embeddings_by_kind: dict[str, np.ndarray], labels, seed: int) -> dict[str, dict[str, float]]:
    """Frozen-embedding logistic regression on a seeded 50/50 node split.

    Reports macro-F1 and accuracy per embedding kind plus the
    majority-class baseline. Raises MissingClassError when the training
    half does not cover every class.
    """
    y = np.asarray(labels)
    n = y.shape[0]
    if n < 4:
        raise ValueError("need at least 4 labeled nodes")
    for kind, mat in embeddings_by_kind.items():
        if mat.shape[0] != n:
            raise ValueError(f"embedding kind {kind!r} has {mat.shape[0]} rows for {n} labels")
    order = np.random.default_rng(seed).permutation(n)
    train_idx, test_idx = order[: n // 2], order[n // 2 :]
    missing = set(np.unique(y)) - set(np.unique(y[train_idx]))
    if missing:
        raise MissingClassError(f"classes absent from the training half: {sorted(missing)}")

    results: dict[str, dict[str, float]] = {}
    for kind, mat in embeddings_by_kind.items():
        clf = LogisticRegression(C=1.0, solver="lbfgs", max_iter=10_000, tol=1e-6)
        clf.fit(mat[train_idx], y[train_idx])
        pred = clf.predict(mat[test_idx])
        results[kind] = {
            "macro_f1": float(f1_score(y[test_idx], pred, average="macro", zero_division=0)),
            "accuracy": float(accuracy_score(y[test_idx], pred)),
        }

    values, counts = np.unique(y[train_idx], return_counts=True)
    majority = values[np.lexsort((values, -counts))][0]
    maj_pred = np.full(test_idx.shape, majority)
    results["majority"] = {
        "macro_f1": float(f1_score(y[test_idx], maj_pred, average="macro", zero_division=0)),
        "accuracy": float(accuracy_score(y[test_idx], maj_pred)),
    }
    return results


def compute_embeddings(model: DualEncoder, tokenizer: Tokenizer, data: SplitData,
                       chunk_size: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen post-adapter embeddings for one split.

    Returns (text embeddings, node embeddings, true node index per text),
    all as numpy arrays in split-local node order.
    """
    with torch.no_grad():
        feats = torch.as_tensor(data.features.matrix, dtype=torch.float32)
        node_embs = model.embed_nodes(feats, message_edges(data.graph)).numpy()
        chunks = []
        texts = [r.text for r in data.records]
        for start in range(0, len(texts), chunk_size):
            batch = tokenize(tokenizer, texts[start : start + chunk_size], model.text_cfg.max_len)
            chunks.append(model.embed_texts(batch).numpy())
        text_embs = np.concatenate(chunks) if chunks else np.zeros((0, model.embed_dim))
    truth = np.asarray([data.graph.index_of(r.node_id) for r in data.records], dtype=int)
    return text_embs, node_embs, truth


def bootstrap_pvalue(deltas: np.ndarray, resamples: int = 10_000, seed: int = 0) -> float:
    """Two-sided percentile-bootstrap p-value for mean(delta) != 0."""
    deltas = np.asarray(deltas, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(deltas.size, size=(resamples, deltas.size))
    means = deltas[idx].mean(axis=1)
    return float(min(1.0, 2.0 * min((means <= 0).mean(), (means >= 0).mean())))


@dataclass(frozen=True)
class LmEvalConfig:
    epochs: int = 3
    learning_rate: float = 5e-5
    batch_size: int = 12
    seed: int = 0
    resamples: int = 10_000


def _lm_batches(tokenizer: Tokenizer, texts: list[str], max_len: int, batch_size: int) -> list[TextBatch]:
    return [
        tokenize(tokenizer, texts[start : start + batch_size], max_len)
        for start in range(0, len(texts), batch_size)
    ]


def perplexity_comparison(joint_encoder, baseline_encoder, tokenizer: Tokenizer,
                          train_texts: list[str], test_texts: list[str],
                          config: LmEvalConfig = LmEvalConfig()) -> tuple[float, float, float]:
    """Fine-tune a fresh LM head (and encoder) from each initialization
    under identical settings; report test perplexities and a bootstrap
    p-value over per-text cross-entropy differences."""
    from .text_encoder import per_text_cross_entropy

    for enc in (joint_encoder, baseline_encoder):
        if not enc.config.causal:
            raise ConfigError("perplexity comparison requires causal encoders")
    max_len = joint_encoder.config.max_len
    train_batches = _lm_batches(tokenizer, train_texts, max_len, config.batch_size)
    test_batches = _lm_batches(tokenizer, test_texts, max_len, config.batch_size)

    per_text: list[np.ndarray] = []
    for enc in (joint_encoder, baseline_encoder):
        model = copy.deepcopy(enc)
        head = LanguageModelHead(model.config.d_model, model.config.vocab_size)
        seeded_init_(head, torch.Generator().manual_seed(config.seed))
        train_causal_lm(model, head, train_batches, config.epochs, config.learning_rate)
        with torch.no_grad():
            ces = [
                per_text_cross_entropy(head(model(b.ids, b.mask)), b.ids, b.mask).numpy()
                for b in test_batches
            ]
        per_text.append(np.concatenate(ces))

    joint_ppl = float(np.exp(per_text[0].mean()))
    baseline_ppl = float(np.exp(per_text[1].mean()))
    p = bootstrap_pvalue(per_text[0] - per_text[1], config.resamples, config.seed)
    return joint_ppl, baseline_ppl, p
