"""Graph attention encoder and the inner-product autoencoder baseline.

Message passing follows the original attention scoring: a shared linear
map per head, additive source/destination score vectors, LeakyReLU with
slope 0.2, and softmax normalization over each node's in-neighborhood
including a self-loop. Hidden layers concatenate head outputs and are
separated by a linear layer plus layer normalization; the output layer
averages its heads.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import expit

from .errors import ConfigError
from .graph_store import Graph, NodeFeatures, conform_features
from .torchutil import seeded_dropout, seeded_init_


@dataclass(frozen=True)
class GATConfig:
    in_dim: int
    hidden_dim: int = 64
    out_dim: int = 64
    layers: int = 3
    heads: int = 2
    negative_slope: float = 0.2
    dropout: float = 0.3


def message_edges(graph: Graph) -> torch.Tensor:
    """(2, E') src/dst index tensor with self-loops on every node.

    Directed graphs keep src -> dst only; undirected graphs emit both
    directions.
    """
    src, dst = [], []
    for s, d in graph.edges:
        src.append(s)
        dst.append(d)
        if not graph.directed:
            src.append(d)
            dst.append(s)
    loops = list(range(graph.num_nodes))
    return torch.tensor([src + loops, dst + loops], dtype=torch.long)


class GraphAttentionLayer(nn.Module):
    def __init__(self, in_dim: int, head_dim: int, heads: int, negative_slope: float, concat: bool):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.negative_slope = negative_slope
        self.concat = concat
        self.proj = nn.Linear(in_dim, heads * head_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, head_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, head_dim))

    def forward(self, x: torch.Tensor, edges: torch.Tensor,
                collect_attention: list | None = None) -> torch.Tensor:
        n = x.shape[0]
        src, dst = edges[0], edges[1]
        z = self.proj(x).view(n, self.heads, self.head_dim)
        score_src = (z * self.att_src).sum(-1)
        score_dst = (z * self.att_dst).sum(-1)
        e = F.leaky_relu(score_src[src] + score_dst[dst], self.negative_slope)

        # Numerically stable softmax over incoming edges per destination.
        # Subtracting a per-destination constant leaves the softmax and
        # its gradient unchanged, so the max can be detached.
        emax = e.new_full((n, self.heads), float("-inf"))
        emax.scatter_reduce_(0, dst[:, None].expand_as(e), e.detach(),
                             reduce="amax", include_self=False)
        exp_e = torch.exp(e - emax[dst])
        denom = exp_e.new_zeros((n, self.heads)).index_add_(0, dst, exp_e)
        alpha = exp_e / denom[dst]
        if collect_attention is not None:
            collect_attention.append(alpha.detach())

        out = z.new_zeros((n, self.heads, self.head_dim))
        out = out.index_add_(0, dst, alpha[..., None] * z[src])
        if self.concat:
            return out.reshape(n, self.heads * self.head_dim)
        return out.mean(dim=1)


class GraphAttentionEncoder(nn.Module):
    """Stack of attention layers with interleaved linear + layer norm."""

    def __init__(self, config: GATConfig):
        super().__init__()
        self.config = config
        attn, mix, norms = [], [], []
        width = config.in_dim
        for layer in range(config.layers):
            last = layer == config.layers - 1
            head_dim = config.out_dim if last else config.hidden_dim
            attn.append(GraphAttentionLayer(width, head_dim, config.heads,
                                            config.negative_slope, concat=not last))
            if not last:
                mix.append(nn.Linear(config.heads * config.hidden_dim, config.hidden_dim))
                norms.append(nn.LayerNorm(config.hidden_dim))
                width = config.hidden_dim
        self.attn = nn.ModuleList(attn)
        self.mix = nn.ModuleList(mix)
        self.norms = nn.ModuleList(norms)

    def forward(self, features: torch.Tensor, edges: torch.Tensor,
                train_mode: bool = False, generator: torch.Generator | None = None,
                collect_attention: list | None = None) -> torch.Tensor:
        h = features
        for layer, attn in enumerate(self.attn):
            h = seeded_dropout(h, self.config.dropout, train_mode, generator)
            h = attn(h, edges, collect_attention)
            if layer < len(self.mix):
                h = F.elu(h)
                h = self.norms[layer](self.mix[layer](h))
        return h


def encode_nodes(encoder: GraphAttentionEncoder, graph: Graph, features: NodeFeatures,
                 train_mode: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
    """Full-graph forward pass; row i corresponds to graph node index i."""
    if features.matrix.shape[0] != graph.num_nodes:
        raise ValueError(
            f"feature rows ({features.matrix.shape[0]}) do not match node count ({graph.num_nodes})"
        )
    x = torch.as_tensor(features.matrix, dtype=torch.float32)
    return encoder(x, message_edges(graph), train_mode=train_mode, generator=generator)


def inner_products(node_embs: np.ndarray, pairs) -> np.ndarray:
    """Raw dot(emb_i, emb_j) per (i, j) pair."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    return np.einsum("ij,ij->i", node_embs[pairs[:, 0]], node_embs[pairs[:, 1]])


def inner_product_decode(node_embs: np.ndarray, pairs) -> np.ndarray:
    """sigmoid(dot(emb_i, emb_j)) per (i, j) pair."""
    return expit(inner_products(node_embs, pairs))


@dataclass(frozen=True)
class GAEConfig:
    learning_rate: float = 1e-2
    max_epochs: int = 200
    patience: int = 5
    min_delta: float = 1e-3
    hidden_dim: int = 64
    out_dim: int = 64
    dropout: float = 0.3
    seed: int = 0


def _sample_non_edges(graph: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform node pairs that are not edges and not self-pairs."""
    n = graph.num_nodes
    out, attempts = [], 0
    budget = max(100 * count, 1000)
    while len(out) < count:
        attempts += 1
        if attempts > budget:
            raise ConfigError("graph too dense to sample the requested non-edges")
        i, j = int(rng.integers(n)), int(rng.integers(n))
        if i == j or graph.has_edge(i, j):
            continue
        out.append((i, j))
    return np.asarray(out, dtype=int)


def train_gae_baseline(graph: Graph, features: NodeFeatures, config: GAEConfig,
                       val_graph: Graph | None = None,
                       val_features: NodeFeatures | None = None) -> GraphAttentionEncoder:
    """Autoencoding baseline: binary cross-entropy on edges vs resampled
    non-edges through inner-product decoding.

    With a validation graph supplied, training stops early once the
    validation AUC fails to improve by ``min_delta`` for ``patience``
    epochs, and the best-AUC parameters are restored.
    """
    if graph.num_edges == 0:
        raise ConfigError("autoencoder training requires a graph with edges")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    encoder = GraphAttentionEncoder(GATConfig(
        in_dim=features.matrix.shape[1], hidden_dim=config.hidden_dim,
        out_dim=config.out_dim, dropout=config.dropout))
    seeded_init_(encoder, gen)
    opt = torch.optim.AdamW(encoder.parameters(), lr=config.learning_rate,
                            betas=(0.9, 0.999), weight_decay=0.0)

    x = torch.as_tensor(features.matrix, dtype=torch.float32)
    edges = message_edges(graph)
    positives = np.asarray(graph.edges, dtype=int)

    val_pairs = None
    if val_graph is not None and val_graph.num_edges > 0:
        if val_features is None:
            raise ConfigError("validation graph supplied without features")
        val_features = conform_features(val_features, features.matrix.shape[1])
        val_pos = np.asarray(val_graph.edges, dtype=int)
        val_neg = _sample_non_edges(val_graph, len(val_pos), np.random.default_rng(config.seed + 1))
        val_pairs = (val_pos, val_neg,
                     torch.as_tensor(val_features.matrix, dtype=torch.float32),
                     message_edges(val_graph))

    best_auc, best_state, stale = -np.inf, None, 0
    for _ in range(config.max_epochs):
        negatives = _sample_non_edges(graph, len(positives), rng)
        embs = encoder(x, edges, train_mode=True, generator=gen)
        pairs = np.concatenate([positives, negatives])
        logits = (embs[pairs[:, 0]] * embs[pairs[:, 1]]).sum(dim=1)
        labels = torch.cat([torch.ones(len(positives)), torch.zeros(len(negatives))])
        loss = F.binary_cross_entropy_with_logits(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()

        if val_pairs is not None:
            from .evaluation import auc_from_scores

            val_pos, val_neg, vx, vedges = val_pairs
            with torch.no_grad():
                vembs = encoder(vx, vedges).numpy()
            auc = auc_from_scores(inner_products(vembs, val_pos),
                                  inner_products(vembs, val_neg))
            if auc > best_auc + config.min_delta:
                best_auc, best_state, stale = auc, copy.deepcopy(encoder.state_dict()), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best_state is not None:
        encoder.load_state_dict(best_state)
    return encoder
