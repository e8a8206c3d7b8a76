"""Adapters, learnable temperature, and the batch-wise contrastive loss.

Both encoders feed an adapter (two fully connected layers with a GeLU,
then layer norm and dropout) mapping into a shared embedding space. The
logit matrix holds pairwise cosine similarities scaled by exp(tau), and
the loss averages cross-entropies along rows (texts over nodes) and
columns (nodes over texts) against target distributions that mix the
true one-hot correspondence with a graph-similarity distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError
from .similarity import BatchSimilarityRows
from .torchutil import seeded_dropout

TAU_MIN = -math.log(100.0)
TAU_MAX = math.log(100.0)


@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int
    out_dim: int
    dropout: float = 0.3


class Adapter(nn.Module):
    """linear -> GeLU -> linear -> layer norm -> dropout (train only)."""

    def __init__(self, config: AdapterConfig):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.in_dim, config.out_dim)
        self.fc2 = nn.Linear(config.out_dim, config.out_dim)
        self.norm = nn.LayerNorm(config.out_dim)

    def forward(self, x: torch.Tensor, train_mode: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        if x.shape[-1] != self.config.in_dim:
            raise ValueError(f"adapter expects width {self.config.in_dim}, got {x.shape[-1]}")
        h = self.norm(self.fc2(F.gelu(self.fc1(x))))
        return seeded_dropout(h, self.config.dropout, train_mode, generator)


class Temperature(nn.Module):
    """Trainable log-temperature, projected into [lo, hi] after each step."""

    def __init__(self, init: float = 3.5, lo: float = TAU_MIN, hi: float = TAU_MAX):
        super().__init__()
        if not lo <= init <= hi:
            raise ValueError(f"tau init {init} outside clamp bounds ({lo}, {hi})")
        self.log_temp = nn.Parameter(torch.tensor(float(init)))
        self.lo = lo
        self.hi = hi

    @property
    def value(self) -> float:
        return float(self.log_temp.detach())

    def project_(self) -> None:
        with torch.no_grad():
            self.log_temp.clamp_(self.lo, self.hi)


def cosine_logit_matrix(text_embs: torch.Tensor, node_embs: torch.Tensor,
                        temperature: Temperature) -> torch.Tensor:
    """C[i, j] = cosine(text_i, node_j) * exp(tau); rows are texts."""
    tn = text_embs.norm(dim=1, keepdim=True)
    nn_ = node_embs.norm(dim=1, keepdim=True)
    if bool((tn < 1e-12).any()) or bool((nn_ < 1e-12).any()):
        raise NumericalError("zero-norm embedding row; aborting batch")
    return (text_embs / tn) @ (node_embs / nn_).T * torch.exp(temperature.log_temp)


@dataclass(frozen=True)
class TargetDistributions:
    """Row-stochastic targets for the text side (rows of C) and the node
    side (columns of C)."""

    text_targets: np.ndarray
    node_targets: np.ndarray
    alpha: float


def _mixed_rows(n: int, alpha: float, sim_rows: BatchSimilarityRows | None) -> np.ndarray:
    eye = np.eye(n)
    if alpha == 0.0:
        return eye
    rows = (1.0 - alpha) * eye + alpha * sim_rows.rows
    # Degenerate similarity rows cannot be normalized; keep the exact
    # one-hot limit for those batch items.
    for i in sim_rows.degenerate_rows:
        rows[i] = eye[i]
    return rows


def target_distributions(batch_nodes, alpha: float,
                         text_sim_rows: BatchSimilarityRows | None = None,
                         node_sim_rows: BatchSimilarityRows | None = None) -> TargetDistributions:
    """Mix one-hot correspondence targets with similarity rows, weight alpha."""
    nodes = list(batch_nodes)
    if len(set(nodes)) != len(nodes):
        raise ValueError("batch contains duplicate nodes")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha > 0.0 and (text_sim_rows is None or node_sim_rows is None):
        raise ValueError("alpha > 0 requires similarity rows for both modalities")
    n = len(nodes)
    return TargetDistributions(
        text_targets=_mixed_rows(n, alpha, text_sim_rows),
        node_targets=_mixed_rows(n, alpha, node_sim_rows),
        alpha=alpha,
    )


def contrastive_loss(logits: torch.Tensor, targets: TargetDistributions) -> torch.Tensor:
    """Average of row-wise and column-wise cross-entropies against the
    target distributions, computed through a stable log-softmax."""
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ValueError("logit matrix must be square")
    if not bool(torch.isfinite(logits).all()):
        raise NumericalError("non-finite logits")
    n = logits.shape[0]
    d_text = torch.as_tensor(targets.text_targets, dtype=logits.dtype, device=logits.device)
    d_node = torch.as_tensor(targets.node_targets, dtype=logits.dtype, device=logits.device)
    for d in (d_text, d_node):
        if d.shape != logits.shape:
            raise ValueError("target shape does not match logits")
        if float((d.sum(dim=1) - 1.0).abs().max()) > 1e-6:
            raise ValueError("target rows must sum to 1")
    logp_rows = F.log_softmax(logits, dim=1)
    logp_cols = F.log_softmax(logits, dim=0)
    return -((d_text * logp_rows).sum() + (d_node * logp_cols.T).sum()) / (2 * n)
