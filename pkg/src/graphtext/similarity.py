"""Graph-based node similarity and per-batch similarity distributions.

Two similarity measures are provided: cosine similarity between rows of
A @ A.T (the shared-neighbor profile of each node) and SimRank. Both
produce values in [0, 1] and are precomputed once per split; batch rows
are then sliced and normalized on demand during training.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .graph_store import Graph


class SimilarityKind(enum.IntEnum):
    MUTUAL_NEIGHBOR_COSINE = 0
    SIMRANK = 1


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    kind: SimilarityKind


@dataclass(frozen=True)
class BatchSimilarityRows:
    """Row-normalized similarity restricted to one batch.

    Rows whose raw sum is zero cannot be normalized; they are left
    all-zero and their indices recorded so target construction can fall
    back to a one-hot row.
    """

    rows: np.ndarray
    degenerate_rows: frozenset[int]


def mutual_neighbor_similarity(graph: Graph) -> SimilarityMatrix:
    """Cosine similarity between rows of A @ A.T.

    Only defined for undirected graphs. A node with no neighbors has a
    zero profile row and similarity 0 against every node, itself
    included.
    """
    if graph.directed:
        raise ValueError("mutual-neighbor similarity requires an undirected graph")
    a = graph.adjacency()
    m = a @ a.T
    norms = np.linalg.norm(m, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    sim = (m @ m.T) / np.outer(safe, safe)
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    np.clip(sim, 0.0, 1.0, out=sim)
    return SimilarityMatrix(sim, SimilarityKind.MUTUAL_NEIGHBOR_COSINE)


def simrank(graph: Graph, decay: float = 0.8, max_iters: int = 20, tol: float = 1e-4) -> SimilarityMatrix:
    """Fixed-point SimRank over in-neighbor sets.

    Undirected graphs use full neighbor sets. Iteration stops when the
    maximum entrywise change drops below ``tol`` or after ``max_iters``
    sweeps; the diagonal is pinned at 1 and nodes without neighbors keep
    off-diagonal similarity 0.
    """
    if not 0 < decay < 1:
        raise ValueError("decay must be in (0, 1)")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    n = graph.num_nodes
    a = graph.adjacency()
    indeg = a.sum(axis=0)
    w = np.divide(a, indeg, out=np.zeros_like(a), where=indeg > 0)
    s = np.eye(n)
    for _ in range(max_iters):
        nxt = decay * (w.T @ s @ w)
        np.fill_diagonal(nxt, 1.0)
        delta = np.max(np.abs(nxt - s)) if n else 0.0
        s = nxt
        if delta < tol:
            break
    np.clip(s, 0.0, 1.0, out=s)
    return SimilarityMatrix(s, SimilarityKind.SIMRANK)


def batch_similarity_rows(sim: SimilarityMatrix, batch_nodes) -> BatchSimilarityRows:
    """Slice the similarity matrix to a node-unique batch and normalize
    each row to sum to 1."""
    nodes = np.asarray(batch_nodes, dtype=int)
    if len(set(nodes.tolist())) != nodes.size:
        raise ValueError("batch contains duplicate nodes")
    n = sim.values.shape[0]
    if nodes.size and (nodes.min() < 0 or nodes.max() >= n):
        raise IndexError("batch node index out of range")
    sub = sim.values[np.ix_(nodes, nodes)].astype(np.float64, copy=True)
    sums = sub.sum(axis=1)
    degenerate = frozenset(int(i) for i in np.flatnonzero(sums <= 0))
    safe = np.where(sums > 0, sums, 1.0)
    rows = sub / safe[:, None]
    rows[sums <= 0, :] = 0.0
    return BatchSimilarityRows(rows, degenerate)


_SIM_MAGIC = b"CGSIM1"


def save_similarity(path, sim: SimilarityMatrix) -> None:
    """Dense binary export: magic, u32 node count, u8 kind, row-major f32."""
    values = np.ascontiguousarray(sim.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SIM_MAGIC)
        fh.write(struct.pack("<IB", values.shape[0], int(sim.kind)))
        fh.write(values.tobytes())


def load_similarity(path) -> SimilarityMatrix:
    blob = Path(path).read_bytes()
    head = len(_SIM_MAGIC)
    if blob[:head] != _SIM_MAGIC:
        raise DatasetError(f"{path}: bad magic for a similarity file")
    n, kind = struct.unpack_from("<IB", blob, head)
    body = blob[head + 5 :]
    if len(body) != n * n * 4:
        raise DatasetError(f"{path}: truncated similarity file")
    values = np.frombuffer(body, dtype="<f4").reshape(n, n).astype(np.float64)
    return SimilarityMatrix(values, SimilarityKind(kind))
