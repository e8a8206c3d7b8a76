"""Graphs, node-level data splits, and spectral node features.

Nodes are referenced by opaque string ids; all operations work on integer
indices into the id list. Undirected graphs store each edge exactly once
as (min_index, max_index). Everything here is immutable after
construction, so instances can be shared freely across threads.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg

from .errors import ConfigError, DatasetError

# Above this node count the adjacency SVD switches to sparse iteration.
_DENSE_SVD_LIMIT = 2048

_FEATURES_MAGIC = b"CGFEAT1"


@dataclass(frozen=True)
class Graph:
    """Immutable graph over string node ids with integer edge endpoints."""

    node_ids: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    directed: bool

    @classmethod
    def build(cls, node_ids, edges, directed: bool = False) -> "Graph":
        """Validate endpoints and canonicalize the edge list.

        Self-loops and duplicate edges are dropped silently; undirected
        edges are stored with src <= dst.
        """
        ids = tuple(str(n) for n in node_ids)
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate node ids")
        n = len(ids)
        seen: set[tuple[int, int]] = set()
        canon: list[tuple[int, int]] = []
        for src, dst in edges:
            src, dst = int(src), int(dst)
            if not (0 <= src < n and 0 <= dst < n):
                raise DatasetError(f"edge ({src}, {dst}) out of range for {n} nodes")
            if src == dst:
                continue
            if not directed and src > dst:
                src, dst = dst, src
            if (src, dst) in seen:
                continue
            seen.add((src, dst))
            canon.append((src, dst))
        return cls(ids, tuple(canon), bool(directed))

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def _id_index(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def index_of(self, node_id: str) -> int:
        try:
            return self._id_index[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def has_edge(self, src: int, dst: int) -> bool:
        if not self.directed and src > dst:
            src, dst = dst, src
        return (src, dst) in self._edge_set

    @cached_property
    def _edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.edges)

    def adjacency(self, dtype=np.float64) -> np.ndarray:
        """Dense adjacency matrix; symmetric for undirected graphs."""
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=dtype)
        for src, dst in self.edges:
            a[src, dst] = 1
            if not self.directed:
                a[dst, src] = 1
        return a

    def sparse_adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        if not self.edges:
            return sp.csr_matrix((n, n))
        rows, cols = zip(*self.edges)
        rows, cols = list(rows), list(cols)
        if not self.directed:
            rows, cols = rows + cols, cols + rows
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def in_neighbor_sets(self) -> list[set[int]]:
        """In-neighbors per node for directed graphs, all neighbors otherwise."""
        sets: list[set[int]] = [set() for _ in range(self.num_nodes)]
        for src, dst in self.edges:
            sets[dst].add(src)
            if not self.directed:
                sets[src].add(dst)
        return sets


@dataclass(frozen=True)
class DataSplit:
    """Disjoint train/val/test node sets with per-split induced edges.

    Node indices refer to the parent graph; induced edge lists only keep
    edges whose endpoints fall inside the same split.
    """

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    induced_edges: dict[str, tuple[tuple[int, int], ...]]

    def nodes(self, which: str) -> tuple[int, ...]:
        return {"train": self.train, "val": self.val, "test": self.test}[which]


@dataclass(frozen=True)
class NodeFeatures:
    """Per-node feature matrix from a truncated adjacency SVD."""

    matrix: np.ndarray
    rank: int


def make_splits(graph: Graph, fractions: tuple[float, float, float], seed: int) -> DataSplit:
    """Partition nodes into train/val/test by seeded shuffle and
    largest-remainder rounding of the requested fractions."""
    fracs = np.asarray(fractions, dtype=np.float64)
    if fracs.shape != (3,) or np.any(fracs <= 0):
        raise ConfigError("fractions must be three positive numbers")
    if abs(fracs.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fracs.sum():.12f}")
    n = graph.num_nodes
    if n < 3:
        raise ConfigError("graph must have at least 3 nodes to split")

    raw = fracs * n
    sizes = np.floor(raw).astype(int)
    remainder = raw - sizes
    for idx in np.argsort(-remainder, kind="stable")[: n - sizes.sum()]:
        sizes[idx] += 1
    if np.any(sizes == 0):
        raise ConfigError(f"splits of sizes {sizes.tolist()} include an empty split; graph too small")

    order = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(int(i) for i in order[: sizes[0]]))
    val = tuple(sorted(int(i) for i in order[sizes[0] : sizes[0] + sizes[1]]))
    test = tuple(sorted(int(i) for i in order[sizes[0] + sizes[1] :]))

    induced = {}
    for name, members in (("train", train), ("val", val), ("test", test)):
        inside = set(members)
        induced[name] = tuple(e for e in graph.edges if e[0] in inside and e[1] in inside)
    return DataSplit(train, val, test, induced)


def split_graph(graph: Graph, split: DataSplit, which: str) -> Graph:
    """Induced subgraph over one split, relabeled to local indices.

    Local index order follows ascending parent index, and node ids are
    preserved so rows can be mapped back through ``index_of``.
    """
    members = split.nodes(which)
    local = {orig: i for i, orig in enumerate(members)}
    ids = tuple(graph.node_ids[i] for i in members)
    edges = tuple((local[s], local[d]) for s, d in split.induced_edges[which])
    return Graph.build(ids, edges, graph.directed)


def _adjacency_svd(graph: Graph, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k singular triplets of the adjacency, descending, with the
    largest-magnitude entry of each left singular vector made positive."""
    n = graph.num_nodes
    k = min(k, n)
    if n <= _DENSE_SVD_LIMIT or k >= n:
        u, s, vt = np.linalg.svd(graph.adjacency(), full_matrices=False)
        u, s, vt = u[:, :k], s[:k], vt[:k]
    else:
        u, s, vt = scipy.sparse.linalg.svds(graph.sparse_adjacency(), k=k)
        desc = np.argsort(-s, kind="stable")
        u, s, vt = u[:, desc], s[desc], vt[desc]
    for j in range(u.shape[1]):
        pivot = np.argmax(np.abs(u[:, j]))
        if u[pivot, j] < 0:
            u[:, j] = -u[:, j]
            vt[j] = -vt[j]
    return u, s, vt


def svd_features(graph: Graph, rank: int = 64) -> NodeFeatures:
    """Node features U * sigma from the truncated SVD of the adjacency.

    The rank is clamped to the node count; columns whose singular value
    is numerically zero are exact zeros (an edgeless graph yields an
    all-zero matrix).
    """
    if rank < 1:
        raise ConfigError("svd rank must be >= 1")
    if graph.num_nodes == 0:
        raise ConfigError("cannot compute features of an empty graph")
    k = min(rank, graph.num_nodes)
    u, s, _ = _adjacency_svd(graph, k)
    cutoff = s[0] * 1e-12 if s.size and s[0] > 0 else 0.0
    feats = u * s
    feats[:, s <= cutoff] = 0.0
    return NodeFeatures(matrix=feats, rank=feats.shape[1])


def conform_features(features: NodeFeatures, width: int) -> NodeFeatures:
    """Zero-pad or truncate the feature matrix to a fixed column count.

    Splits smaller than the SVD rank produce narrower matrices; the node
    encoder needs one fixed input width across splits.
    """
    mat = features.matrix
    if mat.shape[1] == width:
        return features
    if mat.shape[1] > width:
        return NodeFeatures(mat[:, :width].copy(), width)
    padded = np.zeros((mat.shape[0], width), dtype=mat.dtype)
    padded[:, : mat.shape[1]] = mat
    return NodeFeatures(padded, width)


def save_splits(path, graph: Graph, split: DataSplit) -> None:
    """Write node-id lists per split as JSON."""
    payload = {
        name: [graph.node_ids[i] for i in split.nodes(name)]
        for name in ("train", "val", "test")
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_splits(path, graph: Graph) -> DataSplit:
    """Read splits.json and rebuild the induced edge lists."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed splits file: {exc}") from exc
    sets = {}
    for name in ("train", "val", "test"):
        if name not in payload:
            raise DatasetError(f"{path}: missing split {name!r}")
        sets[name] = tuple(sorted(graph.index_of(nid) for nid in payload[name]))
    members = sets["train"] + sets["val"] + sets["test"]
    if sorted(members) != list(range(graph.num_nodes)):
        raise DatasetError(f"{path}: splits do not partition the node set")
    induced = {}
    for name, ms in sets.items():
        inside = set(ms)
        induced[name] = tuple(e for e in graph.edges if e[0] in inside and e[1] in inside)
    return DataSplit(sets["train"], sets["val"], sets["test"], induced)


def save_features(path, features: NodeFeatures) -> None:
    """Binary feature dump: magic, u32 rows, u32 cols, row-major f32."""
    mat = np.ascontiguousarray(features.matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURES_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def load_features(path) -> NodeFeatures:
    blob = Path(path).read_bytes()
    head = len(_FEATURES_MAGIC)
    if blob[:head] != _FEATURES_MAGIC:
        raise DatasetError(f"{path}: bad magic for a feature file")
    rows, cols = struct.unpack_from("<II", blob, head)
    body = blob[head + 8 :]
    if len(body) != rows * cols * 4:
        raise DatasetError(f"{path}: truncated feature file")
    mat = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return NodeFeatures(mat, cols)
