"""Dataset ingestion and a synthetic block-model corpus generator.

A dataset directory holds three newline-delimited JSON files:
``nodes.jsonl`` (id, label-or-null), ``edges.jsonl`` (src, dst by node
id), and ``texts.jsonl`` (text_id, node_id, text). The generator writes
the identical format, so downstream commands are source-agnostic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .graph_store import Graph


@dataclass(frozen=True)
class CorpusRecord:
    text_id: str
    node_id: str
    text: str


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with community-coupled token distributions."""

    communities: int = 4
    nodes_per_community: int = 25
    p_in: float = 0.3
    p_out: float = 0.02
    community_vocab: int = 40
    shared_vocab: int = 20
    texts_per_node: int = 5
    length_range: tuple[int, int] = (12, 24)
    seed: int = 0
    community_weight: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise DatasetError("need 0 <= p_out < p_in <= 1")
        if self.communities * self.nodes_per_community < 2:
            raise DatasetError("need at least 2 nodes")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise DatasetError("invalid text length range")
        if not 0.0 <= self.community_weight <= 1.0:
            raise DatasetError("community_weight must lie in [0, 1]")


def _parse_line(path: Path, lineno: int, line: str, required: dict[str, type]) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}:{lineno}: malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DatasetError(f"{path.name}:{lineno}: expected an object")
    for key, typ in required.items():
        if key not in obj:
            raise DatasetError(f"{path.name}:{lineno}: missing key {key!r}")
        if obj[key] is not None and not isinstance(obj[key], typ):
            raise DatasetError(f"{path.name}:{lineno}: key {key!r} must be a {typ.__name__}")
    return obj


def load_dataset(directory, directed: bool = False) -> tuple[Graph, list[CorpusRecord], dict[str, str | None]]:
    """Read a dataset directory into a referentially consistent triple of
    graph, corpus records, and node labels."""
    directory = Path(directory)
    for name in ("nodes.jsonl", "edges.jsonl", "texts.jsonl"):
        if not (directory / name).exists():
            raise DatasetError(f"{directory}: missing {name}")

    node_ids: list[str] = []
    labels: dict[str, str | None] = {}
    path = directory / "nodes.jsonl"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = _parse_line(path, lineno, line, {"id": str, "label": str})
            if obj["id"] in labels:
                raise DatasetError(f"{path.name}:{lineno}: duplicate node id {obj['id']!r}")
            node_ids.append(obj["id"])
            labels[obj["id"]] = obj["label"]
    index = {nid: i for i, nid in enumerate(node_ids)}

    edges: list[tuple[int, int]] = []
    path = directory / "edges.jsonl"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = _parse_line(path, lineno, line, {"src": str, "dst": str})
            for key in ("src", "dst"):
                if obj[key] not in index:
                    raise DatasetError(f"{path.name}:{lineno}: unknown node id {obj[key]!r}")
            edges.append((index[obj["src"]], index[obj["dst"]]))

    corpus: list[CorpusRecord] = []
    seen_texts: set[str] = set()
    path = directory / "texts.jsonl"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = _parse_line(path, lineno, line, {"text_id": str, "node_id": str, "text": str})
            if obj["node_id"] not in index:
                raise DatasetError(f"{path.name}:{lineno}: unknown node id {obj['node_id']!r}")
            if obj["text_id"] in seen_texts:
                raise DatasetError(f"{path.name}:{lineno}: duplicate text id {obj['text_id']!r}")
            seen_texts.add(obj["text_id"])
            corpus.append(CorpusRecord(obj["text_id"], obj["node_id"], obj["text"]))

    return Graph.build(node_ids, edges, directed), corpus, labels


def save_dataset(directory, graph: Graph, corpus, labels) -> None:
    """Write the three dataset files; inverse of load_dataset."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.jsonl", "w", encoding="utf-8") as fh:
        for nid in graph.node_ids:
            fh.write(json.dumps({"id": nid, "label": labels.get(nid)}) + "\n")
    with open(directory / "edges.jsonl", "w", encoding="utf-8") as fh:
        for src, dst in graph.edges:
            fh.write(json.dumps({"src": graph.node_ids[src], "dst": graph.node_ids[dst]}) + "\n")
    with open(directory / "texts.jsonl", "w", encoding="utf-8") as fh:
        for rec in corpus:
            fh.write(json.dumps({"text_id": rec.text_id, "node_id": rec.node_id, "text": rec.text}) + "\n")


def generate_sbm_corpus(spec: SbmSpec) -> tuple[Graph, list[CorpusRecord], dict[str, str]]:
    """Sample an undirected block-model graph plus community-flavored texts.

    Each node's texts draw tokens from its community's vocabulary with
    probability ``community_weight`` and from the shared vocabulary
    otherwise; labels are community ids. Deterministic per seed.
    """
    rng = np.random.default_rng(spec.seed)
    k, n = spec.communities, spec.nodes_per_community
    total = k * n
    community = np.repeat(np.arange(k), n)
    node_ids = [f"n{i:04d}" for i in range(total)]

    edges = []
    for i in range(total):
        draws = rng.random(total - i - 1)
        for offset, r in enumerate(draws):
            j = i + 1 + offset
            p = spec.p_in if community[i] == community[j] else spec.p_out
            if r < p:
                edges.append((i, j))
    graph = Graph.build(node_ids, edges, directed=False)

    corpus = []
    lo, hi = spec.length_range
    for i in range(total):
        c = int(community[i])
        for t in range(spec.texts_per_node):
            length = int(rng.integers(lo, hi + 1))
            from_comm = rng.random(length) < spec.community_weight
            comm_picks = rng.integers(spec.community_vocab, size=length)
            shared_picks = rng.integers(spec.shared_vocab, size=length)
            tokens = [
                f"c{c}w{comm_picks[p]}" if from_comm[p] else f"shw{shared_picks[p]}"
                for p in range(length)
            ]
            corpus.append(CorpusRecord(f"{node_ids[i]}_t{t}", node_ids[i], " ".join(tokens)))

    labels = {node_ids[i]: f"c{community[i]}" for i in range(total)}
    return graph, corpus, labels
