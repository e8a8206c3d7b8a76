"""Joint training loop: node-unique batching, optimizer, checkpointing.

Each step encodes one batch of texts, runs the node encoder over the
whole training split graph, adapts both embeddings into the shared
space, and backpropagates the contrastive loss with global gradient
clipping and a temperature projection. Runs are bit-reproducible for a
fixed seed in single-threaded numeric mode.
"""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .contrastive import (Adapter, AdapterConfig, Temperature, contrastive_loss,
                          cosine_logit_matrix, target_distributions)
from .datasets import CorpusRecord
from .errors import ConfigError, DatasetError, NumericalError
from .graph_store import Graph, NodeFeatures
from .node_encoder import GATConfig, GraphAttentionEncoder, message_edges
from .similarity import SimilarityMatrix, batch_similarity_rows
from .text_encoder import (TextBatch, TextEncoderConfig, Tokenizer,
                           TransformerTextEncoder, encode_texts)
from .torchutil import clip_gradients_, global_grad_norm, seeded_init_

CHECKPOINT_MAGIC = b"CGCKPT1"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 36
    learning_rate: float = 1e-4
    max_epochs: int = 10
    grad_clip_norm: float = 1.0
    alpha: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    dropout: float = 0.3
    seed: int = 0
    tau_init: float = 3.5
    directed: bool = False
    embed_dim: int = 64
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2; size-1 batches carry zero contrastive signal")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.alpha > 0.0 and self.directed:
            raise ConfigError(
                "alpha > 0 requires an undirected graph; no directed similarity function is defined"
            )
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.grad_clip_norm <= 0:
            raise ConfigError("learning_rate, max_epochs and grad_clip_norm must be positive")


@dataclass(frozen=True)
class SplitData:
    """Everything the loop needs for one split: graph, features, corpus."""

    graph: Graph
    features: NodeFeatures
    records: tuple[CorpusRecord, ...]
    similarity: SimilarityMatrix | None = None

    @classmethod
    def build(cls, graph: Graph, features: NodeFeatures, records,
              similarity: SimilarityMatrix | None = None) -> "SplitData":
        for rec in records:
            graph.index_of(rec.node_id)
        return cls(graph, features, tuple(records), similarity)

    @property
    def pairs(self) -> list[tuple[int, str]]:
        return [(self.graph.index_of(r.node_id), r.text_id) for r in self.records]


class DualEncoder(torch.nn.Module):
    """Text encoder, node encoder, both adapters, and the temperature."""

    def __init__(self, text_cfg: TextEncoderConfig, node_cfg: GATConfig,
                 embed_dim: int = 64, adapter_dropout: float = 0.3, tau_init: float = 3.5):
        super().__init__()
        self.text_cfg = text_cfg
        self.node_cfg = node_cfg
        self.embed_dim = embed_dim
        self.adapter_dropout = adapter_dropout
        self.text_encoder = TransformerTextEncoder(text_cfg)
        self.node_encoder = GraphAttentionEncoder(node_cfg)
        self.text_adapter = Adapter(AdapterConfig(text_cfg.d_model, embed_dim, adapter_dropout))
        self.node_adapter = Adapter(AdapterConfig(node_cfg.out_dim, embed_dim, adapter_dropout))
        self.temperature = Temperature(tau_init)

    def init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        tau = self.temperature.value
        seeded_init_(self, gen)
        with torch.no_grad():
            self.temperature.log_temp.fill_(tau)

    def embed_texts(self, batch: TextBatch, train_mode: bool = False,
                    generator: torch.Generator | None = None) -> torch.Tensor:
        pooled = encode_texts(self.text_encoder, batch, train_mode)
        return self.text_adapter(pooled, train_mode, generator)

    def embed_nodes(self, features: torch.Tensor, edges: torch.Tensor,
                    train_mode: bool = False,
                    generator: torch.Generator | None = None) -> torch.Tensor:
        h = self.node_encoder(features, edges, train_mode, generator)
        return self.node_adapter(h, train_mode, generator)

    def manifest_entry(self) -> dict:
        return {
            "text": asdict(self.text_cfg),
            "node": asdict(self.node_cfg),
            "embed_dim": self.embed_dim,
            "adapter_dropout": self.adapter_dropout,
        }

    @classmethod
    def from_manifest(cls, model_entry: dict, tau_init: float = 3.5) -> "DualEncoder":
        return cls(TextEncoderConfig(**model_entry["text"]), GATConfig(**model_entry["node"]),
                   embed_dim=model_entry["embed_dim"],
                   adapter_dropout=model_entry["adapter_dropout"], tau_init=tau_init)


def build_epoch_batches(pairs: Sequence[tuple[int, str]], batch_size: int,
                        seed: int) -> list[list[tuple[int, str]]]:
    """Node-unique batches by seeded round-robin interleaving.

    Nodes are shuffled, each node's texts are shuffled, and the texts are
    interleaved one per node per pass. Consecutive slices of
    ``batch_size`` become batches; inside a slice only the first
    occurrence of each node survives.
    """
    if not pairs:
        raise ConfigError("cannot batch an empty pair list")
    rng = np.random.default_rng(seed)
    by_node: dict[int, list[tuple[int, str]]] = {}
    for node, text_id in pairs:
        by_node.setdefault(node, []).append((node, text_id))
    nodes = sorted(by_node)
    order = [nodes[i] for i in rng.permutation(len(nodes))]
    queues = {}
    for node in order:
        texts = by_node[node]
        queues[node] = [texts[i] for i in rng.permutation(len(texts))]

    interleaved: list[tuple[int, str]] = []
    round_idx = 0
    while True:
        emitted = False
        for node in order:
            if round_idx < len(queues[node]):
                interleaved.append(queues[node][round_idx])
                emitted = True
        if not emitted:
            break
        round_idx += 1

    batches = []
    for start in range(0, len(interleaved), batch_size):
        chunk = interleaved[start : start + batch_size]
        seen: set[int] = set()
        batch = []
        for node, text_id in chunk:
            if node in seen:
                continue
            seen.add(node)
            batch.append((node, text_id))
        batches.append(batch)
    return batches


@dataclass(frozen=True)
class Checkpoint:
    tensors: dict[str, np.ndarray]
    manifest: dict


@dataclass(frozen=True)
class StepInfo:
    epoch: int
    batch_index: int
    loss: float
    grad_norm: float
    log_temperature: float
    batch_nodes: tuple[int, ...]


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[dict] = field(default_factory=list)


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**31 - 1)


def _snapshot(model: DualEncoder, config: TrainConfig, epoch: int,
              history: list[dict], tokenizer: Tokenizer) -> Checkpoint:
    tensors = {
        name: p.detach().cpu().numpy().astype(np.float32).copy()
        for name, p in model.named_parameters()
    }
    cfg = asdict(config)
    cfg["adam_betas"] = list(config.adam_betas)
    manifest = {
        "format": 1,
        "epoch": epoch,
        "loss_history": copy.deepcopy(history),
        "train_config": cfg,
        "model": model.manifest_entry(),
        "vocabulary": list(tokenizer.vocab),
        "tokenizer_mode": tokenizer.mode.value,
    }
    return Checkpoint(tensors, manifest)


def _assemble_batch(token_ids: dict[str, list[int]], batch: list[tuple[int, str]],
                    max_len: int) -> TextBatch:
    seqs = []
    for _, text_id in batch:
        ids = token_ids[text_id]
        if len(ids) > max_len:
            ids = ids[: max_len - 1] + [ids[-1]]
        seqs.append(ids)
    width = max(len(s) for s in seqs)
    ids = torch.zeros((len(seqs), width), dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return TextBatch(ids, mask)


def _batch_loss(model: DualEncoder, batch: list[tuple[int, str]], token_ids: dict,
                feats: torch.Tensor, edges: torch.Tensor, alpha: float,
                similarity: SimilarityMatrix | None, train_mode: bool,
                generator: torch.Generator | None) -> torch.Tensor:
    nodes = [n for n, _ in batch]
    text_batch = _assemble_batch(token_ids, batch, model.text_cfg.max_len)
    t_emb = model.embed_texts(text_batch, train_mode, generator)
    n_emb = model.embed_nodes(feats, edges, train_mode, generator)[nodes]
    logits = cosine_logit_matrix(t_emb, n_emb, model.temperature)
    rows = batch_similarity_rows(similarity, nodes) if alpha > 0 else None
    targets = target_distributions(nodes, alpha, rows, rows)
    return contrastive_loss(logits, targets)


def train_joint(config: TrainConfig, model: DualEncoder, tokenizer: Tokenizer,
                train: SplitData, val: SplitData | None = None,
                on_step: Callable[[StepInfo], None] | None = None,
                start_epoch: int = 0, prior_history: list[dict] | None = None) -> TrainResult:
    """Run the contrastive loop for ``config.max_epochs`` epochs.

    Returns the final checkpoint, the best-validation-loss checkpoint
    (the final one when no validation split is given), and the per-epoch
    loss history.
    """
    if config.alpha > 0 and train.similarity is None:
        raise ConfigError("alpha > 0 requires a precomputed similarity matrix for the train split")
    if len({n for n, _ in train.pairs}) < 2:
        raise ConfigError("training requires at least 2 distinct nodes with texts")

    torch.set_num_threads(config.threads)
    gen = torch.Generator().manual_seed(_epoch_seed(config.seed, 2**20))
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            betas=config.adam_betas, weight_decay=config.weight_decay)

    token_ids = {r.text_id: tokenizer.encode(r.text) for r in train.records}
    feats = torch.as_tensor(train.features.matrix, dtype=torch.float32)
    edges = message_edges(train.graph)
    pairs = train.pairs

    val_state = None
    if val is not None and val.records:
        if config.alpha > 0 and val.similarity is None:
            raise ConfigError("alpha > 0 requires a similarity matrix for the validation split")
        val_state = (
            {r.text_id: tokenizer.encode(r.text) for r in val.records},
            torch.as_tensor(val.features.matrix, dtype=torch.float32),
            message_edges(val.graph),
            build_epoch_batches(val.pairs, config.batch_size, seed=_epoch_seed(config.seed, 2**19)),
        )

    history = list(prior_history or [])
    best_val, best_ckpt = np.inf, None
    epoch = start_epoch
    for epoch in range(start_epoch, start_epoch + config.max_epochs):
        batches = build_epoch_batches(pairs, config.batch_size, seed=_epoch_seed(config.seed, epoch))
        total = 0.0
        for b_idx, batch in enumerate(batches):
            try:
                loss = _batch_loss(model, batch, token_ids, feats, edges,
                                   config.alpha, train.similarity, True, gen)
            except NumericalError as exc:
                raise NumericalError(f"{exc} (epoch {epoch}, batch {b_idx})") from exc
            if not bool(torch.isfinite(loss)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            opt.zero_grad()
            loss.backward()
            clip_gradients_(model.parameters(), config.grad_clip_norm)
            opt.step()
            model.temperature.project_()
            total += loss.item()
            if on_step is not None:
                on_step(StepInfo(
                    epoch=epoch, batch_index=b_idx, loss=loss.item(),
                    grad_norm=global_grad_norm(model.parameters()),
                    log_temperature=model.temperature.value,
                    batch_nodes=tuple(n for n, _ in batch)))
        entry = {"epoch": epoch, "train_loss": total / len(batches)}

        if val_state is not None:
            v_tokens, v_feats, v_edges, v_batches = val_state
            with torch.no_grad():
                v_losses = [
                    float(_batch_loss(model, b, v_tokens, v_feats, v_edges,
                                      config.alpha, val.similarity, False, None))
                    for b in v_batches
                ]
            entry["val_loss"] = float(np.mean(v_losses))
            if entry["val_loss"] < best_val:
                best_val = entry["val_loss"]
                best_ckpt = _snapshot(model, config, epoch + 1, history + [entry], tokenizer)
        history.append(entry)

    final = _snapshot(model, config, epoch + 1, history, tokenizer)
    return TrainResult(final=final, best=best_ckpt or final, history=history)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u32 manifest length, manifest JSON, u32
    tensor count, then per tensor: u16 name length, name, u8 rank,
    u32 dims, little-endian f32 payload."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    manifest = json.dumps(ckpt.manifest, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        # np.asarray keeps 0-dim scalars 0-dim (ascontiguousarray would
        # promote them to shape (1,) and break the round trip).
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    view = io.BytesIO(blob)

    def read(n: int) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise DatasetError(f"{path}: truncated checkpoint")
        return chunk

    if read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: bad checkpoint magic")
    (mlen,) = struct.unpack("<I", read(4))
    try:
        manifest = json.loads(read(mlen).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"{path}: corrupt manifest: {exc}") from exc
    (count,) = struct.unpack("<I", read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", read(1))
        dims = struct.unpack(f"<{rank}I", read(4 * rank)) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(read(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()
    if view.read(1):
        raise DatasetError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(tensors, manifest)


def restore_dual_encoder(ckpt: Checkpoint) -> tuple[DualEncoder, Tokenizer]:
    """Rebuild the model and tokenizer a checkpoint was saved from."""
    from .text_encoder import TokenizerMode

    manifest = ckpt.manifest
    model = DualEncoder.from_manifest(manifest["model"],
                                      tau_init=manifest["train_config"]["tau_init"])
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.tensors):
        missing = set(params).symmetric_difference(ckpt.tensors)
        raise DatasetError(f"checkpoint parameter names do not match the model: {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            arr = ckpt.tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise DatasetError(f"shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    tokenizer = Tokenizer(tuple(manifest["vocabulary"]), TokenizerMode(manifest["tokenizer_mode"]))
    return model, tokenizer
