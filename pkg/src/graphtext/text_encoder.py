"""Tokenizer and a small from-scratch transformer text encoder.

The encoder is a 2-layer pre-LN transformer with learned absolute
positions, run either causally or bidirectionally via the attention
mask. Token states are mean-pooled over real (unmasked) positions to get
one vector per text. An optional language-modeling head supports
perplexity scoring and unimodal pretraining.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, MASK_TOKEN = "<pad>", "<s>", "</s>", "<mask>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, MASK_TOKEN)
PAD_ID, BOS_ID, EOS_ID, MASK_ID = 0, 1, 2, 3
UNK_TOKEN = "<unk>"


class TokenizerMode(str, enum.Enum):
    WHITESPACE = "whitespace"
    CHARACTER = "character"


@dataclass(frozen=True)
class Tokenizer:
    """Fixed-vocabulary tokenizer; ids 0..3 are pad/start/end/mask."""

    vocab: tuple[str, ...]
    mode: TokenizerMode = TokenizerMode.WHITESPACE

    def __post_init__(self):
        if tuple(self.vocab[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the four reserved special tokens")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocabulary contains duplicate tokens")

    @cached_property
    def _index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def size(self) -> int:
        return len(self.vocab)

    @property
    def unk_id(self) -> int:
        return self._index.get(UNK_TOKEN, MASK_ID)

    @classmethod
    def train(cls, texts, mode: TokenizerMode = TokenizerMode.WHITESPACE,
              min_count: int = 2, max_types: int = 8192) -> "Tokenizer":
        """Build a frequency-cut vocabulary from a corpus."""
        mode = TokenizerMode(mode)
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(_split_text(text, mode))
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count),
            key=lambda t: (-counts[t], t),
        )[:max_types]
        return cls(SPECIAL_TOKENS + (UNK_TOKEN,) + tuple(kept), mode)

    def encode(self, text: str) -> list[int]:
        """Token ids wrapped in start/end; unknown tokens map to <unk>."""
        idx = self._index
        unk = self.unk_id
        return [BOS_ID] + [idx.get(t, unk) for t in _split_text(text, self.mode)] + [EOS_ID]

    def decode(self, ids) -> str:
        sep = " " if self.mode is TokenizerMode.WHITESPACE else ""
        return sep.join(self.vocab[i] for i in ids if i >= 4)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, mode: TokenizerMode = TokenizerMode.WHITESPACE) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines), TokenizerMode(mode))


def _split_text(text: str, mode: TokenizerMode) -> list[str]:
    return text.split() if mode is TokenizerMode.WHITESPACE else list(text)


@dataclass(frozen=True)
class TextBatch:
    """Padded id matrix plus a mask marking real (non-pad) positions."""

    ids: torch.Tensor
    mask: torch.Tensor


def tokenize(tokenizer: Tokenizer, texts, max_len: int) -> TextBatch:
    """Encode, truncate to ``max_len`` keeping the end token, right-pad."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    seqs = []
    for text in texts:
        ids = tokenizer.encode(text)
        if len(ids) > max_len:
            ids = ids[: max_len - 1] + [EOS_ID]
        seqs.append(ids)
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return TextBatch(ids, mask)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    ffn_dim: int = 128
    max_len: int = 64
    causal: bool = True

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape

        def heads_first(t):
            return t.view(b, length, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = heads_first(self.wq(x)), heads_first(self.wk(x)), heads_first(self.wv(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allowed[:, None, :, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.wo(out.transpose(1, 2).reshape(b, length, d))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, cfg.d_model)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class TransformerTextEncoder(nn.Module):
    """Pre-LN transformer producing per-token states.

    The encoder itself has no stochastic layers; embedding-level dropout
    is applied downstream in the adapters.
    """

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_len, config.d_model)
        self.blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.d_model)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, length = ids.shape
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        if int(ids.max()) >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary range")
        # Pad positions are excluded as attention keys; causal mode also
        # restricts keys to positions <= the query position.
        allowed = mask[:, None, :].expand(b, length, length)
        if self.config.causal:
            tri = torch.ones(length, length, dtype=torch.bool, device=ids.device).tril()
            allowed = allowed & tri
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(length, device=ids.device))
        for block in self.blocks:
            x = block(x, allowed)
        return self.ln_f(x)


def mean_pool(states: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of token states over unmasked positions only."""
    m = mask.to(states.dtype)
    return (states * m[..., None]).sum(dim=1) / m.sum(dim=1, keepdim=True)


def encode_texts(encoder: TransformerTextEncoder, batch: TextBatch,
                 train_mode: bool = False) -> torch.Tensor:
    """Text-level embeddings: transformer forward pass then mean pooling.

    ``train_mode`` is accepted for interface symmetry with the node
    encoder; this toy encoder is deterministic either way.
    """
    del train_mode
    return mean_pool(encoder(batch.ids, batch.mask), batch.mask)


class LanguageModelHead(nn.Linear):
    """Projection from token states to vocabulary logits."""

    def __init__(self, d_model: int, vocab_size: int):
        super().__init__(d_model, vocab_size)


def per_text_cross_entropy(logits: torch.Tensor, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-text mean next-token cross-entropy over non-pad targets."""
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    targets = ids[:, 1:]
    nll = -logp.gather(-1, targets[..., None]).squeeze(-1)
    m = mask[:, 1:].to(nll.dtype)
    return (nll * m).sum(dim=1) / m.sum(dim=1)


def lm_perplexity(encoder: TransformerTextEncoder, head: LanguageModelHead, batch: TextBatch) -> float:
    """exp of the per-text mean cross-entropy, averaged over texts."""
    if not encoder.config.causal:
        raise ValueError("perplexity requires a causal encoder")
    with torch.no_grad():
        ce = per_text_cross_entropy(head(encoder(batch.ids, batch.mask)), batch.ids, batch.mask)
    return float(torch.exp(ce.mean()))


def train_causal_lm(encoder: TransformerTextEncoder, head: LanguageModelHead,
                    batches: list[TextBatch], epochs: int, lr: float = 5e-5,
                    grad_clip: float = 1.0) -> list[float]:
    """Next-token fine-tuning of encoder plus head; returns epoch losses."""
    if not encoder.config.causal:
        raise ValueError("next-token training requires a causal encoder")
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=0.0)
    history = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for batch in batches:
            loss = per_text_cross_entropy(head(encoder(batch.ids, batch.mask)), batch.ids, batch.mask).mean()
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
            opt.step()
            total += loss.item()
            count += 1
        history.append(total / max(count, 1))
    return history


def train_masked_lm(encoder: TransformerTextEncoder, head: LanguageModelHead,
                    batches: list[TextBatch], epochs: int, lr: float = 5e-5,
                    mask_prob: float = 0.15, seed: int = 0,
                    grad_clip: float = 1.0) -> list[float]:
    """Masked-token pretraining for the bidirectional variant."""
    if encoder.config.causal:
        raise ValueError("masked-token training requires a bidirectional encoder")
    gen = torch.Generator().manual_seed(seed)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=0.0)
    history = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for batch in batches:
            eligible = batch.mask & (batch.ids >= 4)
            lottery = torch.rand(batch.ids.shape, generator=gen) < mask_prob
            chosen = eligible & lottery
            if not bool(chosen.any()):
                continue
            corrupted = batch.ids.masked_fill(chosen, MASK_ID)
            logits = head(encoder(corrupted, batch.mask))
            loss = F.cross_entropy(logits[chosen], batch.ids[chosen])
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
            opt.step()
            total += loss.item()
            count += 1
        history.append(total / max(count, 1))
    return history
