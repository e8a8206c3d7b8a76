"""Small torch helpers shared by the encoders and adapters."""
from __future__ import annotations

import math

import torch


def seeded_init_(module: torch.nn.Module, generator: torch.Generator) -> None:
    """Reinitialize parameters deterministically from an explicit generator.

    Scales follow the stock torch scheme: linear weights and biases
    uniform in +-1/sqrt(fan_in), embeddings N(0, 1), layer norms reset to
    identity. Input-driven variation then dominates the shared bias
    direction, which both avoids rows collapsing toward a common vector
    at small widths and keeps all-zero feature rows (isolated nodes) from
    mapping to exactly-zero embeddings. Walk order is construction order.
    """
    with torch.no_grad():
        handled: set[int] = set()
        for m in module.modules():
            if isinstance(m, torch.nn.Linear):
                bound = 1.0 / math.sqrt(m.weight.shape[1])
                m.weight.uniform_(-bound, bound, generator=generator)
                handled.add(id(m.weight))
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
                    handled.add(id(m.bias))
            elif isinstance(m, torch.nn.Embedding):
                m.weight.normal_(0.0, 1.0, generator=generator)
                handled.add(id(m.weight))
            elif isinstance(m, torch.nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
                handled.update((id(m.weight), id(m.bias)))
        for name, p in module.named_parameters():
            if id(p) in handled:
                continue
            if p.dim() >= 2:
                bound = 1.0 / math.sqrt(p.shape[-1])
                p.uniform_(-bound, bound, generator=generator)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)


def seeded_dropout(x: torch.Tensor, p: float, train_mode: bool,
                   generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator; identity in eval."""
    if not train_mode or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def global_grad_norm(parameters) -> float:
    """Global L2 norm of gradients with 64-bit accumulation."""
    total = 0.0
    for p in parameters:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return total ** 0.5


def clip_gradients_(parameters, max_norm: float) -> float:
    """Scale gradients so the global norm is at most ``max_norm``.

    The norm is accumulated in float64. Returns the pre-clip norm.
    """
    params = [p for p in parameters if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        with torch.no_grad():
            for p in params:
                p.grad.mul_(scale)
    return norm
