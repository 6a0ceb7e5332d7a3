"""Parameter containers and the standard transformer building blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layer_norm, matmul, softmax


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated to +-2 std, redrawing anything outside."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Attribute-scanning parameter registry, torch-style."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        for m_name, m in self._named_modules(prefix):
            for key, arr in m.buffers().items():
                state[f"{m_name}{key}"] = arr
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: {state[name].shape} vs {p.shape}")
            p.data[...] = state[name]
        for m_name, m in self._named_modules(prefix):
            for key, arr in m.buffers().items():
                arr[...] = state[f"{m_name}{key}"]

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-learned state (running statistics); empty by default."""
        return {}

    def _named_modules(self, prefix: str) -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{key}.{i}.")


class Linear(Module):
    """``x @ W + b``; W defaults to truncated normal with std 1/sqrt(d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = param(trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., T, D] -> [..., heads, T, D/heads]"""
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, T, dh] -> [..., T, heads*dh]"""
    *lead, h, t, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None,
           scale: float | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over per-head tensors [..., H, T, dh].

    ``bias`` is added to the logits before the softmax and may hold ``-inf``
    to forbid a key. Returns (output, attention weights).
    """
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, k.swapaxes(-1, -2))
    if scale != 1.0:
        logits = logits.scale(scale)
    if bias is not None:
        logits = logits + Tensor(bias)
    attn = softmax(logits, axis=-1)
    return matmul(attn, v), attn


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide dim ({dim})")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(x), self.heads)
        v = split_heads(self.v(x), self.heads)
        out, _ = attend(q, k, v)
        return self.proj(merge_heads(out))


class Block(Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))
