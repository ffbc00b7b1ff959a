"""Layers built on the autograd tensor: linear maps, embeddings, attention and transformer blocks.

Layers register their parameters in a shared ``ParameterStore`` under a
dotted prefix and are plain callables afterwards.
"""
from __future__ import annotations

import numpy as np

from . import tensor as tn
from .params import ParameterStore
from .tensor import Tensor


def linear(x, W, b=None) -> Tensor:
    y = tn.matmul(x, W)
    return y if b is None else y + b


def embedding_lookup(table, ids) -> Tensor:
    return tn.take(table, ids)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(float)
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.W = store.glorot(f"{name}.W", (d_in, d_out))
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x):
        return linear(x, self.W, self.b)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.gamma = store.ones(f"{name}.gamma", (dim,))
        self.beta = store.zeros(f"{name}.beta", (dim,))

    def __call__(self, x):
        return tn.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    def __init__(self, store, name, d_model, d_ff):
        self.fc1 = Linear(store, f"{name}.fc1", d_model, d_ff)
        self.fc2 = Linear(store, f"{name}.fc2", d_ff, d_model)

    def __call__(self, x):
        return self.fc2(tn.relu(self.fc1(x)))


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class MultiHeadAttention:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``mask`` is boolean, True where a query may attend to a key, and must
    broadcast to ``(batch, heads, L_q, L_k)``. The most recent attention
    weights are kept in ``last_weights`` for inspection.
    """

    def __init__(self, store, name, d_model, n_heads, d_kv=None):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        d_kv = d_model if d_kv is None else d_kv
        self.h = n_heads
        self.dh = d_model // n_heads
        self.q = Linear(store, f"{name}.q", d_model, d_model)
        self.k = Linear(store, f"{name}.k", d_kv, d_model)
        self.v = Linear(store, f"{name}.v", d_kv, d_model)
        self.o = Linear(store, f"{name}.o", d_model, d_model)
        self.last_weights = None

    def _split(self, x):
        B, L, _ = x.shape
        return x.reshape(B, L, self.h, self.dh).transpose(0, 2, 1, 3)

    def __call__(self, q_in, kv_in, mask=None):
        B, Lq, _ = q_in.shape
        Q, K, V = self._split(self.q(q_in)), self._split(self.k(kv_in)), self._split(self.v(kv_in))
        scores = tn.matmul(Q, K.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.dh))
        A = tn.softmax(scores, axis=-1, mask=mask)
        self.last_weights = A.data
        out = tn.matmul(A, V).transpose(0, 2, 1, 3).reshape(B, Lq, self.h * self.dh)
        return self.o(out)


class EncoderLayer:
    """Post-norm block: self-attention, add & norm, feed-forward, add & norm."""

    def __init__(self, store, name, d_model, n_heads, d_ff):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d_model, n_heads)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d_model)
        self.ff = FeedForward(store, f"{name}.ff", d_model, d_ff)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d_model)

    def __call__(self, x, mask=None):
        x = self.norm1(x + self.attn(x, x, mask))
        return self.norm2(x + self.ff(x))


class DecoderLayer:
    def __init__(self, store, name, d_model, n_heads, d_ff, d_memory=None):
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", d_model, n_heads)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d_model)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", d_model, n_heads, d_kv=d_memory)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d_model)
        self.ff = FeedForward(store, f"{name}.ff", d_model, d_ff)
        self.norm3 = LayerNorm(store, f"{name}.norm3", d_model)

    def __call__(self, x, memory, self_mask=None, memory_mask=None):
        x = self.norm1(x + self.self_attn(x, x, self_mask))
        x = self.norm2(x + self.cross_attn(x, memory, memory_mask))
        return self.norm3(x + self.ff(x))


class TransformerEncoder:
    def __init__(self, store, name, d_model, n_heads, n_layers, d_ff):
        self.layers = [EncoderLayer(store, f"{name}.{i}", d_model, n_heads, d_ff) for i in range(n_layers)]

    def __call__(self, x, mask=None):
        for layer in self.layers:
            x = layer(x, mask)
        return x


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """``(B, L)`` validity flags to an attention mask of shape ``(B, 1, 1, L)``."""
    return np.asarray(valid, dtype=bool)[:, None, None, :]


def masked_mean(x, valid: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``x`` ``(B, L, d)`` counting only valid positions; all-invalid rows give zeros."""
    w = np.asarray(valid, dtype=float)
    w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    return (x * w[:, :, None]).sum(axis=1)
