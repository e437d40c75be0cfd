"""Attention + feed-forward blocks shared by the encoder and the Context Blocks.

Parameters are looked up by dotted name in a flat mapping, e.g.
``params["encoder.layer0.attn.wq"]``. :func:`block_param_shapes` lists what a
block expects so that model initialisation and checkpoints agree on names.
"""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .autograd import ops
from .autograd.tensor import Tensor


def block_param_shapes(prefix: str, d: int, ffn_dim: int) -> list:
    """(name, shape, init) triples for one pre-norm attention/FFN block."""
    return [
        (f"{prefix}.ln1.gamma", (d,), "ones"),
        (f"{prefix}.ln1.beta", (d,), "zeros"),
        (f"{prefix}.attn.wq", (d, d), "xavier"),
        (f"{prefix}.attn.wk", (d, d), "xavier"),
        (f"{prefix}.attn.wv", (d, d), "xavier"),
        (f"{prefix}.attn.wo", (d, d), "xavier"),
        (f"{prefix}.attn.bo", (d,), "zeros"),
        (f"{prefix}.ln2.gamma", (d,), "ones"),
        (f"{prefix}.ln2.beta", (d,), "zeros"),
        (f"{prefix}.ffn.w1", (d, ffn_dim), "xavier"),
        (f"{prefix}.ffn.b1", (ffn_dim,), "zeros"),
        (f"{prefix}.ffn.w2", (ffn_dim, d), "xavier"),
        (f"{prefix}.ffn.b2", (d,), "zeros"),
    ]


def layer_norm(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return ops.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, d] -> [B, heads, L, d / heads]."""
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def self_attention(x: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int,
                   key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head self-attention over x [B, L, d]; key_mask [B, L] marks valid positions."""
    q = split_heads(ops.matmul(x, params[f"{prefix}.wq"]), heads)
    k = split_heads(ops.matmul(x, params[f"{prefix}.wk"]), heads)
    v = split_heads(ops.matmul(x, params[f"{prefix}.wv"]), heads)
    mask = None if key_mask is None else key_mask[:, None, None, :]
    ctx = merge_heads(ops.attention(q, k, v, mask))
    return ops.matmul(ctx, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def feed_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = ops.relu(ops.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ops.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def transformer_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int,
                      key_mask: Optional[np.ndarray] = None) -> Tensor:
    x = x + self_attention(layer_norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", heads, key_mask)
    return x + feed_forward(layer_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn")


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out


def mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the rows of x [B, L, d] where mask [B, L] is False."""
    return x * ops.constant_mask(mask[..., None], x.shape)
