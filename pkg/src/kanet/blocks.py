"""Post-norm transformer block shared by the frozen encoder and the fusion unit."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

ATTN_KEYS = ("wq", "wk", "wv", "wo")
BIAS_KEYS = ("bq", "bk", "bv", "bo")


def init_block(rng: np.random.Generator, dim: int, mlp_ratio: int, std: float,
               attn_bias: bool, zero_out_proj: bool = False, dtype=np.float32) -> dict[str, np.ndarray]:
    hidden = dim * mlp_ratio
    p: dict[str, np.ndarray] = {}
    for k in ATTN_KEYS:
        p[k] = rng.normal(0.0, std, size=(dim, dim))
    if zero_out_proj:
        p["wo"] = np.zeros((dim, dim))
    if attn_bias:
        for k in BIAS_KEYS:
            p[k] = np.zeros(dim)
    p["ln1_g"] = np.ones(dim)
    p["ln1_b"] = np.zeros(dim)
    p["w1"] = rng.normal(0.0, std, size=(dim, hidden))
    p["b1"] = np.zeros(hidden)
    p["w2"] = rng.normal(0.0, std, size=(hidden, dim))
    p["b2"] = np.zeros(dim)
    p["ln2_g"] = np.ones(dim)
    p["ln2_b"] = np.zeros(dim)
    return {k: v.astype(dtype) for k, v in p.items()}


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., L, D] -> [..., H, L, D/H]``."""
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, n, h * dh))


def attention(q_in: Tensor, kv_in: Tensor, p: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention.

    ``q_in`` is ``[..., Lq, D]``; ``kv_in`` is ``[..., Lk, D]`` and may have
    fewer leading axes (shared keys/values). Returns the projected output and
    the post-softmax weights ``[..., H, Lq, Lk]``.
    """
    d = q_in.shape[-1]
    if d % heads:
        raise T.ShapeError(f"dim {d} not divisible by {heads} heads")
    q = split_heads(linear(q_in, p["wq"], p.get("bq")), heads)
    k = split_heads(linear(kv_in, p["wk"], p.get("bk")), heads)
    v = split_heads(linear(kv_in, p["wv"], p.get("bv")), heads)
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d // heads))
    weights = T.softmax(scores, axis=-1)
    out = merge_heads(T.matmul(weights, v))
    return linear(out, p["wo"], p.get("bo")), weights


def block(x: Tensor, kv: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """attention -> add & norm -> MLP -> add & norm."""
    a, _ = attention(x, kv, p, heads)
    h = T.layernorm(T.add(x, a), p["ln1_g"], p["ln1_b"])
    m = linear(T.gelu(linear(h, p["w1"], p["b1"])), p["w2"], p["b2"])
    return T.layernorm(T.add(h, m), p["ln2_g"], p["ln2_b"])
