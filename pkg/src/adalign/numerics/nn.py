"""Layers assembled from the autodiff primitives.

Layers are plain functions over a :class:`ParamStore` and a name prefix; the
matching ``init_*`` helpers register the parameters.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore
from .rng import Rng
from .tensor import ConfigError, Tensor

LN_EPS = 1e-5


# --- initialisation ---------------------------------------------------------------
def init_linear(ps: ParamStore, name: str, n_in: int, n_out: int, rng: Rng,
                scale: float | None = None, zero: bool = False, trainable: bool = True) -> None:
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        s = (1.0 / np.sqrt(n_in)) if scale is None else scale
        w = rng.normal(0.0, s, size=(n_in, n_out))
    ps.add(f"{name}.W", w, trainable)
    ps.add(f"{name}.b", np.zeros(n_out), trainable)


def init_norm(ps: ParamStore, name: str, d: int, trainable: bool = True) -> None:
    ps.add(f"{name}.gamma", np.ones(d), trainable)
    ps.add(f"{name}.beta", np.zeros(d), trainable)


def init_mlp(ps: ParamStore, name: str, n_in: int, hidden: int, n_out: int, rng: Rng,
             zero_out: bool = False, trainable: bool = True) -> None:
    init_linear(ps, f"{name}.fc1", n_in, hidden, rng, trainable=trainable)
    init_linear(ps, f"{name}.fc2", hidden, n_out, rng, zero=zero_out, trainable=trainable)


def init_attention(ps: ParamStore, name: str, d: int, n_heads: int, rng: Rng,
                   zero_out: bool = False, trainable: bool = True) -> None:
    if d % n_heads:
        raise ConfigError(f"model dim {d} is not divisible by {n_heads} heads")
    for proj in ("q", "k", "v"):
        init_linear(ps, f"{name}.{proj}", d, d, rng, trainable=trainable)
    init_linear(ps, f"{name}.o", d, d, rng, zero=zero_out, trainable=trainable)


def init_block(ps: ParamStore, name: str, d: int, n_heads: int, hidden: int, rng: Rng,
               zero_residual: bool = False, trainable: bool = True) -> None:
    """Pre-norm transformer block: norm -> attention -> norm -> MLP."""
    init_norm(ps, f"{name}.norm1", d, trainable)
    init_attention(ps, f"{name}.attn", d, n_heads, rng, zero_out=zero_residual, trainable=trainable)
    init_norm(ps, f"{name}.norm2", d, trainable)
    init_mlp(ps, f"{name}.mlp", d, hidden, d, rng, zero_out=zero_residual, trainable=trainable)


# --- forward ------------------------------------------------------------------------
def linear(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    return T.linear(x, ps[f"{name}.W"], ps[f"{name}.b"])


def norm(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, ps[f"{name}.gamma"], ps[f"{name}.beta"], LN_EPS)


def mlp(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(ps, f"{name}.fc2", T.gelu(linear(ps, f"{name}.fc1", x)))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    return T.swapaxes(T.reshape(x, (*lead, n, n_heads, d // n_heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return T.reshape(T.swapaxes(x, -2, -3), (*lead, n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float, mask: np.ndarray | None) -> Tensor:
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale)
    if mask is not None:
        scores = T.masked_fill(scores, ~mask, -1e30)
    return T.matmul(T.softmax(scores, axis=-1), v)


def attention(queries: Tensor, keys_values: Tensor | None, ps: ParamStore, name: str,
              n_heads: int, *, causal: bool = False, kv_mask: np.ndarray | None = None,
              extra_kv: Tensor | None = None, gate: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention, output projection included.

    queries: [..., q, d]; keys_values: [..., k, d] (``None`` = self-attention).
    kv_mask: bool [..., k], False marks padding.  Rows with no valid key
    contribute exactly zero, so a residual caller sees its input unchanged.

    ``extra_kv`` ([..., m, d] or [m, d]) is projected with the same key/value
    weights and attended under its own softmax; that contribution is scaled
    by ``tanh(gate)`` per head before the output projection.
    """
    d = queries.shape[-1]
    if d % n_heads:
        raise ConfigError(f"model dim {d} is not divisible by {n_heads} heads")
    self_attn = keys_values is None
    kv = queries if self_attn else keys_values
    if kv.shape[-1] != d:
        raise T.DimensionError(f"attention: queries {queries.shape} vs keys/values {kv.shape}")
    n_q, n_k = queries.shape[-2], kv.shape[-2]
    scale = float(1.0 / np.sqrt(d // n_heads))
    q = _split_heads(linear(ps, f"{name}.q", queries), n_heads)

    if n_k == 0:
        out = None
    else:
        k = _split_heads(linear(ps, f"{name}.k", kv), n_heads)
        v = _split_heads(linear(ps, f"{name}.v", kv), n_heads)
        mask = None
        if causal:
            mask = np.tril(np.ones((n_q, n_k), dtype=bool), k=n_k - n_q)
        if kv_mask is not None:
            km = np.asarray(kv_mask, dtype=bool)[..., None, None, :]
            mask = km if mask is None else (km & mask)
        out = _attend(q, k, v, scale, mask)

    if extra_kv is not None and extra_kv.shape[-2] > 0:
        ek = _split_heads(linear(ps, f"{name}.k", extra_kv), n_heads)
        ev = _split_heads(linear(ps, f"{name}.v", extra_kv), n_heads)
        contrib = _attend(q, ek, ev, scale, None)
        if gate is not None:
            contrib = T.mul(contrib, T.reshape(T.tanh(gate), (n_heads, 1, 1)))
        out = contrib if out is None else T.add(out, contrib)

    if out is None:
        return T.Tensor(np.zeros(queries.shape, dtype=queries.dtype))
    y = linear(ps, f"{name}.o", _merge_heads(out))
    if kv_mask is not None and extra_kv is None:
        has_key = np.asarray(kv_mask, dtype=bool).any(axis=-1)
        if not has_key.all():
            y = T.mul(y, has_key[..., None, None].astype(y.dtype))
    return y


def encoder_block(ps: ParamStore, name: str, x: Tensor, n_heads: int) -> Tensor:
    x = T.add(x, attention(norm(ps, f"{name}.norm1", x), None, ps, f"{name}.attn", n_heads))
    return T.add(x, mlp(ps, f"{name}.mlp", norm(ps, f"{name}.norm2", x)))


def cross_block(ps: ParamStore, name: str, queries: Tensor, memory: Tensor, n_heads: int,
                memory_mask: np.ndarray | None = None) -> Tensor:
    """Same layout as :func:`encoder_block` with the queries attending to ``memory``."""
    h = attention(norm(ps, f"{name}.norm1", queries), memory, ps, f"{name}.attn", n_heads,
                  kv_mask=memory_mask)
    x = T.add(queries, h)
    return T.add(x, mlp(ps, f"{name}.mlp", norm(ps, f"{name}.norm2", x)))


def sinusoidal_pe(positions, dim: int, max_period: float = 100.0) -> np.ndarray:
    """Sin/cos features of 2-D points: [..., 2] -> [..., dim].

    The first ``dim/2`` features encode x, the rest y.  Within each half the
    entries alternate sin(w_k c), cos(w_k c) with w_0 = 1 and geometrically
    decreasing w_k = max_period ** (-k / K).
    """
    if dim % 2 or dim < 4:
        raise ConfigError(f"positional-encoding dim must be even and >= 4, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    n_freq = (half + 1) // 2
    freqs = max_period ** (-np.arange(n_freq) / max(n_freq, 1))
    feats = []
    for c in range(2):
        ang = pos[..., c:c + 1] * freqs
        inter = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*ang.shape[:-1], 2 * n_freq)
        feats.append(inter[..., :half])
    return np.concatenate(feats, axis=-1)
