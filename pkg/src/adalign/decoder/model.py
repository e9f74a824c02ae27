"""Causal toy language decoder with gated context and adapter injection.

Layer ``l`` computes (pre-norm)::

    h = norm1(x)
    x = x + Attn(h; causal self keys/values  +  tanh(g_l) * extra keys/values)
    x = x + MLP(norm2(x))

The extra keys/values are the projected context tokens at layer 1 and the
layer's adapter tokens at scheduled layers.  Both go through the layer's
own norm and key/value weights and get a separate softmax, and every gate
starts at zero, so a freshly built model ignores them exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..numerics import nn
from ..numerics import tensor as T
from ..numerics.params import ParamStore
from ..numerics.rng import Rng
from ..numerics.tensor import ConfigError, Tensor
from .schedule import AdapterSchedule
from .vocab import DEFAULT_VOCAB, Vocab


@dataclass
class DecoderConfig:
    vocab_size: int = len(DEFAULT_VOCAB)
    n_layers: int = 8
    dim: int = 128
    n_heads: int = 4
    mlp_hidden: int = 256
    max_len: int = 128
    n_adapter_tokens: int = 32
    context_dim: int = 64

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ConfigError(f"decoder dim {self.dim} not divisible by {self.n_heads} heads")
        if self.n_layers < 1:
            raise ConfigError("decoder needs at least one layer")

    def to_dict(self) -> dict:
        return asdict(self)


def layer_name(i: int) -> str:
    return f"dec.layer{i}"


def init_decoder(ps: ParamStore, cfg: DecoderConfig, schedule: AdapterSchedule, rng: Rng) -> None:
    """Base weights under ``dec.``; adapters under ``adapter.``; context path under ``context.``."""
    if schedule.n_layers != cfg.n_layers:
        raise ConfigError(f"schedule is for {schedule.n_layers} layers, decoder has {cfg.n_layers}")
    r = rng.child("decoder")
    d = cfg.dim
    ps.add("dec.embed", r.child("embed").normal(0.0, 0.02, size=(cfg.vocab_size, d)))
    ps.add("dec.pos", r.child("pos").normal(0.0, 0.02, size=(cfg.max_len, d)))
    for i in range(1, cfg.n_layers + 1):
        nn.init_block(ps, layer_name(i), d, cfg.n_heads, cfg.mlp_hidden, r.child(f"layer{i}"))
    nn.init_norm(ps, "dec.norm_f", d)
    nn.init_linear(ps, "dec.head", d, cfg.vocab_size, r.child("head"))
    init_adapters(ps, cfg, schedule, rng)


def init_adapters(ps: ParamStore, cfg: DecoderConfig, schedule: AdapterSchedule, rng: Rng) -> None:
    r = rng.child("adapters")
    nn.init_linear(ps, "context.proj", cfg.context_dim, cfg.dim, r.child("context"))
    ps.add("context.gate", np.zeros(cfg.n_heads))
    for i in schedule.sorted_layers:
        ps.add(f"adapter.layer{i}.tokens",
               r.child(f"layer{i}").normal(0.0, 0.02, size=(cfg.n_adapter_tokens, cfg.dim)))
        ps.add(f"adapter.layer{i}.gate", np.zeros(cfg.n_heads))


def stage2_trainable_prefixes() -> tuple[str, ...]:
    return ("adapter.", "context.", "mixer.")


def _embed(ps: ParamStore, ids: np.ndarray, cfg: DecoderConfig, positions: np.ndarray | None = None):
    ids = np.asarray(ids)
    n = ids.shape[-1]
    if n == 0:
        raise ConfigError("prompt must be non-empty")
    if n > cfg.max_len:
        raise ConfigError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if positions is None:
        positions = np.arange(n)
    return T.add(T.embedding(ps["dec.embed"], ids), T.embedding(ps["dec.pos"], positions))


def decoder_forward(ps: ParamStore, cfg: DecoderConfig, schedule: AdapterSchedule, ids,
                    context: Tensor | None = None, *, use_adapters: bool = True) -> Tensor:
    """Logits [B, T, |V|] for token ids [B, T] (or [T]).

    ``context`` is [B, L, D_embed] (or [L, D_embed]); ``None`` withholds it.
    """
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
    x = _embed(ps, ids, cfg)
    ctx = None
    if context is not None:
        context = T.as_tensor(context, ps.dtype)
        if context.shape[-1] != cfg.context_dim:
            raise ConfigError(f"context dim {context.shape[-1]} != decoder context_dim {cfg.context_dim}")
        if context.ndim == 2:
            context = T.reshape(context, (1, *context.shape))
        ctx = nn.linear(ps, "context.proj", context)
    for i in range(1, cfg.n_layers + 1):
        name = layer_name(i)
        extra, gate = None, None
        if i == 1 and ctx is not None:
            extra, gate = ctx, ps["context.gate"]
        elif use_adapters and schedule.has_adapter(i):
            extra, gate = ps[f"adapter.layer{i}.tokens"], ps[f"adapter.layer{i}.gate"]
        h = nn.norm(ps, f"{name}.norm1", x)
        e = nn.norm(ps, f"{name}.norm1", extra) if extra is not None else None
        x = T.add(x, nn.attention(h, None, ps, f"{name}.attn", cfg.n_heads, causal=True,
                                  extra_kv=e, gate=gate))
        x = T.add(x, nn.mlp(ps, f"{name}.mlp", nn.norm(ps, f"{name}.norm2", x)))
    logits = nn.linear(ps, "dec.head", nn.norm(ps, "dec.norm_f", x))
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def caption_loss(logits: Tensor, target_ids, answer_mask) -> Tensor:
    """Mean token cross-entropy over positions flagged in ``answer_mask``."""
    mask = np.asarray(answer_mask, dtype=bool)
    if not mask.any():
        raise ValueError("answer mask selects no tokens")
    return T.cross_entropy(logits, np.asarray(target_ids), mask.astype(logits.dtype))


# --- inference -------------------------------------------------------------------
def _np_norm(ps, name, x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + nn.LN_EPS) * ps[f"{name}.gamma"].data + ps[f"{name}.beta"].data


def _np_linear(ps, name, x):
    return x @ ps[f"{name}.W"].data + ps[f"{name}.b"].data


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def _heads(x, h):
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, h, d // h), -2, -3)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


class Generator:
    """Greedy decoding with cached keys/values, no autodiff.

    Prompts of different lengths are left-padded; padded slots are masked
    and every sequence keeps its own position numbering, so results match
    :func:`decoder_forward` on each prompt alone.
    """

    def __init__(self, ps: ParamStore, cfg: DecoderConfig, schedule: AdapterSchedule,
                 vocab: Vocab = DEFAULT_VOCAB):
        self.ps, self.cfg, self.schedule, self.vocab = ps, cfg, schedule, vocab

    def _extra_kv(self, i: int, ctx: np.ndarray | None):
        ps, name, h = self.ps, layer_name(i), self.cfg.n_heads
        if i == 1 and ctx is not None:
            e, g = ctx, ps["context.gate"].data
        elif self.schedule.has_adapter(i):
            e, g = ps[f"adapter.layer{i}.tokens"].data, ps[f"adapter.layer{i}.gate"].data
        else:
            return None
        e = _np_norm(ps, f"{name}.norm1", e)
        k = _heads(_np_linear(ps, f"{name}.attn.k", e), h)
        v = _heads(_np_linear(ps, f"{name}.attn.v", e), h)
        return k, v, np.tanh(g).reshape(h, 1, 1)

    def _step(self, x, cache, key_mask, extras):
        """Run new tokens x [B, n, d] through all layers, appending to the cache."""
        ps, cfg = self.ps, self.cfg
        h = cfg.n_heads
        scale = 1.0 / np.sqrt(cfg.dim // h)
        n_new = x.shape[1]
        for i in range(1, cfg.n_layers + 1):
            name = layer_name(i)
            y = _np_norm(ps, f"{name}.norm1", x)
            q = _heads(_np_linear(ps, f"{name}.attn.q", y), h)
            k = _heads(_np_linear(ps, f"{name}.attn.k", y), h)
            v = _heads(_np_linear(ps, f"{name}.attn.v", y), h)
            if cache[i] is not None:
                k = np.concatenate([cache[i][0], k], axis=-2)
                v = np.concatenate([cache[i][1], v], axis=-2)
            cache[i] = (k, v)
            n_k = k.shape[-2]
            causal = np.tril(np.ones((n_new, n_k), dtype=bool), k=n_k - n_new)
            mask = causal[None, None] & key_mask[:, None, None, :n_k]
            s = np.where(mask, (q @ np.swapaxes(k, -1, -2)) * scale, -1e30)
            out = _softmax(s) @ v
            ex = extras[i]
            if ex is not None:
                ek, ev, g = ex
                out = out + g * (_softmax((q @ np.swapaxes(ek, -1, -2)) * scale) @ ev)
            out = np.swapaxes(out, -2, -3).reshape(x.shape)
            x = x + _np_linear(ps, f"{name}.attn.o", out)
            x = x + _np_linear(ps, f"{name}.mlp.fc2",
                               _np_gelu(_np_linear(ps, f"{name}.mlp.fc1", _np_norm(ps, f"{name}.norm2", x))))
        return _np_linear(ps, "dec.head", _np_norm(ps, "dec.norm_f", x))

    def generate_ids(self, prompts: list[list[int]], context: np.ndarray | None = None,
                     max_len: int = 64) -> list[list[int]]:
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        if any(len(p) == 0 for p in prompts):
            raise ConfigError("prompt must be non-empty")
        ps, cfg = self.ps, self.cfg
        B = len(prompts)
        longest = max(len(p) for p in prompts)
        if longest + max_len > cfg.max_len:
            max_len = cfg.max_len - longest
            if max_len < 1:
                raise ConfigError(f"prompt of length {longest} leaves no room under max_len {cfg.max_len}")
        ctx = None
        if context is not None:
            c = np.asarray(context, dtype=ps.dtype)
            if c.shape[-1] != cfg.context_dim:
                raise ConfigError(f"context dim {c.shape[-1]} != decoder context_dim {cfg.context_dim}")
            if c.ndim == 2:
                c = np.broadcast_to(c, (B, *c.shape))
            ctx = _np_linear(ps, "context.proj", c)
        extras = {i: self._extra_kv(i, ctx) for i in range(1, cfg.n_layers + 1)}
        for i, ex in extras.items():
            if ex is not None and ex[0].ndim == 3:   # adapters: shared across batch
                extras[i] = (ex[0][None], ex[1][None], ex[2])

        ids = np.full((B, longest), self.vocab.pad, dtype=np.int64)
        key_mask = np.zeros((B, longest + max_len), dtype=bool)
        pos = np.zeros((B, longest), dtype=np.int64)
        for b, p in enumerate(prompts):
            off = longest - len(p)
            ids[b, off:] = p
            key_mask[b, off:longest] = True
            pos[b, off:] = np.arange(len(p))
        lengths = np.array([len(p) for p in prompts])
        emb, pe = ps["dec.embed"].data, ps["dec.pos"].data
        cache = {i: None for i in range(1, cfg.n_layers + 1)}
        logits = self._step(emb[ids] + pe[pos], cache, key_mask, extras)[:, -1]
        outs: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for t in range(max_len):
            nxt = logits.argmax(-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == self.vocab.eos:
                    done[b] = True
                else:
                    outs[b].append(int(nxt[b]))
            if done.all() or t == max_len - 1:
                break
            key_mask[:, longest + t] = True
            p_new = (lengths + t)[:, None]
            logits = self._step((emb[nxt] + pe[p_new[:, 0]])[:, None], cache, key_mask, extras)[:, -1]
        return outs

    def generate(self, prompts: list[str], context: np.ndarray | None = None, max_len: int = 64) -> list[str]:
        enc = [[self.vocab.bos] + self.vocab.encode(p) for p in prompts]
        return [self.vocab.decode(o) for o in self.generate_ids(enc, context, max_len)]
