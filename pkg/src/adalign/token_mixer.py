"""Token mixer: turns intermediate driving tokens into a fixed-length context.

Pipeline per frame::

    instances  = P_instance(concat(track_i, motion_i))            (i = 1..N_det)
    bev'       = P_bev(E(bev))            E: stride-2 convs + adaptive pool to 3x3
    bev''      = BEV blocks (self-attention)          9 tokens
    instance'  = instance blocks (5 learnable queries cross-attend to instances)
    ego'       = linear(ego_token)
    plan'      = P_plan(PE(plan_steps))
    context    = concat(bev'', instance', ego', plan')    length 15 + T_p

Everything runs batched: instance sets are padded to the largest ``N_det``
in the batch and masked.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import nn
from .numerics import tensor as T
from .numerics.params import ParamStore
from .numerics.rng import Rng
from .numerics.tensor import ConfigError, Tensor
from .scene_sim import IntermediateTokens

N_BEV_TOKENS = 9
N_INSTANCE_QUERIES = 5
PREFIX = "mixer"


@dataclass
class MixerConfig:
    token_dim: int = 32
    embed_dim: int = 64
    bev_size: int = 32
    bev_channels: int = 16
    n_bev_blocks: int = 2
    n_instance_blocks: int = 2
    n_heads: int = 4
    mlp_hidden: int = 128
    instance_mlp_layers: int = 2
    max_conv_channels: int = 128
    t_plan: int = 6
    pe_max_period: float = 100.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.n_heads} heads")
        if self.bev_size < 3:
            raise ConfigError("BEV must be at least 3x3")
        if self.instance_mlp_layers not in (1, 2):
            raise ConfigError("instance MLP has 1 or 2 layers")

    @property
    def pe_dim(self) -> int:
        return self.embed_dim

    @property
    def context_len(self) -> int:
        return N_BEV_TOKENS + N_INSTANCE_QUERIES + 1 + self.t_plan

    def conv_plan(self) -> list[tuple[int, int]]:
        """(in, out) channels of each stride-2 conv until spatial size <= 6."""
        size, c, layers = self.bev_size, self.bev_channels, []
        while size > 6:
            out = min(2 * c, self.max_conv_channels)
            layers.append((c, out))
            c, size = out, (size + 1) // 2
        return layers

    @property
    def encoder_channels(self) -> int:
        plan = self.conv_plan()
        return plan[-1][1] if plan else self.bev_channels


def toy_config(**kw) -> MixerConfig:
    return MixerConfig(**kw)


def full_scale_config(embed_dim: int = 728, **kw) -> MixerConfig:
    """Full-scale shapes (200x200x256 BEV, 256-d tokens) for shape checks.

    16 heads do not divide 728, so the head count drops to the largest
    divisor of ``embed_dim`` not above 16.
    """
    heads = max(h for h in range(1, 17) if embed_dim % h == 0)
    base = dict(token_dim=256, embed_dim=embed_dim, bev_size=200, bev_channels=256,
                n_bev_blocks=8, n_instance_blocks=5, n_heads=heads, mlp_hidden=3072,
                max_conv_channels=512)
    base.update(kw)
    return MixerConfig(**base)


# --- parameters --------------------------------------------------------------------
def init_mixer(ps: ParamStore, cfg: MixerConfig, rng: Rng, trainable: bool = True) -> None:
    D, E = cfg.token_dim, cfg.embed_dim
    r = rng.child("mixer")
    if cfg.instance_mlp_layers == 2:
        nn.init_mlp(ps, f"{PREFIX}.p_instance", 2 * D, E, E, r.child("p_instance"), trainable=trainable)
    else:
        nn.init_linear(ps, f"{PREFIX}.p_instance.fc1", 2 * D, E, r.child("p_instance"), trainable=trainable)
    for i, (cin, cout) in enumerate(cfg.conv_plan()):
        w = r.child(f"conv{i}").normal(0.0, 1.0 / np.sqrt(9 * cin), size=(3, 3, cin, cout))
        ps.add(f"{PREFIX}.encoder.conv{i}.W", w, trainable)
        ps.add(f"{PREFIX}.encoder.conv{i}.b", np.zeros(cout), trainable)
    nn.init_mlp(ps, f"{PREFIX}.p_bev", cfg.encoder_channels, E, E, r.child("p_bev"), trainable=trainable)
    for i in range(cfg.n_bev_blocks):
        nn.init_block(ps, f"{PREFIX}.bev_block{i}", E, cfg.n_heads, cfg.mlp_hidden,
                      r.child(f"bev_block{i}"), trainable=trainable)
    ps.add(f"{PREFIX}.ins_queries", r.child("queries").normal(0.0, 0.5, size=(N_INSTANCE_QUERIES, E)),
           trainable)
    for i in range(cfg.n_instance_blocks):
        nn.init_block(ps, f"{PREFIX}.ins_block{i}", E, cfg.n_heads, cfg.mlp_hidden,
                      r.child(f"ins_block{i}"), trainable=trainable)
    nn.init_linear(ps, f"{PREFIX}.p_ego", D, E, r.child("p_ego"), trainable=trainable)
    nn.init_mlp(ps, f"{PREFIX}.p_plan", cfg.pe_dim, E, E, r.child("p_plan"), trainable=trainable)


# --- stages -----------------------------------------------------------------------------
def instance_mix(ps: ParamStore, cfg: MixerConfig, track: Tensor, motion: Tensor) -> Tensor:
    """[..., N, D] x 2 -> [..., N, D_embed]."""
    track, motion = T.as_tensor(track, ps.dtype), T.as_tensor(motion, ps.dtype)
    if track.shape[-1] != cfg.token_dim or motion.shape[-1] != cfg.token_dim:
        raise ConfigError(f"track/motion dims {track.shape[-1]}/{motion.shape[-1]} "
                          f"!= token_dim {cfg.token_dim}")
    x = T.concat([track, motion], axis=-1)
    if cfg.instance_mlp_layers == 2:
        return nn.mlp(ps, f"{PREFIX}.p_instance", x)
    return nn.linear(ps, f"{PREFIX}.p_instance.fc1", x)


def bev_encode(ps: ParamStore, cfg: MixerConfig, bev: Tensor) -> Tensor:
    """[B, H, W, C] -> [B, 3, 3, D_embed]."""
    bev = T.as_tensor(bev, ps.dtype)
    if bev.ndim == 3:
        bev = T.reshape(bev, (1, *bev.shape))
    if bev.shape[1] < 3 or bev.shape[2] < 3:
        raise ConfigError(f"BEV spatial size {bev.shape[1:3]} is below 3x3")
    x = bev
    n_conv = len(cfg.conv_plan())
    for i in range(n_conv):
        x = T.conv2d(x, ps[f"{PREFIX}.encoder.conv{i}.W"], ps[f"{PREFIX}.encoder.conv{i}.b"])
        x = T.gelu(x)
    x = T.adaptive_avg_pool2d(x, 3)
    return nn.mlp(ps, f"{PREFIX}.p_bev", x)


def bev_blocks(ps: ParamStore, cfg: MixerConfig, tokens: Tensor) -> Tensor:
    for i in range(cfg.n_bev_blocks):
        tokens = nn.encoder_block(ps, f"{PREFIX}.bev_block{i}", tokens, cfg.n_heads)
    return tokens


def instance_blocks(ps: ParamStore, cfg: MixerConfig, instances: Tensor,
                    mask: np.ndarray | None = None, batch: int | None = None) -> Tensor:
    """Pool a (padded) instance set onto the learnable queries.

    instances: [B, N, D_embed] with bool mask [B, N]; N may be 0.
    """
    q0 = ps[f"{PREFIX}.ins_queries"]
    B = instances.shape[0] if batch is None else batch
    q = T.broadcast_to(q0, (B, *q0.shape))
    for i in range(cfg.n_instance_blocks):
        q = nn.cross_block(ps, f"{PREFIX}.ins_block{i}", q, instances, cfg.n_heads, memory_mask=mask)
    return q


def plan_encode(ps: ParamStore, cfg: MixerConfig, plan) -> Tensor:
    """[..., T_p, 2] points -> [..., T_p, D_embed]."""
    pe = nn.sinusoidal_pe(plan, cfg.pe_dim, cfg.pe_max_period).astype(ps.dtype)
    return nn.mlp(ps, f"{PREFIX}.p_plan", Tensor(pe))


def ego_encode(ps: ParamStore, cfg: MixerConfig, ego) -> Tensor:
    return nn.linear(ps, f"{PREFIX}.p_ego", T.as_tensor(ego, ps.dtype))


def build_context(bev2: Tensor | None, instance2: Tensor | None, ego2: Tensor | None,
                  plan2: Tensor | None) -> Tensor:
    parts = {"bev": bev2, "instance": instance2, "ego": ego2, "plan": plan2}
    missing = [k for k, v in parts.items() if v is None]
    if missing:
        raise ConfigError(f"context is missing components: {', '.join(missing)}")
    return T.concat([bev2, instance2, ego2, plan2], axis=-2)


def vad_select(agent_tokens: Sequence, scores: Sequence[float], threshold: float = 0.5) -> list:
    """Keep agent queries whose detection score is strictly above ``threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(agent_tokens):
        raise ValueError(f"{len(agent_tokens)} tokens but {len(scores)} scores")
    if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must lie in [0, 1]")
    return [t for t, s in zip(agent_tokens, scores) if s > threshold]


# --- batched forward ------------------------------------------------------------------
def pad_instances(batch: Sequence[IntermediateTokens], dim: int):
    n = max((t.n_det for t in batch), default=0)
    track = np.zeros((len(batch), n, dim))
    motion = np.zeros((len(batch), n, dim))
    mask = np.zeros((len(batch), n), dtype=bool)
    for i, t in enumerate(batch):
        k = t.n_det
        if k:
            track[i, :k] = t.track
            motion[i, :k] = t.motion
            mask[i, :k] = True
    return track, motion, mask


def mixer_forward(ps: ParamStore, cfg: MixerConfig, batch: Sequence[IntermediateTokens],
                  mode: str = "aligned") -> Tensor:
    """Context tokens [B, L, D_embed]; ``mode='declarative'`` keeps only the BEV part."""
    dt = ps.dtype
    bev = Tensor(np.stack([t.bev for t in batch]).astype(dt))
    bev2 = bev_blocks(ps, cfg, T.reshape(bev_encode(ps, cfg, bev), (len(batch), N_BEV_TOKENS, cfg.embed_dim)))
    if mode == "declarative":
        return bev2
    if mode != "aligned":
        raise ConfigError(f"unknown context mode {mode!r}")
    track, motion, mask = pad_instances(batch, cfg.token_dim)
    inst = instance_mix(ps, cfg, Tensor(track.astype(dt)), Tensor(motion.astype(dt)))
    inst2 = instance_blocks(ps, cfg, inst, mask, batch=len(batch))
    ego2 = T.reshape(ego_encode(ps, cfg, np.stack([t.ego_token for t in batch])),
                     (len(batch), 1, cfg.embed_dim))
    plan2 = plan_encode(ps, cfg, np.stack([t.plan_steps for t in batch]))
    return build_context(bev2, inst2, ego2, plan2)
