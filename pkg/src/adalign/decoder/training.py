"""Model bundle (mixer + decoder) and the two training stages.

Stage 1 fits the base decoder on context-free task text, so it learns the
answer formats and their marginal statistics.  Stage 2 freezes every
``dec.*`` weight and fits only the token mixer, the context projector and
the adapters, with the mixer output fed to the decoder as context.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..align_tasks import AlignmentSample, MixRatios, build_batch, template_hash
from ..numerics import optim
from ..numerics.params import ParamStore
from ..numerics.rng import Rng
from ..numerics.tensor import ConfigError, Tensor
from ..scene_sim import IntermediateTokens, NoiseConfig, Scene, TokenSpec, mock_ad_inference
from .. import token_mixer as tm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (DecoderConfig, Generator, caption_loss, decoder_forward, init_decoder,
                    stage2_trainable_prefixes)
from .schedule import AdapterSchedule, make_schedule
from .vocab import DEFAULT_VOCAB, Vocab

log = logging.getLogger(__name__)

MODES = ("aligned", "declarative")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, last_good: dict):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.last_good = last_good


# --- model bundle ---------------------------------------------------------------------
class AlignedModel:
    """Parameters plus the configs needed to run them.

    ``mode='aligned'`` feeds the full mixer context; ``'declarative'`` feeds
    only the BEV tokens, so no instance, ego or plan information reaches
    the decoder.
    """

    def __init__(self, mixer_cfg: tm.MixerConfig, dec_cfg: DecoderConfig, schedule: AdapterSchedule,
                 mode: str = "aligned", seed: int = 0, dtype=np.float32, vocab: Vocab = DEFAULT_VOCAB):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; choose aligned or declarative")
        if dec_cfg.context_dim != mixer_cfg.embed_dim:
            raise ConfigError(f"decoder context_dim {dec_cfg.context_dim} != mixer embed_dim "
                              f"{mixer_cfg.embed_dim}")
        self.mixer_cfg, self.dec_cfg, self.schedule = mixer_cfg, dec_cfg, schedule
        self.mode, self.seed, self.vocab = mode, seed, vocab
        self.ps = ParamStore(dtype)
        rng = Rng(seed).child("init")
        init_decoder(self.ps, dec_cfg, schedule, rng)
        tm.init_mixer(self.ps, mixer_cfg, rng)
        self.history: list[dict] = []

    # context -------------------------------------------------------------
    def context(self, tokens: Sequence[IntermediateTokens]) -> Tensor:
        return tm.mixer_forward(self.ps, self.mixer_cfg, tokens, mode=self.mode)

    def logits(self, ids, tokens: Sequence[IntermediateTokens] | None) -> Tensor:
        ctx = self.context(tokens) if tokens is not None else None
        return decoder_forward(self.ps, self.dec_cfg, self.schedule, ids, ctx)

    def answer(self, samples: Sequence[AlignmentSample], tokens: Sequence[IntermediateTokens],
               max_len: int = 64, batch: int = 128, with_context: bool = True) -> list[str]:
        gen = Generator(self.ps, self.dec_cfg, self.schedule, self.vocab)
        out: list[str] = []
        for lo in range(0, len(samples), batch):
            chunk = samples[lo:lo + batch]
            ctx = self.context(tokens[lo:lo + batch]).data if with_context else None
            out += gen.generate([s.prompt for s in chunk], ctx, max_len)
        return out

    # persistence ---------------------------------------------------------
    def describe(self) -> dict:
        return {"mixer": asdict(self.mixer_cfg), "decoder": self.dec_cfg.to_dict(),
                "schedule": self.schedule.describe(), "mode": self.mode, "seed": self.seed,
                "dtype": self.ps.dtype.name, "vocab_hash": self.vocab.hash,
                "template_hash": template_hash()}

    def save(self, path, extra: dict | None = None) -> None:
        meta = dict(self.describe(), history=self.history)
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.ps.state(), meta)

    @classmethod
    def load(cls, path, vocab: Vocab = DEFAULT_VOCAB) -> "AlignedModel":
        arrays, meta = load_checkpoint(path, expect_vocab_hash=vocab.hash)
        model = cls(tm.MixerConfig(**meta["mixer"]), DecoderConfig(**meta["decoder"]),
                    AdapterSchedule.from_description(meta["schedule"]), meta["mode"],
                    meta["seed"], np.dtype(meta["dtype"]), vocab)
        try:
            model.ps.load_state(arrays)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: parameters do not fit the stored configs ({exc})") from None
        model.history = list(meta.get("history", []))
        model.meta = meta
        return model

    def load_base(self, other: "AlignedModel") -> None:
        """Copy the ``dec.*`` weights of a stage-1 model."""
        for n in other.ps.names("dec."):
            self.ps.set_value(n, other.ps[n].data)


# --- batches --------------------------------------------------------------------------------
def encode_samples(samples: Sequence[AlignmentSample], vocab: Vocab = DEFAULT_VOCAB):
    """(inputs [B,T], targets [B,T], answer mask [B,T]) with teacher forcing."""
    seqs, starts = [], []
    for s in samples:
        p = vocab.encode(s.prompt)
        seqs.append([vocab.bos] + p + vocab.encode(s.answer) + [vocab.eos])
        starts.append(len(p))
    T = max(len(q) for q in seqs) - 1
    inputs = np.full((len(seqs), T), vocab.pad, dtype=np.int64)
    targets = np.full((len(seqs), T), vocab.pad, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for b, (q, st) in enumerate(zip(seqs, starts)):
        n = len(q) - 1
        inputs[b, :n] = q[:-1]
        targets[b, :n] = q[1:]
        mask[b, st:n] = True
    return inputs, targets, mask


@dataclass
class TrainConfig:
    batch: int = 32
    stage1_steps: int = 400
    stage2_steps: int = 2400
    warmup_steps: int = 1000
    optimizer: str = "adam"
    lr1: float = 1e-3
    lr2: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 1.0
    max_rank: int = 1
    ratios: MixRatios = field(default_factory=MixRatios)
    warmup_ratios: MixRatios = field(default_factory=lambda: MixRatios(
        align=1.0, explanation=0.0, command=0.0, counting=0.0, position=1.0, motion=1.0, planning=0.0))
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if isinstance(self.ratios, dict):
            self.ratios = MixRatios(**self.ratios)
        if isinstance(self.warmup_ratios, dict):
            self.warmup_ratios = MixRatios(**self.warmup_ratios)
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        if self.batch < 1 or self.stage1_steps < 0 or self.stage2_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("batch must be positive and step counts nonnegative")


def sample_frames(scenes: Sequence[Scene], rng: Rng, batch: int, noise: NoiseConfig,
                  spec: TokenSpec = TokenSpec()):
    """A batch of (scene, fresh noisy AD output) pairs."""
    idx = rng.integers(len(scenes), size=batch)
    return [(scenes[i], mock_ad_inference(scenes[i], rng.child(int(b)), noise, spec))
            for b, i in enumerate(idx)]


def length_buckets(lengths) -> list[np.ndarray]:
    """Split batch rows into at most two groups by length, minimising padded tokens."""
    order = np.argsort(lengths, kind="stable")
    srt = np.asarray(lengths)[order]
    n = len(srt)
    best, cut = n * srt[-1], n
    for k in range(1, n):
        cost = k * srt[k - 1] + (n - k) * srt[-1]
        if cost < best:
            best, cut = cost, k
    return [order[:cut], order[cut:]] if cut < n else [order]


def batch_loss(model: AlignedModel, samples: Sequence[AlignmentSample],
               tokens: Sequence[IntermediateTokens] | None) -> Tensor:
    """Token-mean caption loss, computed per length bucket to skip most padding.

    Equal to the loss of the padded batch up to float rounding.
    """
    inputs, targets, mask = encode_samples(samples, model.vocab)
    lengths = mask.shape[1] - np.argmax(mask[:, ::-1], axis=1)
    total = float(mask.sum())
    loss = None
    for idx in length_buckets(lengths):
        t = int(lengths[idx].max())
        tk = [tokens[i] for i in idx] if tokens is not None else None
        part = caption_loss(model.logits(inputs[idx, :t], tk), targets[idx, :t], mask[idx, :t])
        part = part * (float(mask[idx].sum()) / total)
        loss = part if loss is None else loss + part
    return loss


def _run(model: AlignedModel, scenes: Sequence[Scene], cfg: TrainConfig, rng: Rng, stage: int,
         steps: int, lr: float, use_context: bool) -> None:
    ps = model.ps
    opt = optim.make_optimizer(cfg.optimizer, ps, lr, cfg.momentum)
    steps_per_epoch = max(1, math.ceil(len(scenes) / cfg.batch))
    last_good = ps.state()
    running: list[float] = []
    for step in range(1, steps + 1):
        srng = rng.child(step)
        frames = sample_frames(scenes, srng.child("frames"), cfg.batch, cfg.noise)
        ratios = cfg.warmup_ratios if (stage == 2 and step <= cfg.warmup_steps) else cfg.ratios
        samples = build_batch(frames, ratios, srng.child("tasks"), cfg.max_rank)
        tokens = [tk for _, tk in frames] if use_context else None
        loss = batch_loss(model, samples, tokens)
        value = float(loss.data)
        if not math.isfinite(value):
            ps.load_state(last_good)
            raise TrainingAborted(step, f"non-finite loss {value}", last_good)
        try:
            grads = optim.grad(loss, ps)
            if cfg.grad_clip > 0:
                optim.clip_grads(grads, cfg.grad_clip)
            opt.step(grads)
        except optim.NonFiniteGradient as exc:
            ps.load_state(last_good)
            raise TrainingAborted(step, str(exc), last_good) from exc
        running.append(value)
        if step % steps_per_epoch == 0 or step == steps:
            rec = {"stage": stage, "epoch": math.ceil(step / steps_per_epoch), "step": step,
                   "loss": round(float(np.mean(running)), 6)}
            model.history.append(rec)
            log.info("stage %d epoch %d step %d loss %.4f", stage, rec["epoch"], step, rec["loss"])
            running = []
            last_good = ps.state()


def train_stage1(model: AlignedModel, scenes: Sequence[Scene], cfg: TrainConfig, rng: Rng) -> None:
    """Fit the base decoder on context-free text; adapters and mixer stay frozen."""
    ps = model.ps
    ps.freeze()
    ps.unfreeze("dec.")
    _run(model, scenes, cfg, rng.child("stage1"), 1, cfg.stage1_steps, cfg.lr1, use_context=False)


def train_stage2(model: AlignedModel, scenes: Sequence[Scene], cfg: TrainConfig, rng: Rng) -> dict:
    """Fit mixer, context projector and adapters with the base frozen.

    Returns the trainable-parameter audit.
    """
    ps = model.ps
    ps.freeze()
    for prefix in stage2_trainable_prefixes():
        ps.unfreeze(prefix)
    audit = parameter_audit(model)
    frozen = ps.frozen_names()
    before = ps.digest(frozen)
    _run(model, scenes, cfg, rng.child("stage2"), 2, cfg.stage2_steps, cfg.lr2, use_context=True)
    if ps.digest(frozen) != before:
        raise RuntimeError("frozen base weights changed during stage 2")
    audit["frozen_digest"] = before
    return audit


def parameter_audit(model: AlignedModel) -> dict:
    ps = model.ps
    groups = {p.rstrip("."): sum(ps[n].data.size for n in ps.names(p)) for p in stage2_trainable_prefixes()}
    return {"trainable": ps.count(trainable=True), "frozen": ps.count(trainable=False), "groups": groups}
