"""Gradients over a :class:`ParamStore` and a momentum SGD step."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .params import ParamStore
from .tensor import GraphError, Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, grad: np.ndarray):
        bad = int(np.size(grad) - np.isfinite(grad).sum())
        super().__init__(f"non-finite gradient for parameter {name!r} "
                         f"({bad}/{np.size(grad)} entries, shape {np.shape(grad)})")
        self.param = name


def grad(loss: Tensor, params: ParamStore) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss; return gradients for trainable params only.

    Trainable parameters that the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss is not a recorded Tensor")
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    params.zero_grad()
    if loss.requires_grad:
        loss.backward()
    out = {}
    for name in params.trainable_names():
        t = params[name]
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    params.zero_grad()
    return out


def clip_grads(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


class SGD:
    """Gradient descent with heavy-ball momentum.

    ``v <- momentum * v + g``; ``w <- w - lr * v``.  Frozen parameters are
    never touched even if a gradient is supplied for them.
    """

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name, g)
        for name, g in grads.items():
            if not self.params.is_trainable(name):
                continue
            w = self.params[name].data
            if self.weight_decay:
                g = g + self.weight_decay * w
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            self.params[name].data = w - lr * g.astype(w.dtype, copy=False)


def optimizer_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
                   momentum: float = 0.0, state: dict | None = None) -> ParamStore:
    """Functional single step; ``state`` carries momentum buffers between calls."""
    opt = SGD(params, lr, momentum)
    if state is not None:
        opt.velocity = state
    opt.step(grads)
    return params


class Adam:
    """Adam with bias correction and decoupled weight decay (AdamW)."""

    def __init__(self, params: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name, g)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            if not self.params.is_trainable(name):
                continue
            w = self.params[name].data
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
            v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * w
            self.params[name].data = (w - lr * upd).astype(w.dtype, copy=False)


def make_optimizer(kind: str, params: ParamStore, lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(params, lr, momentum, weight_decay)
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
