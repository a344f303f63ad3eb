"""AdamW with decoupled weight decay, cosine-with-warmup schedule, grad clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParameterTree


@dataclass
class Schedule:
    base_lr: float
    min_lr: float = 0.0
    warmup_epochs: float = 0.0
    total_epochs: float = 1.0


def lr_at(epoch: float, config: Schedule) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine down to ``min_lr``.

    ``epoch`` may be fractional so that per-iteration schedules work.
    """
    w, T = config.warmup_epochs, config.total_epochs
    if epoch < w:
        return config.base_lr * epoch / w
    if epoch >= T:
        return config.min_lr
    frac = (epoch - w) / (T - w)
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{k}": a for k, a in self.m.items()}
        out.update({f"opt/v/{k}": a for k, a in self.v.items()})
        return out

    def meta(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "betas": list(self.betas),
                "eps": self.eps, "step": self.step}

    @classmethod
    def restore(cls, arrays: dict, meta: dict) -> "OptimizerState":
        st = cls(lr=meta["lr"], weight_decay=meta["weight_decay"], betas=tuple(meta["betas"]),
                 eps=meta["eps"], step=meta["step"])
        for k, a in arrays.items():
            if k.startswith("opt/m/"):
                st.m[k[len("opt/m/"):]] = np.array(a)
            elif k.startswith("opt/v/"):
                st.v[k[len("opt/v/"):]] = np.array(a)
        return st


def adamw_step(params: ParameterTree, state: OptimizerState, lr: float | None = None) -> None:
    """One AdamW update of every trainable parameter. Gradients are left as-is."""
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for path, p in params.trainable():
        if p.grad is None:
            raise ValueError(f"adamw_step: parameter {path!r} has no gradient")
        g = p.grad
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * (update + state.weight_decay * p.data)


def clip_grad_norm(params: ParameterTree, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in params.trainable()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in params.trainable():
            p.grad *= scale
    return total
