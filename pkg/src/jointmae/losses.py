"""Reconstruction losses: grouped Chamfer, masked-pixel MSE, cross-modal projection loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import (
    Tensor,
    add,
    as_tensor,
    gather_rows,
    mean,
    mul,
    record_selection,
    reshape,
    squared_error,
    sub,
    sum_,
)
from .geometry import ViewSpec, soft_project_batch


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return (diff * diff).sum(axis=-1)


def chamfer_groups(pred, target, valid: np.ndarray | None = None) -> Tensor:
    """Per-group l2 Chamfer distance, shape ``(G,)``.

    ``pred`` is ``(G, S, 3)``, ``target`` is ``(G, T, 3)`` with optional
    ``valid`` flags ``(G, T)`` for padded targets (each group needs at least
    one valid target). Nearest neighbours are found on the values, then the
    matched points are gathered, so gradients reach both sets.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    G, S, _ = pred.shape
    T = target.shape[1]
    if S == 0 or T == 0:
        raise ValueError("chamfer: empty point set")
    valid = np.ones((G, T), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("chamfer: a group has no target points")
    d2 = _pairwise_sq(pred.data, target.data)
    d2 = np.where(valid[:, None, :], d2, np.inf)
    base = np.arange(G)[:, None]
    flat_p = reshape(pred, (G * S, 3))
    flat_t = reshape(target, (G * T, 3))

    nn_t = np.argmin(d2, axis=2)
    nn_p = np.argmin(d2, axis=1)
    record_selection(nn_t)
    record_selection(nn_p)
    near_t = gather_rows(flat_t, nn_t + T * base)                               # (G, S, 3)
    dp = sub(pred, near_t)
    term_p = mean(sum_(mul(dp, dp), axis=2), axis=1)

    near_p = gather_rows(flat_p, np.where(valid, nn_p, 0) + S * base)           # (G, T, 3)
    dt = sub(target, near_p)
    weights = valid / counts[:, None]
    term_t = sum_(mul(sum_(mul(dt, dt), axis=2), weights), axis=1)
    return add(term_p, term_t)


def chamfer_l2(a, b) -> Tensor:
    """Symmetric mean squared nearest-neighbour distance between two point sets."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer: empty point set")
    return reshape(chamfer_groups(reshape(a, (1,) + a.shape), reshape(b, (1,) + b.shape)), ())


def loss_3d(pred: Tensor, target: np.ndarray, valid: np.ndarray, pooled: bool = False) -> Tensor:
    """Mean over masked groups of the per-group Chamfer distance.

    ``pred`` is ``(B, M, S, 3)``; ``target`` is padded ``(B, M, T, 3)`` with
    ``valid`` flags. ``pooled`` instead compares the union of predictions with
    the union of targets per sample.
    """
    B, M, S, _ = pred.shape
    if M == 0:
        warnings.warn("loss_3d: no masked groups, returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    T = target.shape[2]
    if pooled:
        return mean(chamfer_groups(reshape(pred, (B, M * S, 3)), target.reshape(B, M * T, 3),
                                   valid.reshape(B, M * T)))
    return mean(chamfer_groups(reshape(pred, (B * M, S, 3)), target.reshape(B * M, T, 3), valid.reshape(B * M, T)))


def loss_2d(pred: Tensor, target_patches: np.ndarray) -> Tensor:
    """Mean squared error over all pixels of the masked patches (``(B, M, 256)`` each)."""
    if pred.shape[1] == 0:
        return Tensor(0.0)
    return squared_error(pred, Tensor(target_patches))


def loss_cross(points: Tensor, item: np.ndarray, views: Sequence[Sequence[ViewSpec]], references: np.ndarray,
               sigma: float = 1.0, hardness: float = 50.0, foreground_only: bool = False) -> tuple[Tensor, list[float]]:
    """Mean over views of the MSE between soft projections of the reconstruction and reference maps.

    ``points`` is the flat ``(P, 3)`` reconstruction with ``item[i]`` naming
    the sample of point ``i``; ``views[b][v]`` and ``references[b, v]`` are
    the cameras and ``(H, W)`` reference maps. Returns the loss and the
    per-view terms.
    """
    B, V, H, W = references.shape
    item = np.asarray(item, dtype=np.int64)
    # each point is splatted once per view of its sample
    src = np.concatenate([np.nonzero(item == b)[0] for b in range(B) for _ in range(V)])
    dst = np.concatenate([np.full(int(np.sum(item == b)), b * V + v) for b in range(B) for v in range(V)])
    flat_views = [vw for per in views for vw in per]
    soft = soft_project_batch(gather_rows(points, src), dst, flat_views, sigma, hardness)
    diff = sub(soft, Tensor(references.reshape(B * V, H, W)))
    sq = reshape(mul(diff, diff), (B, V, H * W))
    if foreground_only:
        fg = (references.reshape(B, V, H * W) > 0).astype(float)
        denom = np.maximum(fg.sum(axis=(0, 2)), 1.0)
        per_view = sum_(mul(sq, fg / denom[None, :, None]), axis=(0, 2))
    else:
        per_view = mean(sq, axis=(0, 2))
    return mean(per_view), [float(x) for x in per_view.data]


@dataclass
class LossBreakdown:
    l3d: float
    l2d: float
    lcross: float
    total: float
    per_view: list = field(default_factory=list)
    tensor: Tensor | None = None

    def row(self) -> dict:
        return {"l3d": self.l3d, "l2d": self.l2d, "lcross": self.lcross, "total": self.total}


def overall_loss(l3d, l2d, lcross=None, weights=(1.0, 1.0, 1.0), per_view=None) -> LossBreakdown:
    """Weighted sum of the three terms; ``lcross=None`` disables the cross term."""
    terms = []
    for t, w in zip((l3d, l2d, lcross), weights):
        if t is None:
            terms.append(None)
            continue
        t = as_tensor(t)
        terms.append(t if w == 1.0 else mul(t, float(w)))
    live = [t for t in terms if t is not None]
    total = live[0]
    for t in live[1:]:
        total = add(total, t)
    vals = [0.0 if t is None else float(t.data) for t in terms]
    return LossBreakdown(vals[0], vals[1], vals[2], float(total.data), list(per_view or []), total)
