"""Joint decoder: modal-shared blocks over all rows, modal-specific cross-attention, linear heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dims import ModelDims
from .engine import ParameterTree, ShapeError, Tensor, add, concat, linear, reshape, split
from .transformer import block, init_block, positional_for_2d, positional_for_3d


def init_decoder(tree: ParameterTree, dims: ModelDims) -> None:
    C = dims.width_c
    tree.normal("decoder.mask3d", (C,))
    tree.normal("decoder.mask2d", (C,))
    for i in range(dims.shared_blocks):
        init_block(tree, f"decoder.shared.{i}", C, dims.mlp_ratio)
    for mod in ("3d", "2d"):
        for i in range(dims.specific_blocks):
            init_block(tree, f"decoder.specific{mod}.{i}", C, dims.mlp_ratio, cross=True)
    tree.linear("head3d", C, 3 * dims.points_per_group)
    tree.linear("head2d", C, dims.patch_pixels)


@dataclass
class DecodedFeatures:
    """Shared-decoder output split by modality.

    Rows of ``d3`` are the visible 3D tokens followed by the masked ones;
    ``order3[b, r]`` is the original token index of row ``r``. Same for 2D.
    """

    joint: Tensor        # (B, R3 + R2, C)
    d3: Tensor           # (B, R3, C)
    d2: Tensor           # (B, R2, C)
    order3: np.ndarray   # (B, R3)
    order2: np.ndarray   # (B, R2)
    n_visible3: int
    n_visible2: int


def shared_decode(e3: Tensor, e2: Tensor, vis3: np.ndarray, masked3: np.ndarray, centers: np.ndarray,
                  vis2: np.ndarray, masked2: np.ndarray, tree: ParameterTree, dims: ModelDims) -> DecodedFeatures:
    """Append mask tokens, re-add positional encodings to every row, run full-attention blocks.

    ``vis*`` / ``masked*`` are ``(B, V)`` / ``(B, M)`` original token indices
    and ``centers`` the ``(B, G2, 3)`` group centers.
    """
    B = e3.shape[0]
    if e3.shape[1] != vis3.shape[1] or e2.shape[1] != vis2.shape[1]:
        raise ShapeError(f"shared_decode: features {e3.shape}/{e2.shape} vs visible indices "
                         f"{vis3.shape}/{vis2.shape}")
    rows = np.arange(B)[:, None]
    order3 = np.concatenate([vis3, masked3], axis=1)
    order2 = np.concatenate([vis2, masked2], axis=1)
    if order3.shape[1] != dims.g2 or order2.shape[1] != dims.gi:
        raise ShapeError(f"shared_decode: {order3.shape[1]} 3D / {order2.shape[1]} 2D rows, "
                         f"expected {dims.g2} / {dims.gi}")
    pos3 = positional_for_3d(centers[rows, order3], tree)
    pos2 = positional_for_2d(order2, tree)
    v3, m3 = split(pos3, [vis3.shape[1], masked3.shape[1]], axis=1)
    v2, m2 = split(pos2, [vis2.shape[1], masked2.shape[1]], axis=1)
    x = concat([add(e3, v3), add(m3, tree["decoder.mask3d"]), add(e2, v2), add(m2, tree["decoder.mask2d"])],
               axis=1)
    for i in range(dims.shared_blocks):
        x = block(x, tree, f"decoder.shared.{i}", dims.heads)
    d3, d2 = split(x, [order3.shape[1], order2.shape[1]], axis=1)
    return DecodedFeatures(x, d3, d2, order3, order2, vis3.shape[1], vis2.shape[1])


def specific_decode(d: Tensor, ev: Tensor, tree: ParameterTree, prefix: str, dims: ModelDims) -> Tensor:
    """Cross-attention blocks: queries are the decoded rows, keys/values the visible encoder features."""
    if ev.shape[1] == 0:
        raise ValueError("specific_decode: no visible tokens to attend to")
    for i in range(dims.specific_blocks):
        d = block(d, tree, f"{prefix}.{i}", dims.heads, kv=ev)
    return d


def rec_head_3d(rows: Tensor, centers, tree: ParameterTree, points_per_group: int) -> Tensor:
    """``(B, M, C)`` rows to ``(B, M, s, 3)`` points: linear offsets added to each group center."""
    B, M, _ = rows.shape
    off = reshape(linear(rows, tree["head3d.w"], tree["head3d.b"]), (B, M, points_per_group, 3))
    return add(off, np.asarray(centers, dtype=float)[:, :, None, :])


def rec_head_2d(rows: Tensor, tree: ParameterTree) -> Tensor:
    """``(B, M, C)`` rows to ``(B, M, 256)`` pixel patches (row-major inside the token)."""
    return linear(rows, tree["head2d.w"], tree["head2d.b"])


def scatter_rows(order: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    """Place ``values[b, r]`` at slot ``order[b, r]``; the inverse of decoder row ordering."""
    out = np.zeros((order.shape[0], size) + values.shape[2:], dtype=values.dtype)
    filled = np.zeros((order.shape[0], size), dtype=np.int64)
    rows = np.arange(order.shape[0])[:, None]
    out[rows, order] = values
    np.add.at(filled, (np.broadcast_to(rows, order.shape), order), 1)
    if np.any(filled > 1):
        raise ValueError("scatter_rows: order is not injective")
    return out
