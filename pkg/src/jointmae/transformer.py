"""Joint 2D-3D encoder: positional and modality encodings, local-aligned attention, blocks."""

from __future__ import annotations

import numpy as np

from .dims import ModelDims
from .engine import (
    ParameterTree,
    ShapeError,
    Tensor,
    add,
    additive_mask,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    mul,
    reshape,
    split,
    swapaxes,
    transpose,
)
from .geometry import ViewSpec

LOCAL, GLOBAL = "local", "global"
SCHEMES = [(a, b) for a in (LOCAL, GLOBAL) for b in (LOCAL, GLOBAL)]


# ---------------------------------------------------------------- positional encodings


def sincos_table(rows: int, cols: int, dim: int) -> np.ndarray:
    """2D sine-cosine table of shape ``(rows*cols, dim)``: half the channels encode the row."""
    if dim % 4:
        raise ValueError(f"sin-cos table needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    r, c = np.divmod(np.arange(rows * cols), cols)
    parts = []
    for pos in (r, c):
        ang = pos[:, None] * omega[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def init_encodings(tree: ParameterTree, dims: ModelDims, frozen_pe2d: bool = False) -> None:
    C = dims.width_c
    tree.add("pos.pe2d", sincos_table(*dims.grid, C), trainable=not frozen_pe2d)
    tree.linear("pos.pe3d.fc1", 3, C // 2)
    tree.linear("pos.pe3d.fc2", C // 2, C)
    tree.normal("modality.m2d", (C,))
    tree.normal("modality.m3d", (C,))


def positional_for_3d(coords, tree: ParameterTree) -> Tensor:
    """Two-layer MLP (3 -> C/2 -> C) applied to each coordinate row."""
    h = gelu(linear(Tensor(np.asarray(coords, dtype=float)), tree["pos.pe3d.fc1.w"], tree["pos.pe3d.fc1.b"]))
    return linear(h, tree["pos.pe3d.fc2.w"], tree["pos.pe3d.fc2.b"])


def positional_for_2d(cells, tree: ParameterTree) -> Tensor:
    """Rows of the learnable table for flat cell indices of any shape."""
    return gather_rows(tree["pos.pe2d"], np.asarray(cells))


# ---------------------------------------------------------------- local-aligned validity


def correlation_mask(centers, cells, view: ViewSpec, scheme=(LOCAL, LOCAL),
                     token_px: int = ModelDims.TOKEN_PX) -> np.ndarray:
    """Validity over ``[3D tokens..., 2D tokens...]`` for one sample.

    ``cells`` are ``(row, col)`` token positions. A 3D token and a 2D token
    are correlated iff the 3D center projects into the 2D token's pixel
    footprint. ``scheme = (s_2d3d, s_3d2d)`` controls the 2D-query/3D-key and
    3D-query/2D-key blocks; ``"global"`` makes that block all-valid.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    for s in scheme:
        if s not in (LOCAL, GLOBAL):
            raise ValueError(f"unknown attention scheme {s!r}")
    n3, n2 = len(centers), len(cells)
    row, col, inside = view.pixels(centers)
    corr = (
        inside[:, None]
        & (row[:, None] // token_px == cells[None, :, 0])
        & (col[:, None] // token_px == cells[None, :, 1])
    )
    valid = np.ones((n3 + n2, n3 + n2), dtype=bool)
    valid[n3:, :n3] = True if scheme[0] == GLOBAL else corr.T
    valid[:n3, n3:] = True if scheme[1] == GLOBAL else corr
    return valid


# ---------------------------------------------------------------- attention and blocks


def init_block(tree: ParameterTree, prefix: str, C: int, mlp_ratio: int = 4, cross: bool = False) -> None:
    tree.norm(f"{prefix}.norm1", C)
    if cross:
        tree.norm(f"{prefix}.norm_kv", C)
        tree.linear(f"{prefix}.attn.q", C, C)
        tree.linear(f"{prefix}.attn.kv", C, 2 * C)
    else:
        tree.linear(f"{prefix}.attn.qkv", C, 3 * C)
    tree.linear(f"{prefix}.attn.proj", C, C)
    tree.norm(f"{prefix}.norm2", C)
    tree.linear(f"{prefix}.mlp.fc1", C, mlp_ratio * C)
    tree.linear(f"{prefix}.mlp.fc2", mlp_ratio * C, C)


def _heads(x: Tensor, n: int, heads: int) -> list[Tensor]:
    """``(B, L, n*C)`` into ``n`` tensors of shape ``(B, heads, L, C/heads)``."""
    B, L, nC = x.shape
    d = nC // (n * heads)
    x = transpose(reshape(x, (B, L, n, heads, d)), (2, 0, 3, 1, 4))
    return [reshape(p, (B, heads, L, d)) for p in split(x, [1] * n, axis=0)]


def attention(x: Tensor, tree: ParameterTree, prefix: str, heads: int, valid=None, kv: Tensor | None = None,
              record: list | None = None) -> Tensor:
    """Multi-head attention; self-attention unless ``kv`` is given.

    ``valid`` is a boolean ``(B, Lq, Lk)`` (or broadcastable) matrix; invalid
    keys get exactly zero weight. With ``record`` set, the ``(B, heads, Lq,
    Lk)`` weights are appended to it.
    """
    B, Lq, C = x.shape
    if C % heads:
        raise ShapeError(f"attention: width {C} not divisible by {heads} heads")
    if kv is None:
        q, k, v = _heads(linear(x, tree[f"{prefix}.qkv.w"], tree[f"{prefix}.qkv.b"]), 3, heads)
    else:
        if kv.shape[0] != B or kv.shape[2] != C:
            raise ShapeError(f"attention: query {x.shape} and key/value {kv.shape} disagree")
        (q,) = _heads(linear(x, tree[f"{prefix}.q.w"], tree[f"{prefix}.q.b"]), 1, heads)
        k, v = _heads(linear(kv, tree[f"{prefix}.kv.w"], tree[f"{prefix}.kv.b"]), 2, heads)
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(C // heads))
    mask = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape[-2:] != (Lq, k.shape[2]):
            raise ShapeError(f"attention: validity {valid.shape} does not match {Lq} queries x {k.shape[2]} keys")
        mask = additive_mask(valid.reshape((-1, 1) + valid.shape[-2:]) if valid.ndim == 3 else valid)
    w = masked_softmax(scores, mask)
    if record is not None:
        record.append(w.data)
    out = reshape(transpose(matmul(w, v), (0, 2, 1, 3)), (B, Lq, C))
    return linear(out, tree[f"{prefix}.proj.w"], tree[f"{prefix}.proj.b"])


def _norm(x: Tensor, tree: ParameterTree, prefix: str) -> Tensor:
    return layer_norm(x, tree[f"{prefix}.g"], tree[f"{prefix}.b"])


def mlp(x: Tensor, tree: ParameterTree, prefix: str) -> Tensor:
    h = gelu(linear(x, tree[f"{prefix}.fc1.w"], tree[f"{prefix}.fc1.b"]))
    return linear(h, tree[f"{prefix}.fc2.w"], tree[f"{prefix}.fc2.b"])


def block(x: Tensor, tree: ParameterTree, prefix: str, heads: int, valid=None, kv: Tensor | None = None,
          record: list | None = None) -> Tensor:
    """Pre-norm block: ``x + Attn(LN x)`` then ``x + MLP(LN x)``."""
    h = _norm(x, tree, f"{prefix}.norm1")
    kv_n = None if kv is None else _norm(kv, tree, f"{prefix}.norm_kv")
    x = add(x, attention(h, tree, f"{prefix}.attn", heads, valid, kv_n, record))
    return add(x, mlp(_norm(x, tree, f"{prefix}.norm2"), tree, f"{prefix}.mlp"))


# ---------------------------------------------------------------- encoder


def init_encoder(tree: ParameterTree, dims: ModelDims, frozen_pe2d: bool = False) -> None:
    init_encodings(tree, dims, frozen_pe2d)
    for i in range(dims.enc_blocks):
        init_block(tree, f"encoder.blocks.{i}", dims.width_c, dims.mlp_ratio)


def encoder_inputs(tok3: Tensor, centers3, tok2: Tensor | None, cells2, tree: ParameterTree):
    """``T_3D + PE_3D + M_3D`` and ``T_2D + PE_2D + M_2D`` for visible rows."""
    x3 = add(add(tok3, positional_for_3d(centers3, tree)), tree["modality.m3d"])
    if tok2 is None:
        return x3, None
    x2 = add(add(tok2, positional_for_2d(cells2, tree)), tree["modality.m2d"])
    return x3, x2


def encode(x3: Tensor, x2: Tensor | None, tree: ParameterTree, dims: ModelDims, valid=None,
           record: list | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Run the joint encoder on ``concat(x3, x2)``; returns ``(E, E_3D, E_2D)``.

    ``x2 = None`` runs the 3D branch alone. ``valid`` is ``(B, L, L)`` over
    the concatenated rows, 3D first.
    """
    C = dims.width_c
    parts = [x3] if x2 is None else [x3, x2]
    for p in parts:
        if p.shape[-1] != C:
            raise ShapeError(f"encode: token width {p.shape[-1]} differs from C={C}")
    x = parts[0] if x2 is None else concat(parts, axis=1)
    for i in range(dims.enc_blocks):
        x = block(x, tree, f"encoder.blocks.{i}", dims.heads, valid, record=record)
    if x2 is None:
        return x, x, None
    e3, e2 = split(x, [x3.shape[1], x2.shape[1]], axis=1)
    return x, e3, e2
