"""Hierarchical 3D and 2D tokenizers and the 2D-3D masking plan.

Both embedders are batched: clouds are ``(B, N, 3)`` and depth maps
``(B, H, W)``; unbatched inputs get a leading axis of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dims import ModelDims
from .engine import (
    ParameterTree,
    Tensor,
    concat,
    conv2d_3x3_s2,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    max_,
    mul,
    reshape,
)
from .geometry import farthest_point_sample_batch, knn


@dataclass
class MaskPlan:
    """Masked (True) / visible (False) flags for one sample."""

    ratio: float
    seed: object
    mask3d: np.ndarray
    mask2d: np.ndarray
    fine_mask3d: np.ndarray | None = None

    @property
    def visible3d(self) -> np.ndarray:
        return ~self.mask3d

    @property
    def visible2d(self) -> np.ndarray:
        return ~self.mask2d


def masked_count(ratio: float, n: int) -> int:
    return int(round(ratio * n))


def make_mask_plan(ratio: float, g2: int, gi: int, grid: tuple[int, int], seed,
                   fine_parent: np.ndarray | None = None) -> MaskPlan:
    """Random 3D group mask and random 2D cell mask with exact masked counts.

    ``fine_parent[j]`` is the final-scale group nearest to stage-1 center ``j``;
    when given, the fine mask inherits each parent's bit.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if grid[0] * grid[1] != gi:
        raise ValueError(f"grid {grid} does not hold {gi} cells")
    rng = np.random.default_rng(seed)
    mask3d = np.zeros(g2, dtype=bool)
    mask3d[rng.permutation(g2)[: masked_count(ratio, g2)]] = True
    mask2d = np.zeros(gi, dtype=bool)
    mask2d[rng.permutation(gi)[: masked_count(ratio, gi)]] = True
    fine = None if fine_parent is None else mask3d[np.asarray(fine_parent)]
    return MaskPlan(ratio, seed, mask3d, mask2d, fine)


def upsample_mask(mask2d: np.ndarray, grid: tuple[int, int], factor: int) -> np.ndarray:
    """``(B, GI)`` cell flags to ``(B, rows*factor, cols*factor)`` flags."""
    m = np.asarray(mask2d, dtype=bool).reshape((-1,) + tuple(grid))
    return m.repeat(factor, axis=1).repeat(factor, axis=2)


# ---------------------------------------------------------------- parameters


def init_embedding(tree: ParameterTree, dims: ModelDims) -> None:
    C, C0, C1 = dims.width_c, dims.point_dim, dims.stage1_dim
    tree.linear("embed3d.point", 3, C0)
    tree.linear("embed3d.stage1.fc1", 3 + C0, C1)
    tree.linear("embed3d.stage1.fc2", C1, C1)
    tree.linear("embed3d.stage2.fc1", 3 + C1, C)
    tree.linear("embed3d.stage2.fc2", C, C)

    D1, D2 = dims.conv_dims
    tree.linear("embed2d.patch", dims.PATCH * dims.PATCH, D1)
    for i, (cin, cout) in enumerate([(D1, D2), (D2, C)], start=1):
        tree.uniform_fan_in(f"embed2d.conv{i}.w", (3, 3, cin, cout), 9 * cin)
        tree.zeros(f"embed2d.conv{i}.b", (cout,))
        tree.norm(f"embed2d.norm{i}", cout)


# ---------------------------------------------------------------- 3D


@dataclass
class TokenSet3D:
    tokens: Tensor                 # (B, G2, C)
    centers: np.ndarray            # (B, G2, 3)
    center_index: np.ndarray       # (B, G2) indices into the input points
    stage_centers: np.ndarray      # (B, G1, 3)
    fine_parent: np.ndarray        # (B, G1) final group nearest to each stage-1 center
    group_assignment: np.ndarray   # (B, N) final group of each input point
    visible: np.ndarray | None = None  # (B, G2)


def _group_block(tree: ParameterTree, prefix: str, feats: Tensor, coords: np.ndarray, center_idx: np.ndarray,
                 nbr: np.ndarray) -> Tensor:
    """Mini-PointNet: shared MLP on [center-relative xyz, feature] then max over neighbours."""
    B, M, F = feats.shape
    rows = np.arange(B)[:, None, None]
    rel = coords[rows, nbr] - coords[rows[:, :, 0], center_idx][:, :, None, :]
    f = gather_rows(reshape(feats, (B * M, F)), nbr + M * rows)      # (B, G, k, F)
    x = concat([Tensor(rel), f], axis=-1)
    h = gelu(linear(x, tree[f"{prefix}.fc1.w"], tree[f"{prefix}.fc1.b"]))
    h = linear(h, tree[f"{prefix}.fc2.w"], tree[f"{prefix}.fc2.b"])
    return max_(h, axis=2)


def embed_3d(clouds, tree: ParameterTree, dims: ModelDims, visible: np.ndarray | None = None) -> TokenSet3D:
    """Two-stage FPS + k-NN + mini-PointNet tokenizer (embed-then-drop masking).

    Stage 1 groups the ``k1`` nearest input points around ``G1`` FPS centers;
    stage 2 groups the ``k2`` nearest stage-1 tokens around ``G2`` FPS picks
    among the stage-1 centers. FPS starts at the lexicographic minimum.
    """
    pts = np.asarray(clouds, dtype=float)
    if pts.ndim == 2:
        pts = pts[None]
    B, N, _ = pts.shape
    if dims.g2 > dims.g1 or dims.g1 > N:
        raise ValueError(f"embed_3d: need G2 <= G1 <= N, got {dims.g2}, {dims.g1}, {N}")
    if dims.k1 > N or dims.k2 > dims.g1:
        raise ValueError(f"embed_3d: k1={dims.k1} or k2={dims.k2} exceeds the available points")
    rows = np.arange(B)[:, None]

    c1 = farthest_point_sample_batch(pts, dims.g1)                       # (B, G1)
    nbr1 = knn(pts[rows, c1], pts, dims.k1)                              # (B, G1, k1)
    point_feats = linear(Tensor(pts), tree["embed3d.point.w"], tree["embed3d.point.b"])
    tok1 = _group_block(tree, "embed3d.stage1", point_feats, pts, c1, nbr1)

    centers1 = pts[rows, c1]
    c2 = farthest_point_sample_batch(centers1, dims.g2)                  # indices into stage-1 centers
    nbr2 = knn(centers1[rows, c2], centers1, dims.k2)
    tok2 = _group_block(tree, "embed3d.stage2", tok1, centers1, c2, nbr2)

    centers2 = centers1[rows, c2]
    fine_parent = knn(centers1, centers2, 1)[..., 0]
    assignment = knn(pts, centers2, 1)[..., 0]
    return TokenSet3D(tok2, centers2, c1[rows, c2], centers1, fine_parent, assignment, visible)


# ---------------------------------------------------------------- 2D


@dataclass
class TokenSet2D:
    tokens: Tensor            # (B, GI, C)
    grid: np.ndarray          # (GI, 2) token (row, col)
    visible: np.ndarray | None = None  # (B, GI)

    def footprint(self, index: int, px: int = ModelDims.TOKEN_PX) -> tuple[slice, slice]:
        r, c = self.grid[index]
        return slice(r * px, (r + 1) * px), slice(c * px, (c + 1) * px)


# Instrumentation: how many times the 2D branch has run in this process.
EMBED_2D_CALLS = {"count": 0}


def token_grid(dims: ModelDims) -> np.ndarray:
    r, c = dims.grid
    return np.stack(np.divmod(np.arange(r * c), c), axis=1)


def patchify(maps: np.ndarray, p: int) -> np.ndarray:
    """``(B, H, W)`` to ``(B, H/p, W/p, p*p)`` with row-major pixels inside a patch."""
    B, H, W = maps.shape
    return maps.reshape(B, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4).reshape(B, H // p, W // p, p * p)


def embed_2d(maps, tree: ParameterTree, dims: ModelDims, mask2d: np.ndarray | None = None) -> TokenSet2D:
    """4x4 patchify + linear, then two (conv 3x3/2, layer-norm, GELU) stages.

    Features at positions whose final token is masked are zeroed after the
    patch projection and after each stage, so visible tokens never see
    masked pixels.
    """
    EMBED_2D_CALLS["count"] += 1
    m = np.asarray(maps, dtype=float)
    if m.ndim == 2:
        m = m[None]
    B, H, W = m.shape
    if H % dims.TOKEN_PX or W % dims.TOKEN_PX:
        raise ValueError(f"embed_2d: map size {H}x{W} is not divisible by {dims.TOKEN_PX}")
    if (H, W) != (dims.height, dims.width):
        raise ValueError(f"embed_2d: map size {H}x{W} differs from configured {dims.height}x{dims.width}")
    grid = dims.grid
    keep = None
    if mask2d is not None:
        mask2d = np.asarray(mask2d, dtype=bool).reshape(B, -1)
        keep = {f: (~upsample_mask(mask2d, grid, f)).astype(float)[..., None] for f in (4, 2, 1)}

    x = linear(Tensor(patchify(m, dims.PATCH)), tree["embed2d.patch.w"], tree["embed2d.patch.b"])
    if keep is not None:
        x = mul(x, keep[4])
    for i, f in ((1, 2), (2, 1)):
        x = conv2d_3x3_s2(x, tree[f"embed2d.conv{i}.w"], tree[f"embed2d.conv{i}.b"])
        x = gelu(layer_norm(x, tree[f"embed2d.norm{i}.g"], tree[f"embed2d.norm{i}.b"]))
        if keep is not None:
            x = mul(x, keep[f])
    tokens = reshape(x, (B, dims.gi, dims.width_c))
    return TokenSet2D(tokens, token_grid(dims), None if mask2d is None else ~mask2d)


# ---------------------------------------------------------------- selection


@dataclass
class VisibleSet:
    tokens: Tensor        # (B, V, C)
    index: np.ndarray     # (B, V) original token indices, ascending
    meta: np.ndarray      # per-row metadata: centers (B, V, 3) or grid cells (B, V, 2)


def select_rows(tokens: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``index[b]`` of ``tokens[b]`` for a ``(B, G, C)`` tensor."""
    B, G, C = tokens.shape
    flat = np.asarray(index) + G * np.arange(B)[:, None]
    return gather_rows(reshape(tokens, (B * G, C)), flat)


def visible_index(visible: np.ndarray) -> np.ndarray:
    """``(B, G)`` flags to ``(B, V)`` ascending indices; every row needs the same V."""
    vis = np.asarray(visible, dtype=bool)
    counts = vis.sum(axis=1)
    if len(set(counts.tolist())) > 1:
        raise ValueError(f"visible counts differ across the batch: {counts.tolist()}")
    return np.nonzero(vis)[1].reshape(vis.shape[0], -1)


def visible_tokens(tokens) -> VisibleSet:
    """Visible rows of a token set, in original order, with matching metadata."""
    B, G = tokens.tokens.shape[:2]
    vis = np.ones((B, G), dtype=bool) if tokens.visible is None else tokens.visible
    idx = visible_index(vis)
    if isinstance(tokens, TokenSet3D):
        meta = tokens.centers[np.arange(B)[:, None], idx]
    else:
        meta = tokens.grid[idx]
    return VisibleSet(select_rows(tokens.tokens, idx), idx, meta)
