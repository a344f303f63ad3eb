"""Model parameter initialization, batch preparation and the full forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..decoder import init_decoder, rec_head_2d, rec_head_3d, shared_decode, specific_decode
from ..dims import ModelDims
from ..embedding import (
    MaskPlan,
    TokenSet3D,
    embed_2d,
    embed_3d,
    init_embedding,
    make_mask_plan,
    patchify,
    select_rows,
    visible_index,
    visible_tokens,
)
from ..engine import ParameterTree, Tensor, concat, reshape, split
from ..geometry import ViewSpec, augment, project_depth, sample_view
from ..losses import LossBreakdown, loss_2d, loss_3d, loss_cross, overall_loss
from ..transformer import correlation_mask, encode, encoder_inputs, init_encoder
from .config import RunConfig


def init_model(dims: ModelDims, seed: int = 0, frozen_pe2d: bool = False) -> ParameterTree:
    tree = ParameterTree(seed)
    init_embedding(tree, dims)
    init_encoder(tree, dims, frozen_pe2d)
    init_decoder(tree, dims)
    return tree


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    index: np.ndarray          # dataset indices of the items
    clouds: np.ndarray         # (B, N, 3) augmented clouds
    views: list                # views[b][v]; v = 0 is the input view
    maps: np.ndarray           # (B, H, W) input depth maps
    references: np.ndarray     # (B, V, H, W) cross-loss reference maps
    mask_seeds: list


def item_seeds(seed: int, epoch: int, index: int) -> list[np.random.SeedSequence]:
    """Independent streams (augment, view, mask, extra views) for one item in one epoch."""
    return np.random.SeedSequence([seed, epoch, index]).spawn(4)


def make_batch(clouds: np.ndarray, index, epoch: int, cfg: RunConfig, train: bool = True) -> Batch:
    """Augment, pick a random view and project, per item; all randomness keyed on (seed, epoch, index)."""
    dims = cfg.dims
    index = np.asarray(index)
    aug, views, maps, refs, mseeds = [], [], [], [], []
    for i in index:
        s_aug, s_view, s_mask, s_extra = item_seeds(cfg.seed, epoch, int(i))
        pts = augment(clouds[i], s_aug, cfg.augment) if train else np.asarray(clouds[i], dtype=float)
        v0 = sample_view(s_view, dims.height, dims.width)
        extra = [sample_view(s, dims.height, dims.width) for s in s_extra.spawn(cfg.cross_views - 1)]
        m = project_depth(pts, v0)
        aug.append(pts)
        views.append([v0] + extra)
        maps.append(m)
        refs.append(np.stack([m] + [project_depth(pts, v) for v in extra]))
        mseeds.append(s_mask)
    return Batch(index, np.stack(aug), views, np.stack(maps), np.stack(refs), mseeds)


# ---------------------------------------------------------------- forward


@dataclass
class ForwardResult:
    loss: LossBreakdown
    tokens3d: TokenSet3D
    plans: list
    pred3: Tensor              # (B, M3, s, 3) predicted points of the scored groups
    pred2: Tensor              # (B, M2, 256) predicted patches of the scored cells
    scored3: np.ndarray        # (B, M3) group indices scored by the 3D loss
    scored2: np.ndarray        # (B, M2) cell indices scored by the 2D loss
    targets3: np.ndarray       # (B, M3, T, 3) padded ground-truth groups
    valid3: np.ndarray
    validity: np.ndarray       # (B, L, L) encoder attention validity
    attention: list = field(default_factory=list)


def group_targets(clouds: np.ndarray, assignment: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Padded ground-truth points of ``groups[b]`` (``(B, M)``) and their validity flags."""
    B, M = groups.shape
    members = [[np.nonzero(assignment[b] == g)[0] for g in groups[b]] for b in range(B)]
    T = max((len(m) for per in members for m in per), default=1)
    target = np.zeros((B, M, T, 3))
    valid = np.zeros((B, M, T), dtype=bool)
    for b in range(B):
        for j, m in enumerate(members[b]):
            target[b, j, : len(m)] = clouds[b, m]
            valid[b, j, : len(m)] = True
    return target, valid


def forward(tree: ParameterTree, batch: Batch, cfg: RunConfig, record_attention: bool = False) -> ForwardResult:
    dims = cfg.dims
    B = len(batch.index)
    rows = np.arange(B)[:, None]

    tok3 = embed_3d(batch.clouds, tree, dims)
    plans = [make_mask_plan(cfg.mask_ratio, dims.g2, dims.gi, dims.grid, batch.mask_seeds[b], tok3.fine_parent[b])
             for b in range(B)]
    mask3 = np.stack([p.mask3d for p in plans])
    mask2 = np.stack([p.mask2d for p in plans])
    tok3.visible = ~mask3
    tok2 = embed_2d(batch.maps, tree, dims, mask2)

    vis3, vis2 = visible_tokens(tok3), visible_tokens(tok2)
    x3, x2 = encoder_inputs(vis3.tokens, vis3.meta, vis2.tokens, vis2.index, tree)
    validity = np.stack([correlation_mask(vis3.meta[b], vis2.meta[b], batch.views[b][0], cfg.scheme, dims.TOKEN_PX)
                         for b in range(B)])
    record = [] if record_attention else None
    _, e3, e2 = encode(x3, x2, tree, dims, validity, record)

    hid3, hid2 = visible_index(mask3), visible_index(mask2)
    dec = shared_decode(e3, e2, vis3.index, hid3, tok3.centers, vis2.index, hid2, tree, dims)
    d3 = specific_decode(dec.d3, e3, tree, "decoder.specific3d", dims)
    d2 = specific_decode(dec.d2, e2, tree, "decoder.specific2d", dims)

    if cfg.full_targets:
        scored3, scored2 = dec.order3, dec.order2
        r3, r2 = d3, d2
    else:
        scored3, scored2 = hid3, hid2
        r3 = split(d3, [dec.n_visible3, hid3.shape[1]], axis=1)[1]
        r2 = split(d2, [dec.n_visible2, hid2.shape[1]], axis=1)[1]
    pred3 = rec_head_3d(r3, tok3.centers[rows, scored3], tree, dims.points_per_group)
    pred2 = rec_head_2d(r2, tree)

    targets3, valid3 = group_targets(batch.clouds, tok3.group_assignment, scored3)
    l3 = loss_3d(pred3, targets3, valid3, pooled=cfg.pooled_chamfer)
    gt_patches = patchify(batch.maps, dims.TOKEN_PX).reshape(B, dims.gi, -1)[rows, scored2]
    l2 = loss_2d(pred2, gt_patches)

    lc, per_view = None, []
    if cfg.cross_loss:
        # reconstruction = ground-truth points of visible groups + predicted points of masked groups
        keep = [~mask3[b][tok3.group_assignment[b]] for b in range(B)]
        vis_pts = np.concatenate([batch.clouds[b][keep[b]] for b in range(B)])
        vis_item = np.concatenate([np.full(int(keep[b].sum()), b) for b in range(B)])
        pm = pred3 if not cfg.full_targets else select_rows(reshape(pred3, (B, dims.g2, -1)), _masked_rows(scored3, mask3))
        pm = reshape(pm, (-1, 3))
        n_pred = pm.shape[0] // B
        points = concat([Tensor(vis_pts), pm], axis=0)
        item = np.concatenate([vis_item, np.repeat(np.arange(B), n_pred)])
        lc, per_view = loss_cross(points, item, batch.views, batch.references, cfg.sigma, cfg.hardness,
                                  cfg.cross_foreground_only)
    breakdown = overall_loss(l3, l2, lc, cfg.loss_weights, per_view)
    return ForwardResult(breakdown, tok3, plans, pred3, pred2, scored3, scored2, targets3, valid3, validity,
                         record or [])


def _masked_rows(order: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Positions within ``order`` rows whose token is masked."""
    rows = np.arange(order.shape[0])[:, None]
    return visible_index(mask[rows, order])
