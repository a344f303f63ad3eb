"""Masked reconstruction of a single cloud for inspection dumps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..embedding import patchify
from ..engine import ParameterTree, no_grad
from ..geometry import normalize_to_cube, write_pgm, write_xyz
from .config import RunConfig
from .model import forward, make_batch


@dataclass
class Reconstruction:
    inputs: np.ndarray          # (N, 3)
    centers: np.ndarray         # (G2, 3)
    visible: np.ndarray         # points of visible groups
    predicted: np.ndarray       # predicted points of masked groups
    depth_in: np.ndarray        # (H, W)
    depth_masked: np.ndarray    # input map with masked cells blanked
    depth_out: np.ndarray       # predicted patches composited over the visible map

    @property
    def reconstructed(self) -> np.ndarray:
        return np.concatenate([self.visible, self.predicted])


def unpatchify(patches: np.ndarray, grid: tuple[int, int], px: int) -> np.ndarray:
    """Inverse of :func:`patchify` for one map: ``(GI, px*px)`` to ``(H, W)``."""
    r, c = grid
    return patches.reshape(r, c, px, px).transpose(0, 2, 1, 3).reshape(r * px, c * px)


def reconstruct(tree: ParameterTree, cfg: RunConfig, cloud, seed: int = 0) -> Reconstruction:
    """Mask, encode and decode one cloud (no augmentation); ``seed`` picks the view and mask."""
    dims = cfg.dims
    pts = normalize_to_cube(cloud)
    if len(pts) != dims.n_points:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(len(pts), dims.n_points, replace=len(pts) < dims.n_points)]
    batch = make_batch(pts[None], [0], seed, cfg, train=False)
    with no_grad():
        res = forward(tree, batch, cfg)
    tok, plan = res.tokens3d, res.plans[0]
    keep = ~plan.mask3d[tok.group_assignment[0]]
    masked_groups = np.isin(res.scored3[0], np.nonzero(plan.mask3d)[0])
    predicted = res.pred3.data[0][masked_groups].reshape(-1, 3)

    px = dims.TOKEN_PX
    patches = patchify(batch.maps, px).reshape(dims.gi, -1).copy()
    blank = patches.copy()
    blank[plan.mask2d] = 0.0
    out = blank.copy()
    out[res.scored2[0]] = np.clip(res.pred2.data[0], 0.0, 1.0)
    out[~plan.mask2d] = patches[~plan.mask2d]
    return Reconstruction(pts, tok.centers[0], pts[keep], predicted, batch.maps[0],
                          unpatchify(blank, dims.grid, px), unpatchify(out, dims.grid, px))


def write_reconstruction(rec: Reconstruction, out_dir) -> list[Path]:
    out = Path(out_dir)
    files = {
        "input.xyz": rec.inputs,
        "centers.xyz": rec.centers,
        "masked.xyz": rec.visible,
        "reconstructed.xyz": rec.reconstructed,
    }
    written = []
    for name, pts in files.items():
        write_xyz(out / name, pts)
        written.append(out / name)
    for name, img in (("depth_input.pgm", rec.depth_in), ("depth_masked.pgm", rec.depth_masked),
                      ("depth_reconstructed.pgm", rec.depth_out)):
        write_pgm(out / name, img)
        written.append(out / name)
    return written
