"""Synthetic labelled point clouds sampled from parametric surfaces."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import normalize_to_cube, random_rotation
from .config import SHAPE_CLASSES, DatasetSpec


@dataclass
class LabeledCloud:
    points: np.ndarray   # (N, 3), normalized to the canonical cube
    label: int
    params: dict         # generator parameters for reproducibility


def _pick(rng, weights, n):
    w = np.asarray(weights, dtype=float)
    return rng.choice(len(w), size=n, p=w / w.sum())


def sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform (by area) on a unit-size surface, before any deformation."""
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        out = np.empty((n, 3))
        axis, sign = face // 2, np.where(face % 2, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            others = [b for b in range(3) if b != a]
            out[np.ix_(sel, [a])] = sign[sel, None]
            out[np.ix_(sel, others)] = uv[sel]
        return out
    if kind == "cylinder":
        # radius 1, height 2: side area 4 pi, each cap pi
        part = _pick(rng, [4.0, 1.0, 1.0], n)
        th = rng.uniform(0.0, 2 * math.pi, n)
        r = np.where(part == 0, 1.0, np.sqrt(rng.uniform(0.0, 1.0, n)))
        z = np.where(part == 0, rng.uniform(-1.0, 1.0, n), np.where(part == 1, 1.0, -1.0))
        return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
    if kind == "torus":
        R, r = 1.0, 0.4
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(0.0, 2 * math.pi, 2 * n)
            v = rng.uniform(0.0, 2 * math.pi, 2 * n)
            keep = rng.uniform(0.0, R + r, 2 * n) < R + r * np.cos(v)   # area element
            u, v = u[keep], v[keep]
            ring = R + r * np.cos(v)
            out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1)])
        return out[:n]
    if kind == "cone":
        # base radius 1 at z=-1, apex at z=1; lateral area pi*sqrt(5), base pi
        part = _pick(rng, [math.sqrt(5.0), 1.0], n)
        th = rng.uniform(0.0, 2 * math.pi, n)
        s = np.sqrt(rng.uniform(0.0, 1.0, n))          # uniform over the disc / lateral surface
        z = np.where(part == 0, 1.0 - 2.0 * s, -1.0)
        return np.stack([s * np.cos(th), s * np.sin(th), z], axis=1)
    raise ValueError(f"unknown shape class {kind!r}; choose from {list(SHAPE_CLASSES)}")


def make_shape(kind: str, n: int, spec: DatasetSpec, seed) -> tuple[np.ndarray, dict]:
    rng = np.random.default_rng(seed)
    pts = sample_surface(kind, n, rng)
    scale = rng.uniform(1.0 - spec.deform, 1.0 + spec.deform, size=3)
    pts = pts * scale + rng.normal(0.0, spec.noise, size=pts.shape)
    if spec.rotate == "so3":
        pts = pts @ random_rotation(rng).T
    elif spec.rotate == "upright":
        a = rng.uniform(0.0, 2 * math.pi)
        c, s = math.cos(a), math.sin(a)
        pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    return normalize_to_cube(pts), {"kind": kind, "scale": scale.tolist()}


def synth_dataset(spec: DatasetSpec, seed: int, n_points: int) -> tuple[list[LabeledCloud], list[LabeledCloud]]:
    """Disjoint train / test splits; shape ``i`` of class ``c`` in split ``s`` uses seed ``(seed, s, c, i)``."""
    splits = []
    for split_id, per_class in enumerate((spec.train_per_class, spec.test_per_class)):
        items = []
        for label, kind in enumerate(spec.classes):
            for i in range(per_class):
                pts, params = make_shape(kind, n_points, spec, [seed, split_id, label, i])
                items.append(LabeledCloud(pts, label, dict(params, seed=[seed, split_id, label, i])))
        splits.append(items)
    return splits[0], splits[1]


def stack(items: list[LabeledCloud]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([it.points for it in items]), np.array([it.label for it in items])
