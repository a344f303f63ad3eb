"""Desk-scale ablation sweeps: attention schemes, cross-loss views, mask ratio."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Callable

from .config import RunConfig
from .data import stack, synth_dataset
from .probe import extract_features, linear_probe
from .train import load_checkpoint, pretrain

AXES = ("attention", "views", "ratio")
ABLATION_FIELDS = ("axis", "arm", "probe_accuracy", "final_total", "epochs")


def arms(axis: str) -> list[tuple[str, dict]]:
    """``(label, config overrides)`` for each arm of an axis."""
    if axis == "attention":
        return [(f"2D-3D {a} / 3D-2D {b}", {"scheme": (a, b)})
                for a, b in (("global", "global"), ("local", "global"), ("global", "local"), ("local", "local"))]
    if axis == "views":
        return [("no cross loss", {"cross_loss": False}), ("1 view", {"cross_views": 1}),
                ("4 views", {"cross_views": 4})]
    if axis == "ratio":
        return [(f"ratio {r:.2f}", {"mask_ratio": r}) for r in (0.6, 0.7, 0.75, 0.8)]
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {list(AXES)}")


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label).strip("_")


def run_ablation(axis: str, base: RunConfig, out_csv, log: Callable[[str], None] | None = None) -> list[dict]:
    """Pre-train and probe every arm of ``axis``; one CSV row per arm."""
    say = log or (lambda s: None)
    out_csv = Path(out_csv)
    root = out_csv.parent / f"ablate_{axis}"
    train, test = synth_dataset(base.dataset, base.data_seed, base.dims.n_points)
    xtr, ytr = stack(train)
    xte, yte = stack(test)
    rows = []
    for label, overrides in arms(axis):
        cfg = replace(base, out_dir=str(root / _slug(label)), **overrides)
        say(f"[{axis}] {label}: pre-training {cfg.epochs} epochs")
        res = pretrain(cfg, data=xtr)
        tree, _, _, _ = load_checkpoint(res.checkpoint)
        acc = linear_probe(extract_features(tree, cfg.dims, xtr), ytr, extract_features(tree, cfg.dims, xte), yte,
                           cfg.probe_reg)
        rows.append({"axis": axis, "arm": label, "probe_accuracy": acc, "final_total": res.rows[-1]["total"],
                     "epochs": cfg.epochs})
        say(f"[{axis}] {label}: probe accuracy {100 * acc:.1f}%")
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows
