"""Matplotlib figures written next to the CSV outputs: loss curves, ablation bars, reconstruction panels."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
FIG_WIDTH = 6.0
COLORS = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "lines.linewidth": 1.4,
}


def size(scale: float = 1.0, aspect: float = GOLDEN) -> tuple[float, float]:
    return FIG_WIDTH * scale, FIG_WIDTH * scale * aspect


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(rows: list[dict], path) -> Path:
    """Per-epoch mean of each loss term and their total, log-scaled."""
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size())
        for key, label in (("total", "total"), ("l3d", "3D Chamfer"), ("l2d", "2D MSE"), ("lcross", "cross")):
            vals = np.array([r[key] for r in rows])
            if np.any(vals > 0):
                ax.plot(epochs, vals, label=label, lw=2.0 if key == "total" else 1.2)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def plot_ablation(csv_path, path) -> Path:
    """Bar chart of probe accuracy per arm from an ablation CSV."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    arms = [r["arm"] for r in rows]
    acc = [100.0 * float(r["probe_accuracy"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(aspect=0.5))
        bars = ax.bar(range(len(arms)), acc, color=COLORS[1])
        for b, a in zip(bars, acc):
            ax.annotate(f"{a:.1f}", (b.get_x() + b.get_width() / 2, b.get_height()), ha="center", va="bottom",
                        fontsize=7)
        ax.set_xticks(range(len(arms)), arms, rotation=20, ha="right")
        ax.set_ylabel("probe accuracy (%)")
        ax.set_ylim(0, 105)
        ax.set_title(f"ablation: {rows[0]['axis']}" if rows else "ablation")
        return _save(fig, path)


def _scatter(ax, pts, color, title, s=2.0, elev=20, azim=35):
    pts = np.asarray(pts).reshape(-1, 3)
    if len(pts):
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=s, c=color, depthshade=False)
    ax.set_title(title, fontsize=8)
    ax.set_xlim(-1, 1)
    ax.set_ylim(-1, 1)
    ax.set_zlim(-1, 1)
    ax.view_init(elev, azim)
    ax.set_axis_off()


def plot_reconstruction(inputs, centers, visible, reconstructed, depth_in, depth_out, path) -> Path:
    """Input cloud, group centers, masked cloud, reconstruction, and the input / composited depth maps."""
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=size(1.4, aspect=0.42))
        panels = [(inputs, COLORS[0], "input"), (centers, "#d95f0e", "token centers"),
                  (visible, COLORS[1], "masked input"), (reconstructed, COLORS[0], "reconstruction")]
        for i, (pts, col, title) in enumerate(panels):
            ax = fig.add_subplot(1, 6, i + 1, projection="3d")
            _scatter(ax, pts, col, title, s=8.0 if title == "token centers" else 2.0)
        for j, (img, title) in enumerate(((depth_in, "input depth"), (depth_out, "2D reconstruction"))):
            ax = fig.add_subplot(1, 6, 5 + j)
            ax.imshow(img, cmap="magma", vmin=0.0, vmax=1.0)
            ax.set_title(title, fontsize=8)
            ax.set_axis_off()
        return _save(fig, path)
