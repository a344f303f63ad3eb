"""Desk-scale 2D-3D joint masked autoencoding for point clouds, on a small numpy autodiff engine."""

from importlib import resources

from .dims import DESK, FULL, TINY, ModelDims
from .geometry import ViewSpec, normalize_to_cube, project_depth, read_points, soft_project
from .losses import chamfer_l2, loss_2d, loss_3d, loss_cross, overall_loss

__version__ = "0.1.0"


def sample_path(name: str = "torus.xyz"):
    """Path of a bundled sample point cloud."""
    return resources.files(__name__) / "data" / name


__all__ = [
    "DESK", "FULL", "TINY", "ModelDims", "ViewSpec", "chamfer_l2", "loss_2d", "loss_3d", "loss_cross",
    "normalize_to_cube", "overall_loss", "project_depth", "read_points", "sample_path", "soft_project",
]
