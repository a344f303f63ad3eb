"""Model and data dimensions shared by every network module."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class ModelDims:
    n_points: int = 512
    height: int = 64
    width: int = 64
    width_c: int = 96            # token width C
    point_dim: int = 24          # per-point linear projection before stage 1
    stage1_dim: int = 48         # C1
    conv_dims: tuple = (32, 64)  # 2D widths at H/4 and H/8; H/16 uses C
    g1: int = 64
    g2: int = 16
    k1: int = 16
    k2: int = 4
    heads: int = 6
    enc_blocks: int = 4
    shared_blocks: int = 1
    specific_blocks: int = 1
    mlp_ratio: int = 4

    PATCH = 4       # initial patchify
    TOKEN_PX = 16   # pixel footprint of one final 2D token

    def __post_init__(self):
        object.__setattr__(self, "conv_dims", tuple(self.conv_dims))
        self.validate()

    def validate(self) -> None:
        if self.height % self.TOKEN_PX or self.width % self.TOKEN_PX:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by {self.TOKEN_PX}")
        if self.width_c % self.heads:
            raise ValueError(f"width C={self.width_c} must be divisible by heads={self.heads}")
        if self.width_c % 4:
            raise ValueError(f"width C={self.width_c} must be divisible by 4 (2D sin-cos table)")
        if self.n_points % self.g2:
            raise ValueError(f"N={self.n_points} must be divisible by G2={self.g2}")
        if not self.g2 <= self.g1 <= self.n_points:
            raise ValueError(f"need G2 <= G1 <= N, got G2={self.g2}, G1={self.g1}, N={self.n_points}")
        if self.k1 > self.n_points or self.k2 > self.g1:
            raise ValueError(f"k1={self.k1} / k2={self.k2} exceed the available points")
        if len(self.conv_dims) != 2:
            raise ValueError("conv_dims needs two entries (H/4 and H/8 widths)")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.TOKEN_PX, self.width // self.TOKEN_PX

    @property
    def gi(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def points_per_group(self) -> int:
        return self.n_points // self.g2

    @property
    def patch_pixels(self) -> int:
        return self.TOKEN_PX * self.TOKEN_PX

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_dims"] = list(self.conv_dims)
        return d


DESK = ModelDims()
FULL = ModelDims(n_points=2048, height=224, width=224, width_c=384, point_dim=64, stage1_dim=192,
                  conv_dims=(128, 256), g1=128, g2=32, k1=16, k2=4, heads=6, enc_blocks=12,
                  shared_blocks=2, specific_blocks=1)
# Gradient-check scale: C=32, 2 blocks, 8 points per group.
TINY = ModelDims(n_points=64, height=32, width=32, width_c=32, point_dim=8, stage1_dim=16, conv_dims=(8, 16),
                 g1=16, g2=8, k1=4, k2=2, heads=2, enc_blocks=2, shared_blocks=1, specific_blocks=1)
