"""Run configuration with desk / full / tiny presets and a JSON round-trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..dims import DESK, FULL, TINY, ModelDims
from ..geometry import AugmentConfig

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "torus", "cone")


ROTATIONS = ("none", "upright", "so3")


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple = SHAPE_CLASSES
    train_per_class: int = 60
    test_per_class: int = 20
    deform: float = 0.3       # per-axis scale drawn from [1 - deform, 1 + deform]
    noise: float = 0.01       # Gaussian surface noise before normalization
    rotate: str = "upright"   # "none", "upright" (random yaw about +z) or "so3"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        unknown = [c for c in self.classes if c not in SHAPE_CLASSES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}; choose from {list(SHAPE_CLASSES)}")
        if len(self.classes) == 0:
            raise ValueError("dataset needs at least one class")
        if self.rotate not in ROTATIONS:
            raise ValueError(f"rotate must be one of {ROTATIONS}, got {self.rotate!r}")


@dataclass(frozen=True)
class RunConfig:
    dims: ModelDims = DESK
    dataset: DatasetSpec = DatasetSpec()
    augment: AugmentConfig = AugmentConfig()
    mask_ratio: float = 0.75
    scheme: tuple = ("local", "local")     # (2D-query/3D-key, 3D-query/2D-key)
    cross_loss: bool = True
    cross_views: int = 2
    sigma: float = 1.0
    hardness: float = 50.0
    cross_foreground_only: bool = False
    loss_weights: tuple = (1.0, 1.0, 1.0)  # (3D, 2D, cross)
    pooled_chamfer: bool = False
    full_targets: bool = False
    frozen_pe2d: bool = False
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 3.0
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 10.0
    seed: int = 0
    data_seed: int = 0
    checkpoint_every: int = 10
    probe_reg: float = 1e-3
    out_dir: str = "runs/desk"

    def __post_init__(self):
        for name in ("scheme", "loss_weights", "betas"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        self.dims.validate()
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.mask_ratio and round(self.mask_ratio * self.dims.g2) == self.dims.g2:
            raise ValueError("mask_ratio leaves no visible 3D token")
        if len(self.scheme) != 2 or any(s not in ("local", "global") for s in self.scheme):
            raise ValueError(f"scheme must be two of 'local'/'global', got {self.scheme}")
        if self.cross_views < 1:
            raise ValueError("cross_views must be at least 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be below epochs")

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = self.dims.to_dict()
        for k in ("scheme", "loss_weights", "betas"):
            d[k] = list(d[k])
        d["dataset"]["classes"] = list(self.dataset.classes)
        d["augment"]["scale"] = list(self.augment.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Build from a (possibly partial) dict; missing keys come from ``base`` (desk by default)."""
        base = base or cls()
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ValueError(f"unknown config keys: {extra}")
        nested = {"dims": (ModelDims, base.dims), "dataset": (DatasetSpec, base.dataset),
                  "augment": (AugmentConfig, base.augment)}
        for key, (typ, default) in nested.items():
            if key in d:
                sub = dict(d[key])
                bad = sorted(set(sub) - {f.name for f in fields(typ)})
                if bad:
                    raise ValueError(f"unknown {key} keys: {bad}")
                if "scale" in sub:
                    sub["scale"] = tuple(sub["scale"])
                d[key] = replace(default, **sub)
        return replace(base, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        d = json.loads(Path(path).read_text())
        preset = d.pop("preset", "desk")
        return cls.from_dict(d, base=preset_config(preset))


def preset_config(name: str) -> RunConfig:
    """``desk`` (acceptance scale), ``full`` (smoke only) or ``tiny`` (gradient checks)."""
    if name == "desk":
        return RunConfig()
    if name == "full":
        return RunConfig(dims=FULL, cross_views=4, epochs=400, batch_size=128, lr=5e-5, min_lr=1e-6,
                         warmup_epochs=10, sigma=1.0, out_dir="runs/full")
    if name == "tiny":
        return RunConfig(dims=TINY, dataset=DatasetSpec(train_per_class=4, test_per_class=2), epochs=2,
                         batch_size=4, warmup_epochs=0.5, checkpoint_every=1, out_dir="runs/tiny")
    raise ValueError(f"unknown preset {name!r}; choose desk, full or tiny")
