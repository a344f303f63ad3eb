"""Named parameter collections and their initializers."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import checkpoint
from .tensor import Tensor, get_default_dtype


class ParameterTree:
    """Trainable tensors addressed by dotted paths (``"encoder.blocks.0.qkv.w"``).

    Iteration is lexicographic by path. Each parameter draws its initial
    values from a generator keyed on ``(seed, crc32(path))``, so adding or
    removing one parameter leaves every other parameter's values unchanged.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._entries: dict[str, Tensor] = {}

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._entries[path]
        except KeyError:
            raise KeyError(f"no parameter named {path!r}") from None

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def items(self):
        return [(k, self._entries[k]) for k in sorted(self._entries)]

    def paths(self) -> list[str]:
        return sorted(self._entries)

    def rng(self, path: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(path.encode("utf-8"))])

    def add(self, path: str, values: np.ndarray, trainable: bool = True) -> Tensor:
        if path in self._entries:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(values, requires_grad=trainable, dtype=get_default_dtype())
        self._entries[path] = t
        return t

    # initializers ---------------------------------------------------------

    def uniform_fan_in(self, path: str, shape: tuple, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(path, self.rng(path).uniform(-bound, bound, size=shape))

    def normal(self, path: str, shape: tuple, std: float = 0.02) -> Tensor:
        return self.add(path, self.rng(path).normal(0.0, std, size=shape))

    def zeros(self, path: str, shape: tuple) -> Tensor:
        return self.add(path, np.zeros(shape))

    def ones(self, path: str, shape: tuple) -> Tensor:
        return self.add(path, np.ones(shape))

    def linear(self, prefix: str, n_in: int, n_out: int) -> None:
        self.uniform_fan_in(f"{prefix}.w", (n_in, n_out), n_in)
        self.zeros(f"{prefix}.b", (n_out,))

    def norm(self, prefix: str, dim: int) -> None:
        self.ones(f"{prefix}.g", (dim,))
        self.zeros(f"{prefix}.b", (dim,))

    # bookkeeping ------------------------------------------------------------

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def num_params(self, prefix: str = "") -> int:
        return sum(t.size for k, t in self._entries.items() if k.startswith(prefix))

    def trainable(self):
        return [(k, t) for k, t in self.items() if t.requires_grad]

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._entries.items()}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(arrays) != set(self._entries):
            missing = sorted(set(self._entries) - set(arrays))
            extra = sorted(set(arrays) - set(self._entries))
            raise checkpoint.CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, arr in arrays.items():
            if k not in self._entries:
                continue
            t = self._entries[k]
            if t.shape != arr.shape:
                raise checkpoint.CheckpointError(f"shape mismatch for {k}: {t.shape} vs {arr.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)
            t.zero_grad()

    def save(self, path, meta: dict | None = None):
        frozen = sorted(k for k, t in self._entries.items() if not t.requires_grad)
        meta = dict(meta or {}, seed=self.seed, frozen=frozen)
        return checkpoint.save(path, {f"params/{k}": v for k, v in self.state().items()}, meta)

    @classmethod
    def load(cls, path) -> "ParameterTree":
        arrays, meta = checkpoint.load(path)
        tree = cls(seed=meta.get("seed", 0))
        frozen = set(meta.get("frozen", []))
        for k, v in sorted(arrays.items()):
            if k.startswith("params/"):
                name = k[len("params/") :]
                tree.add(name, v, trainable=name not in frozen)
        return tree
