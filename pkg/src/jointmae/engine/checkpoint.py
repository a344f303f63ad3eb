"""Binary checkpoint container.

Layout::

    JMAE1\\n
    <header byte length, decimal>\\n
    <header: UTF-8 JSON, keys sorted>
    <payloads: raw little-endian arrays, concatenated in manifest order>

The header holds ``{"meta": {...}, "manifest": [{"path", "shape", "dtype",
"offset", "nbytes"}, ...]}``; offsets count from the first payload byte.
Manifest entries are sorted by path so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MAGIC = b"JMAE1\n"


class CheckpointError(ValueError):
    pass


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = []
    payloads = []
    offset = 0
    for path in sorted(arrays):
        arr = np.ascontiguousarray(arrays[path])
        le = arr.astype(_le(arr.dtype), copy=False)
        raw = le.tobytes()
        manifest.append(
            {"path": path, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "manifest": manifest}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    return MAGIC + f"{len(hb)}\n".encode("ascii") + hb + b"".join(payloads)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a JMAE1 checkpoint (bad magic)")
    rest = blob[len(MAGIC) :]
    nl = rest.index(b"\n")
    hlen = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + hlen].decode("utf-8"))
    body = memoryview(rest)[nl + 1 + hlen :]
    arrays = {}
    for entry in header["manifest"]:
        start = entry["offset"]
        chunk = body[start : start + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["path"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
