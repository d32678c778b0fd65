"""Binary parameter checkpoints.

Layout: one ASCII header line ``OFNET-CKPT v1 <n_tensors>`` followed by one
record per tensor: name length (little-endian uint64), the UTF-8 name, rank
(uint64), the extents (uint64 each), then the values as little-endian
float64.  Order is preserved, so re-saving a loaded checkpoint is
byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OFNET-CKPT v1"


class CheckpointError(ValueError):
    """Malformed checkpoint file or mismatch against the target model."""


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` in insertion order."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC + b" %d\n" % len(tensors))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> array mapping."""
    path = Path(path)
    with open(path, "rb") as f:
        header = f.readline()
        parts = header.strip().split(b" ")
        if parts[:2] != MAGIC.split(b" ") or len(parts) != 3:
            raise CheckpointError(f"{path.name}: bad header {header!r}")
        try:
            n_tensors = int(parts[2])
        except ValueError:
            raise CheckpointError(f"{path.name}: bad tensor count in header {header!r}") from None
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            name_len = _read_u64(f, path, "name length")
            name = f.read(name_len).decode("utf-8")
            rank = _read_u64(f, path, f"rank of {name!r}")
            shape = tuple(_read_u64(f, path, f"extent of {name!r}") for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path.name}: truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise CheckpointError(f"{path.name}: trailing bytes after {n_tensors} tensors")
    return tensors


def _read_u64(f, path: Path, what: str) -> int:
    raw = f.read(8)
    if len(raw) != 8:
        raise CheckpointError(f"{path.name}: truncated while reading {what}")
    return struct.unpack("<Q", raw)[0]
