"""Binary and CSV persistence for tensors.

Binary layout (all little-endian)::

    b"DMMT" | u32 rank | u64 extent * rank | u8 bytes-per-value (4 or 8) | values
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"DMMT"
_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    tag = arr.dtype.itemsize
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", tag)
    return header + np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()


def from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise FormatError("missing DMMT magic")
    try:
        (rank,) = struct.unpack_from("<I", buf, 4)
        shape = struct.unpack_from(f"<{rank}Q", buf, 8)
        (tag,) = struct.unpack_from("<B", buf, 8 + 8 * rank)
    except struct.error:
        raise FormatError("truncated header") from None
    if tag not in _TAGS:
        raise FormatError(f"unknown precision tag {tag}")
    offset = 9 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != count * tag:
        raise FormatError(f"payload has {len(buf) - offset} bytes, expected {count * tag}")
    data = np.frombuffer(buf, dtype=_TAGS[tag], count=count, offset=offset).reshape(shape)
    return Tensor(data.astype(_TAGS[tag].newbyteorder("=")))


def save(t: Tensor | np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(t))


def load(path: str | Path) -> Tensor:
    return from_bytes(Path(path).read_bytes())


def save_csv(t: Tensor | np.ndarray, path: str | Path) -> None:
    """Write a 1-D or 2-D tensor as CSV; floats use round-trip repr.

    1-D data is written one value per row, so it loads back as an (n, 1) column.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim not in (1, 2):
        raise ValueError(f"CSV export supports 1-D and 2-D data, got rank {arr.ndim}")
    rows = arr[:, None] if arr.ndim == 1 else arr
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def load_csv(path: str | Path) -> Tensor:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return Tensor(np.array(rows, dtype=np.float64))
