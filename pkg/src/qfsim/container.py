"""On-disk tensor container.

Layout: 8-byte magic ``QTNSR\\x00\\x00\\x01``, a 4-byte little-endian header
length, a UTF-8 JSON header ``{"shape": [...], "dtype": "f64"}``, then the
raw little-endian float64 blob. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptContainerError, IoError
from .tensor import Tensor, check_finite

MAGIC = b"QTNSR\x00\x00\x01"


def save_tensor(path: str | Path, t: Tensor) -> None:
    arr = np.ascontiguousarray(t, dtype=np.float64)
    header = json.dumps({"shape": list(arr.shape), "dtype": "f64"}).encode("utf-8")
    blob = arr.astype("<f8", copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write tensor container {path}: {exc}") from exc


def load_tensor(path: str | Path) -> Tensor:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read tensor container {path}: {exc}") from exc

    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptContainerError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CorruptContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptContainerError(f"{path}: unreadable header: {exc}") from exc

    shape = header.get("shape")
    if (
        header.get("dtype") != "f64"
        or not isinstance(shape, list)
        or not all(isinstance(d, int) and d > 0 for d in shape)
    ):
        raise CorruptContainerError(f"{path}: invalid header {header!r}")

    blob = raw[12 + hlen :]
    count = math.prod(shape)
    if len(blob) != count * 8:
        raise CorruptContainerError(
            f"{path}: blob holds {len(blob)} bytes, header implies {count * 8}"
        )
    arr = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(shape)
    return check_finite(np.ascontiguousarray(arr), f"load_tensor({path})")
