"""Standalone ATNZ writer implementing the container contract byte for byte.

Kept independent of the consumer library on purpose: the file format is the
interface between the two packages, so this side produces it from the
documented byte layout alone. Layout (little-endian): magic ``ATNZ``,
version u16 (=1), record count u32, then per record a u16-length-prefixed
UTF-8 name, u8 rank, rank x u32 dims, and prod(dims) float32 values
row-major.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Mapping

import numpy as np

MAGIC = b"ATNZ"
FORMAT_VERSION = 1


def encode_labels(labels) -> np.ndarray:
    """Strings as a zero-padded (n, maxlen) float32 array of codepoints."""
    labels = [str(l) for l in labels]
    width = max((len(l) for l in labels), default=1) or 1
    out = np.zeros((len(labels), width), dtype=np.float32)
    for i, label in enumerate(labels):
        out[i, : len(label)] = [ord(ch) for ch in label]
    return out


def write_atnz(records: Mapping[str, np.ndarray], path) -> None:
    names = list(records)
    if len(set(names)) != len(names):
        raise ValueError("record names must be unique")
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(names))]
    for name in names:
        arr = np.ascontiguousarray(np.asarray(records[name]), dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    payload = b"".join(parts)

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".atnz-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
