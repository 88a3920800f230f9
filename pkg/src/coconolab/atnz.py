"""ATNZ: a bit-exact little-endian container for named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"ATNZ"
    version u16      currently 1
    count   u32      number of records
    record  repeated:
        name_len u16, name bytes (UTF-8)
        rank     u8
        dims     rank x u32
        payload  prod(dims) x f32, row-major

Writes are whole-file atomic (temp file + rename). ``write -> read -> write``
reproduces the original bytes exactly, which is the contract that lets other
processes and languages exchange attention tensors with this package.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from coconolab.attention import AttentionBundle, CrossAttentionStack, SelfAttentionTensor

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "AtnzError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedPayloadError",
    "DuplicateNameError",
    "read_atnz",
    "write_atnz",
    "bundle_to_records",
    "records_to_bundle",
    "encode_labels",
    "decode_labels",
]

MAGIC = b"ATNZ"
FORMAT_VERSION = 1


class AtnzError(ValueError):
    """Malformed ATNZ data."""


class BadMagicError(AtnzError):
    pass


class UnsupportedVersionError(AtnzError):
    pass


class TruncatedPayloadError(AtnzError):
    """Declared lengths disagree with the actual byte count."""


class DuplicateNameError(AtnzError):
    pass


def _read_exact(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise TruncatedPayloadError(f"file ends inside {what} (need {size} bytes at offset {offset})")
    return buf[offset : offset + size], offset + size


def read_atnz(path) -> dict[str, np.ndarray]:
    """Read all records; returns an insertion-ordered name -> float32 array map."""
    with open(path, "rb") as fh:
        buf = fh.read()
    offset = 0
    chunk, offset = _read_exact(buf, offset, 4, "magic")
    if chunk != MAGIC:
        raise BadMagicError(f"bad magic {chunk!r}, expected {MAGIC!r}")
    chunk, offset = _read_exact(buf, offset, 2, "version")
    version = struct.unpack("<H", chunk)[0]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"version {version} not supported (expected {FORMAT_VERSION})")
    chunk, offset = _read_exact(buf, offset, 4, "record count")
    count = struct.unpack("<I", chunk)[0]

    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, offset = _read_exact(buf, offset, 2, "name length")
        name_len = struct.unpack("<H", chunk)[0]
        chunk, offset = _read_exact(buf, offset, name_len, "record name")
        name = chunk.decode("utf-8")
        if name in records:
            raise DuplicateNameError(f"duplicate record name {name!r}")
        chunk, offset = _read_exact(buf, offset, 1, "rank")
        rank = chunk[0]
        chunk, offset = _read_exact(buf, offset, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", chunk) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        chunk, offset = _read_exact(buf, offset, 4 * size, f"payload of {name!r}")
        records[name] = np.frombuffer(chunk, dtype="<f4").reshape(dims).copy()
    if offset != len(buf):
        raise TruncatedPayloadError(f"{len(buf) - offset} trailing bytes after the last record")
    return records


def write_atnz(records: Mapping[str, np.ndarray], path) -> None:
    """Write records atomically; arrays are stored as little-endian float32."""
    names = list(records)
    if len(set(names)) != len(names):
        raise DuplicateNameError("record names must be unique")
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


def encode_labels(labels) -> np.ndarray:
    """Pack strings as a (n, maxlen) float array of codepoints, zero-padded."""
    labels = [str(l) for l in labels]
    width = max((len(l) for l in labels), default=1) or 1
    out = np.zeros((len(labels), width), dtype=np.float32)
    for i, label in enumerate(labels):
        out[i, : len(label)] = [ord(ch) for ch in label]
    return out


def decode_labels(arr: np.ndarray) -> tuple[str, ...]:
    rows = np.asarray(arr)
    labels = []
    for row in rows:
        codes = [int(round(c)) for c in row if round(c) > 0]
        labels.append("".join(chr(c) for c in codes))
    return tuple(labels)


def bundle_to_records(bundle: AttentionBundle) -> dict[str, np.ndarray]:
    return {
        "cross": np.asarray(bundle.cross.values, dtype=np.float32),
        "self": np.asarray(bundle.self_attn.values, dtype=np.float32),
        "token_labels": encode_labels(bundle.cross.token_labels),
    }


def records_to_bundle(records: Mapping[str, np.ndarray]) -> AttentionBundle:
    """Assemble a bundle from 'cross'/'self' (+ optional 'token_labels') records."""
    for required in ("cross", "self"):
        if required not in records:
            raise AtnzError(f"missing required record {required!r}")
    cross = np.asarray(records["cross"], dtype=np.float64)
    if cross.ndim != 3:
        raise AtnzError(f"'cross' must be rank 3, got shape {cross.shape}")
    if "token_labels" in records:
        labels = decode_labels(records["token_labels"])
    else:
        labels = tuple(f"token{i}" for i in range(cross.shape[2]))
    # float32 round-trips can nudge values a hair past the closed unit interval
    cross = np.clip(cross, 0.0, 1.0)
    return AttentionBundle(
        cross=CrossAttentionStack(values=cross, token_labels=labels),
        self_attn=SelfAttentionTensor(values=np.asarray(records["self"], dtype=np.float64)),
    )
