"""
TNSR tensor blobs and the checkpoint container built on them.

TNSR layout (all little-endian)::

    b"TNSR" | u32 rank | u64 extent * rank | f32 data (row-major)

Checkpoint layout::

    b"SNCK" | u32 header_len | header (UTF-8 JSON) | u32 n_records
    then per record: u32 name_len | name (UTF-8) | u64 blob_len | TNSR blob
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

TNSR_MAGIC = b"TNSR"
CKPT_MAGIC = b"SNCK"


class FormatError(ValueError):
    pass


def encode_tensor(a) -> bytes:
    a = np.asarray(a, dtype="<f4")
    head = TNSR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def decode_tensor(blob: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one TNSR blob starting at ``offset``; returns (array, end offset)."""
    if blob[offset:offset + 4] != TNSR_MAGIC:
        raise FormatError("bad TNSR magic")
    try:
        (rank,) = struct.unpack_from("<I", blob, offset + 4)
        dims = struct.unpack_from(f"<{rank}Q", blob, offset + 8)
    except struct.error:
        raise FormatError("truncated TNSR header") from None
    start = offset + 8 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    end = start + 4 * count
    if end > len(blob):
        raise FormatError(f"truncated TNSR payload: need {end - start} bytes")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
    return data.astype(np.float32).reshape(dims), end


def read_tensor(blob: bytes) -> np.ndarray:
    a, end = decode_tensor(blob)
    if end != len(blob):
        raise FormatError(f"{len(blob) - end} trailing bytes after TNSR blob")
    return a


def save_tensor(path, a) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(a))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f.read())


def encode_checkpoint(header: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        blob = encode_tensor(arr)
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if data[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    try:
        (hlen,) = struct.unpack_from("<I", data, 4)
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
        off = 8 + hlen
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + nlen].decode("utf-8")
            off += 4 + nlen
            (blen,) = struct.unpack_from("<Q", data, off)
            off += 8
            tensors[name] = read_tensor(data[off:off + blen])
            off += blen
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint: {e}") from None
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint records")
    return header, tensors
