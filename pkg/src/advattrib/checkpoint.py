"""The "AAPM" model container.

Layout (all integers little-endian u32)::

    b"AAPM" | version=1 | json_len | json descriptor (UTF-8)
    then for each parameter, in descriptor order: count | count * f32 (LE)
"""

from __future__ import annotations

import json
import struct
from typing import Sequence

import numpy as np

from .errors import FormatError, TruncatedFileError

MAGIC = b"AAPM"
VERSION = 1


def pack(descriptor: dict, arrays: Sequence[np.ndarray]) -> bytes:
    meta = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for a in arrays:
        flat = np.asarray(a, dtype="<f4").reshape(-1)
        parts.append(struct.pack("<I", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def unpack(blob: bytes) -> tuple[dict, list[np.ndarray]]:
    """Return (descriptor, flat float64 arrays); shapes are the caller's business."""
    if len(blob) < 12:
        raise TruncatedFileError(f"checkpoint truncated: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    end = 12 + meta_len
    if len(blob) < end:
        raise TruncatedFileError("checkpoint truncated inside descriptor")
    try:
        descriptor = json.loads(blob[12:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint descriptor: {exc}") from exc
    arrays = []
    pos = end
    while pos < len(blob):
        if len(blob) < pos + 4:
            raise TruncatedFileError("checkpoint truncated inside a parameter header")
        (count,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        if len(blob) < pos + 4 * count:
            raise TruncatedFileError("checkpoint truncated inside a parameter blob")
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float64))
        pos += 4 * count
    expected = descriptor.get("n_params")
    if expected is not None and len(arrays) != expected:
        raise TruncatedFileError(f"checkpoint holds {len(arrays)} parameter blobs, descriptor says {expected}")
    return descriptor, arrays
