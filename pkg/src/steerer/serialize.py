"""Named-tensor blobs: a UTF-8 JSON header followed by little-endian buffers.

Layout::

    uint64 LE  header length in bytes
    bytes      UTF-8 JSON: {"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    bytes      concatenated raw buffers, offsets relative to the end of the header

Only IEEE-754 float and integer dtypes are written, always little-endian.
"""
from __future__ import annotations

import json
import struct
from typing import BinaryIO, Mapping

import numpy as np


class FormatError(ValueError):
    pass


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind not in "fiu":
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        dt = _le(arr.dtype)
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, separators=(",", ":")).encode("utf-8")
    fh.write(struct.pack("<Q", len(header)))
    fh.write(header)
    for raw in blobs:
        fh.write(raw)


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    head = fh.read(8)
    if len(head) != 8:
        raise FormatError("truncated tensor block: missing header length")
    (hlen,) = struct.unpack("<Q", head)
    try:
        header = json.loads(fh.read(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt tensor header: {exc}") from exc
    entries = header["tensors"]
    total = sum(e["nbytes"] for e in entries)
    body = fh.read(total)
    if len(body) != total:
        raise FormatError(f"truncated tensor block: expected {total} bytes, got {len(body)}")
    out = {}
    for e in entries:
        dt = np.dtype(e["dtype"])
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        out[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return out
