"""Self-describing binary container for named arrays plus JSON metadata.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"GHANBOX\\0"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted:
                    {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                     "meta": {...}}
    20+H    ...   payload: each array's row-major bytes, at "offset" from the
                  payload start, in header order

``dtype`` is ``"<f8"`` (float64) or ``"<i8"`` (int64). Writing the same
arrays and metadata always yields the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GHANBOX\0"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


def write_container(path, arrays: dict, meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr = np.asarray(value)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8", copy=False)
        else:
            raise ContainerError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: not a GHAN container (bad magic)")
    if len(data) < 20:
        raise ContainerError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = 20 + hlen
    try:
        header = json.loads(data[20:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ContainerError(f"{path}: corrupt header") from None
    try:
        entries, meta = header["arrays"], header["meta"]
    except (KeyError, TypeError):
        raise ContainerError(f"{path}: header lacks arrays/meta") from None
    arrays = {}
    end = start
    for e in entries:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise ContainerError(f"{path}: array {e['name']!r} has unsupported dtype {e['dtype']}")
        if e["nbytes"] != int(np.prod(e["shape"], dtype=np.int64)) * dtype.itemsize:
            raise ContainerError(f"{path}: array {e['name']!r} size does not match its shape")
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise ContainerError(f"{path}: truncated payload for {e['name']!r}")
        end = max(end, hi)
        arrays[e["name"]] = np.frombuffer(data[lo:hi], dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    if end != len(data):
        raise ContainerError(f"{path}: {len(data) - end} unexpected trailing bytes")
    return arrays, meta
