"""Single-file tensor container.

Byte layout::

    [0:8)        header length N, unsigned 64-bit little-endian
    [8:8+N)      UTF-8 JSON header
    [8+N:...)    payload: raw little-endian tensor bytes, back to back

The header is ``{"format", "version", "tensors": [{name, shape, dtype,
offset, length}], ...metadata}`` where ``offset`` counts from the start of
the payload. The header is serialized with sorted keys and tensors are
written in the order given, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT = "affordiff-checkpoint"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], **metadata) -> Path:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = arr.dtype.name
        if kind not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {kind}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind,
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    reserved = {"format", "version", "tensors"} & set(metadata)
    if reserved:
        raise CheckpointError(f"metadata keys {sorted(reserved)} are reserved")
    header = {"format": FORMAT, "version": VERSION, "tensors": entries, **metadata}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; tensors keep their stored order."""
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", buf[:8])
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT} v{VERSION} file")
    payload = memoryview(buf)[8 + n:]
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"tensor {e['name']!r}: unsupported dtype {e['dtype']}")
        end = e["offset"] + e["length"]
        if end > len(payload):
            raise CheckpointError(f"tensor {e['name']!r} runs past the end of the file")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=_DTYPES[e["dtype"]])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return tensors, header


def resolve(path) -> Path:
    """Accept ``ck/best`` as shorthand for ``ck/best.ckpt``."""
    path = Path(path)
    if not path.exists() and path.with_suffix(".ckpt").exists():
        return path.with_suffix(".ckpt")
    return path
