"""On-disk tensor container for checkpoints and enrollment profiles.

Layout:

    bytes 0..4    magic b"PVTC1"
    bytes 5..8    uint32 little-endian header length N
    bytes 9..9+N  UTF-8 JSON: {"tensors": [{name, dtype, shape,
                  byte_offset}, ...], "attrs": {...}}
    then          payload: the tensors' raw bytes, little-endian
                  float32, contiguous, in header order

Offsets are relative to the payload start, strictly increasing and
gap-free; loading what save wrote returns bit-identical arrays.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import FormatError

MAGIC = b"PVTC1"
_DTYPE = "<f4"


def save_tensors(path, tensors: dict, attrs: dict | None = None) -> None:
    """Write named float32 arrays plus JSON-serializable attrs.

    Tensor order follows dict insertion order; attrs keys are sorted,
    so identical inputs produce identical bytes.
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise FormatError(f"tensor {name!r} must be float32, got {arr.dtype}")
        if arr.size == 0:
            raise FormatError(f"tensor {name!r} is empty")
        raw = np.ascontiguousarray(arr).astype(_DTYPE, copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": _DTYPE,
            "shape": list(arr.shape),
            "byte_offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps(
        {"tensors": entries, "attrs": attrs or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(header)).tobytes())
        f.write(header)
        for raw in chunks:
            f.write(raw)


def load_tensors(path) -> tuple:
    """Read a container; returns (tensors dict in header order, attrs)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc

    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a {MAGIC.decode()} container")
    header_len = int(np.frombuffer(blob, dtype="<u4", count=1,
                                   offset=len(MAGIC))[0])
    payload_start = len(MAGIC) + 4 + header_len
    if payload_start > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC) + 4:payload_start].decode("utf-8"))
        entries = header["tensors"]
        attrs = header["attrs"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc

    payload = blob[payload_start:]
    tensors = {}
    expected = 0
    for entry in entries:
        try:
            name, dtype = entry["name"], entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor entry: {exc}") from exc
        if dtype != _DTYPE:
            raise FormatError(f"{path}: tensor {name!r} has dtype {dtype}, "
                              f"expected {_DTYPE}")
        if offset != expected:
            raise FormatError(f"{path}: tensor {name!r} at offset {offset}, "
                              f"expected {expected}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload at tensor {name!r}")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
        expected = offset + nbytes
    if expected != len(payload):
        raise FormatError(f"{path}: payload has {len(payload) - expected} "
                          "trailing bytes")
    return tensors, attrs
