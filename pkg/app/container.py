# app/container.py
"""
Little-endian tensor container shared by every artifact:

    8-byte magic | uint32 header length N | N bytes UTF-8 JSON header | zero pad | payload

The header holds a free-form `meta` object and one entry per tensor
(name, shape, dtype code, byte offset relative to the payload start). The payload start
and every tensor offset are 8-byte aligned.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from app.errors import BadMagicError, FormatError, TruncatedPayloadError, UnknownDtypeError

MAGIC_WEIGHTS = b"VLMW0001"
MAGIC_MODEL = b"VLMM0001"
MAGIC_TENSOR = b"VLMT0001"

DTYPE_CODES: Dict[str, np.dtype] = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): "f4", np.dtype("float64"): "f8"}

PathLike = Union[str, Path]


def _align(n: int) -> int:
    return (n + 7) // 8 * 8


def encode(magic: bytes, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise UnknownDtypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        chunks.append(raw + b"\0" * (_align(len(raw)) - len(raw)))
        offset += _align(len(raw))

    header = json.dumps({"meta": dict(meta), "tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = magic + struct.pack("<I", len(header)) + header
    return head + b"\0" * (_align(len(head)) - len(head)) + b"".join(chunks)


def decode(blob: bytes, magic: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if blob[:8] != magic:
        raise BadMagicError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    if len(blob) < 12:
        raise TruncatedPayloadError(12, len(blob))
    (n,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + n:
        raise TruncatedPayloadError(12 + n, len(blob))
    try:
        header = json.loads(blob[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}") from e

    start = _align(12 + n)
    entries = header.get("tensors", [])
    for entry in entries:
        if entry.get("dtype") not in DTYPE_CODES:
            raise UnknownDtypeError(f"tensor {entry.get('name')!r} has unknown dtype code {entry.get('dtype')!r}")
        if entry["offset"] % 8:
            raise FormatError(f"tensor {entry['name']!r} offset {entry['offset']} is not 8-byte aligned")

    needed = max(
        (e["offset"] + int(np.prod(e["shape"], dtype=np.int64)) * DTYPE_CODES[e["dtype"]].itemsize for e in entries),
        default=0,
    )
    available = max(len(blob) - start, 0)
    if available < needed:
        raise TruncatedPayloadError(needed, available)

    tensors: Dict[str, np.ndarray] = {}
    for e in entries:
        dt = DTYPE_CODES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start + e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return tensors, header.get("meta", {})


def write(path: PathLike, magic: bytes, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    Path(path).write_bytes(encode(magic, tensors, meta))


def read(path: PathLike, magic: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    return decode(Path(path).read_bytes(), magic)


def write_tensor(path: PathLike, array: np.ndarray, meta: Mapping[str, Any] | None = None) -> None:
    write(path, MAGIC_TENSOR, {"value": np.asarray(array)}, meta or {})


def read_tensor(path: PathLike) -> Tuple[np.ndarray, Dict[str, Any]]:
    tensors, meta = read(path, MAGIC_TENSOR)
    if "value" not in tensors:
        raise FormatError(f"{path}: tensor file without a 'value' entry")
    return tensors["value"], meta
