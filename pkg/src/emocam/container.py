"""Named-tensor weights container.

Layout: an 8-byte little-endian u64 header length ``N``, ``N`` bytes of UTF-8
JSON mapping tensor name to ``{"dtype", "shape", "offset"}``, then the payload
of little-endian f32 values. Offsets are relative to the payload start and
8-byte aligned.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

ALIGN = 8
_F32 = np.dtype("<f4")


class ContainerError(ValueError):
    """Raised on a malformed weights container."""


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_F32)
        raw = arr.tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        pad = (-len(raw)) % ALIGN
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8:
        raise ContainerError("container shorter than its 8-byte header length field")
    (n,) = struct.unpack_from("<Q", blob, 0)
    if 8 + n > len(blob):
        raise ContainerError(f"header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("header must be a JSON object")

    payload = memoryview(blob)[8 + n :]
    out = {}
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype = entry["dtype"]
            shape = [int(s) for s in entry["shape"]]
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"bad header entry for {name!r}") from exc
        if dtype != "f32":
            raise ContainerError(f"{name!r}: unsupported dtype {dtype!r}")
        if offset < 0 or offset % ALIGN:
            raise ContainerError(f"{name!r}: offset {offset} not 8-byte aligned")
        if any(s < 1 for s in shape):
            raise ContainerError(f"{name!r}: invalid shape {shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(payload):
            raise ContainerError(f"{name!r}: data runs past end of payload")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=_F32)
        out[name] = arr.reshape(shape).astype(np.float32)
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64_py(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

if njit is not None:

    @njit(cache=False)
    def _fnv1a64_kernel(buf):  # pragma: no cover - compiled
        h = np.uint64(_FNV_OFFSET)
        prime = np.uint64(_FNV_PRIME)
        for b in buf:
            h = (h ^ np.uint64(b)) * prime
        return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``.

    Uses a compiled kernel when numba is installed; multi-hundred-megabyte
    weight files are impractical to hash byte-by-byte in pure Python.
    """
    if njit is None or len(data) < 4096:
        return _fnv1a64_py(data)
    return int(_fnv1a64_kernel(np.frombuffer(data, dtype=np.uint8)))
