"""URPC binary tensor files and containers.

Tensor record (all integers little-endian)::

    b"URPC" | version u16 | rank u16 | dims u64 * rank | payload f64 row-major

Container (used for datasets and network checkpoints)::

    b"URPC" | version u16 | 0xFFFF u16 | header_len u64 | UTF-8 JSON header
    | tensor record * len(header["tensors"])

The JSON header always carries a ``"tensors"`` list naming the records in
the order they follow.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"URPC"
VERSION = 1
CONTAINER_RANK = 0xFFFF
_PREFIX = struct.Struct("<4sHH")


def write_tensor(stream, array):
    array = np.asarray(array, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    if array.ndim >= CONTAINER_RANK:
        raise FormatError(f"rank {array.ndim} too large")
    stream.write(_PREFIX.pack(MAGIC, VERSION, array.ndim))
    stream.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    stream.write(array.tobytes())


def _read_exact(stream, size, what):
    data = stream.read(size)
    if len(data) != size:
        raise FormatError(f"truncated URPC data while reading {what}: wanted {size} bytes, got {len(data)}")
    return data


def _read_prefix(stream):
    magic, version, rank = _PREFIX.unpack(_read_exact(stream, _PREFIX.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad URPC magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported URPC version {version} (expected {VERSION})")
    return rank


def read_tensor(stream):
    rank = _read_prefix(stream)
    if rank == CONTAINER_RANK:
        raise FormatError("found a URPC container where a tensor was expected")
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(stream, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(path, array):
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path):
    with open(path, "rb") as f:
        array = read_tensor(f)
        if f.read(1):
            raise FormatError(f"trailing bytes after tensor in {path}")
    return array


def save_container(path, header, tensors):
    """Write ``tensors`` (a mapping name -> array, order preserved) with ``header``."""
    header = dict(header)
    header["tensors"] = list(tensors)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(MAGIC, VERSION, CONTAINER_RANK))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for array in tensors.values():
        write_tensor(buf, array)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_container(path):
    """Return ``(header, tensors)`` from a container file."""
    with open(path, "rb") as f:
        if _read_prefix(f) != CONTAINER_RANK:
            raise FormatError(f"{path} holds a bare tensor, not a container")
        (size,) = struct.unpack("<Q", _read_exact(f, 8, "header length"))
        try:
            header = json.loads(_read_exact(f, size, "JSON header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt container header in {path}: {exc}") from exc
        names = header.get("tensors")
        if not isinstance(names, list):
            raise FormatError(f"container header in {path} lacks a tensor list")
        tensors = {name: read_tensor(f) for name in names}
        if f.read(1):
            raise FormatError(f"trailing bytes after container payload in {path}")
    return header, tensors
