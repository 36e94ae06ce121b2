"""The ``BIAF1`` named-array container shared by classifier and generator checkpoints.

Layout (all integers little-endian)::

    b"BIAF1"  u8 version
    u32 array_count
    per array: u16 name_len, name (utf-8), u8 dtype_len, dtype str (numpy, e.g. "<f4"),
               u8 ndim, ndim x u64 shape, u64 nbytes, raw bytes
    u32 metadata_len, metadata: utf-8 "key=value" lines
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BIAF1"
VERSION = 1


class ContainerError(ValueError):
    pass


def _encode_metadata(metadata: dict[str, object]) -> bytes:
    lines = []
    for key in sorted(metadata):
        value = str(metadata[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ContainerError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def write_container(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict[str, object]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        # not ascontiguousarray: it promotes 0-d arrays to 1-d
        arr = np.array(arr, order="C", copy=None)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        raw = arr.tobytes()
        buf.write(struct.pack("<H", len(name_b)) + name_b)
        buf.write(struct.pack("<B", len(dtype_b)) + dtype_b)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<Q", len(raw)) + raw)
    meta = _encode_metadata(metadata)
    buf.write(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError("truncated BIAF1 container")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(Path(path).read_bytes())
    if r.data[:len(MAGIC)] != MAGIC:
        raise ContainerError("not a BIAF1 container")
    r.take(len(MAGIC))
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise ContainerError(f"unsupported BIAF1 version {version}")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (dtype_len,) = r.unpack("<B")
        dtype = np.dtype(r.take(dtype_len).decode("ascii"))
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"array {name!r}: byte count does not match shape {shape}")
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
    (meta_len,) = r.unpack("<I")
    text = r.take(meta_len).decode("utf-8")
    if r.pos != len(r.data):
        raise ContainerError("trailing bytes after BIAF1 metadata")
    metadata = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"malformed metadata line {line!r}")
        metadata[key] = value
    return arrays, metadata


def state_to_arrays(state: dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}
