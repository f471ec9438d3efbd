"""Chunked binary tensor container.

Layout: magic ``FRTN``, version (u32 LE), JSON header length (u64 LE),
JSON header mapping names to ``{dtype, shape, offset}`` (offsets relative
to the payload start, 64-byte aligned), then the raw little-endian payload.
The format is language-neutral and mmap-friendly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FRTN"
VERSION = 1
_ALIGN = 64

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class ContainerError(RuntimeError):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    key = np.dtype(dt.str.lstrip("=<|"))
    for name, cand in _DTYPES.items():
        if cand == key or cand.str.lstrip("<|") == key.str.lstrip("<|"):
            return name
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays to ``path``. ``meta`` goes into the header verbatim."""
    entries = {}
    offset = 0
    blobs = []
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        pad = (-offset) % _ALIGN
        offset += pad
        blobs.append((pad, arr))
        entries[name] = {
            "dtype": _dtype_name(arr),
            "shape": list(arr.shape),
            "offset": offset,
        }
        offset += arr.nbytes
    header = {"tensors": entries}
    if meta is not None:
        header["meta"] = meta
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for pad, arr in blobs:
            if pad:
                f.write(b"\0" * pad)
            f.write(arr.tobytes())


def _read_header(f):
    magic = f.read(4)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r} (expected {MAGIC!r})")
    (version,) = struct.unpack("<I", f.read(4))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<Q", f.read(8))
    raw = f.read(hlen)
    if len(raw) != hlen:
        raise ContainerError("truncated header")
    return json.loads(raw.decode("utf-8")), 4 + 4 + 8 + hlen


def load_tensors(path, mmap: bool = False):
    """Read all arrays (and meta) back. ``mmap=True`` maps the payload read-only."""
    path = Path(path)
    with open(path, "rb") as f:
        header, payload_start = _read_header(f)
        entries = header["tensors"]
        if mmap:
            raw = np.memmap(path, dtype="u1", mode="r")
        else:
            raw = np.frombuffer(f.read(), dtype="u1")
    out = {}
    for name, ent in entries.items():
        dt = _DTYPES[ent["dtype"]]
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = (0 if mmap is False else payload_start) + ent["offset"]
        if mmap:
            view = raw[start : start + count * dt.itemsize]
        else:
            view = raw[ent["offset"] : ent["offset"] + count * dt.itemsize]
        if view.size != count * dt.itemsize:
            raise ContainerError(f"truncated payload for tensor {name!r}")
        arr = view.view(dt).reshape(shape)
        out[name] = arr if mmap else arr.copy()
    return out, header.get("meta")
