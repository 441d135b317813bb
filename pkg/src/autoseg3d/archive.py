"""Named-tensor archive: the on-disk container for checkpoints and raw volumes.

A single file holds a plain-text header followed by raw little-endian
array payloads.  Header grammar (ASCII, one record per line):

    TENSOR-ARCHIVE v1
    meta <key> <json value>
    tensor <name> <dtype> <d0,d1,...> <byte offset> <frozen 0|1>
    END HEADER

Offsets are relative to the first byte after the header.  Arrays are
written C-order.  Tensor names are dotted hierarchical paths such as
``encoder.blocks.3.attn.qkv.weight``; names are unique within one
archive.  ``meta`` carries free-form JSON fields (epoch, val_dice,
ablation flags, config hash, voxel spacing...).
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .errors import FormatError

MAGIC = "TENSOR-ARCHIVE v1"

# dtype tag <-> numpy little-endian dtype
_DTYPE_TAGS = {
    "f32": "<f4",
    "f64": "<f8",
    "i16": "<i2",
    "i32": "<i4",
    "i64": "<i8",
    "u8": "|u1",
}
_TAG_FOR_KIND = {np.dtype(v): k for k, v in _DTYPE_TAGS.items()}


def dtype_tag(dt: np.dtype) -> str:
    dt = np.dtype(dt).newbyteorder("<") if np.dtype(dt).itemsize > 1 else np.dtype(dt)
    if dt not in _TAG_FOR_KIND:
        raise FormatError(f"unsupported array dtype {dt!r}")
    return _TAG_FOR_KIND[dt]


@dataclass
class CheckpointArchive:
    """In-memory archive: named arrays, per-entry frozen flags, metadata."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray, frozen: bool = False) -> None:
        if name in self.arrays:
            raise FormatError(f"duplicate tensor name {name!r}")
        self.arrays[name] = np.ascontiguousarray(array)
        self.frozen[name] = bool(frozen)

    def manifest(self) -> list[tuple[str, tuple[int, ...], str]]:
        """(name, shape, dtype tag) for every entry, in insertion order."""
        return [(n, tuple(a.shape), dtype_tag(a.dtype)) for n, a in self.arrays.items()]

    def names(self) -> list[str]:
        return list(self.arrays)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.arrays.items())

    # -- serialization -------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        header = io.StringIO()
        header.write(MAGIC + "\n")
        for key in sorted(self.meta):
            header.write(f"meta {key} {json.dumps(self.meta[key], sort_keys=True)}\n")
        offset = 0
        blobs: list[bytes] = []
        for name, arr in self.arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False) if arr.dtype.itemsize > 1 else arr
            blob = le.tobytes()
            shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            frozen = 1 if self.frozen.get(name, False) else 0
            header.write(f"tensor {name} {dtype_tag(arr.dtype)} {shape} {offset} {frozen}\n")
            blobs.append(blob)
            offset += len(blob)
        header.write("END HEADER\n")
        with open(path, "wb") as fh:
            fh.write(header.getvalue().encode("ascii"))
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CheckpointArchive":
        with open(path, "rb") as fh:
            raw = fh.read()
        eol = raw.find(b"\n")
        if eol < 0 or raw[:eol].decode("ascii", "replace") != MAGIC:
            raise FormatError(f"{path}: not a tensor archive (bad magic line)")
        archive = cls()
        pos = eol + 1
        entries: list[tuple[str, str, tuple[int, ...], int]] = []
        while True:
            eol = raw.find(b"\n", pos)
            if eol < 0:
                raise FormatError(f"{path}: truncated header (no END HEADER)")
            line = raw[pos:eol].decode("ascii")
            pos = eol + 1
            if line == "END HEADER":
                break
            kind, _, rest = line.partition(" ")
            if kind == "meta":
                key, _, value = rest.partition(" ")
                archive.meta[key] = json.loads(value)
            elif kind == "tensor":
                parts = rest.split(" ")
                if len(parts) != 5:
                    raise FormatError(f"{path}: malformed tensor line {line!r}")
                name, tag, shape_s, off_s, frozen_s = parts
                if tag not in _DTYPE_TAGS:
                    raise FormatError(f"{path}: unknown dtype tag {tag!r} for {name!r}")
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
                entries.append((name, tag, shape, int(off_s)))
                archive.frozen[name] = frozen_s == "1"
            else:
                raise FormatError(f"{path}: unknown header record {kind!r}")
        payload = raw[pos:]
        for name, tag, shape, off in entries:
            dt = np.dtype(_DTYPE_TAGS[tag])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * dt.itemsize
            if off + nbytes > len(payload):
                raise FormatError(f"{path}: payload truncated for tensor {name!r}")
            arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(shape)
            if name in archive.arrays:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            archive.arrays[name] = arr.copy()
        return archive
