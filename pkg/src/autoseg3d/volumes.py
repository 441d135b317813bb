"""Volume/label containers and file I/O.

Arrays are indexed ``(d, h, w)`` with physical voxel spacing
``spacing_mm = (sz, sy, sx)`` (slice, row, column).  Two formats are
supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``), spacing taken from ``pixdim``.  The
  codec here is self-contained; ``.nii.gz`` is written with gzip
  ``mtime=0`` so identical data produces identical bytes.
* A raw portable container (``.rawvol``) reusing the tensor-archive
  layout: tensors ``image`` and optionally ``labels`` plus spacing in
  the metadata.  Useful for dependency-free round-trip tests.

A dataset manifest is a CSV file with header ``image,label,split``.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .archive import CheckpointArchive
from .errors import DataError, FormatError


@dataclass
class Volume:
    """Dense 3D scalar grid with physical voxel spacing."""

    data: np.ndarray                      # (D, H, W) float
    spacing_mm: tuple[float, float, float]  # (sz, sy, sx)
    origin_mm: Optional[tuple[float, float, float]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if any(s <= 0 for s in self.spacing_mm):
            raise DataError(f"spacing must be positive, got {self.spacing_mm}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelMap:
    """Per-voxel integer class annotation paired with a Volume."""

    data: np.ndarray                      # (D, H, W) integer, values in {0..num_classes}
    num_classes: int                      # foreground class count K
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"label data must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise DataError(f"label data must be integer, got {self.data.dtype}")
        if self.data.size and int(self.data.max()) > self.num_classes:
            raise DataError(
                f"label value {int(self.data.max())} exceeds num_classes={self.num_classes}"
            )
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


# ---------------------------------------------------------------------------
# NIfTI-1 codec
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def _is_gz(path) -> bool:
    return str(path).endswith(".gz")


def _read_bytes(path) -> bytes:
    opener = gzip.open if _is_gz(path) else open
    with opener(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, blob: bytes) -> None:
    if _is_gz(path):
        # empty filename + mtime=0 keep output byte-identical across runs
        with open(path, "wb") as raw:
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


def _nifti_header(data: np.ndarray, spacing_mm, origin_mm) -> bytes:
    d, h, w = data.shape
    sz, sy, sx = spacing_mm
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)                        # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)   # dim (x fastest)
    code = _NIFTI_CODES[np.dtype(data.dtype)]
    struct.pack_into("<h", hdr, 70, code)                      # datatype
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)   # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)                    # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                      # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)                      # scl_inter
    ox, oy, oz = (0.0, 0.0, 0.0)
    if origin_mm is not None:
        oz, oy, ox = origin_mm
    struct.pack_into("<h", hdr, 254, 1)                        # sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, ox)            # srow_x
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, oy)            # srow_y
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, oz)            # srow_z
    hdr[344:348] = b"n+1\x00"                                  # magic
    return bytes(hdr)


def _write_nifti(path, data: np.ndarray, spacing_mm, origin_mm) -> None:
    data = np.ascontiguousarray(data)
    if np.dtype(data.dtype) not in _NIFTI_CODES:
        raise FormatError(f"{path}: cannot write dtype {data.dtype} as NIfTI")
    blob = _nifti_header(data, spacing_mm, origin_mm) + b"\x00" * 4
    # our (d,h,w) C-order array is already x-fastest on disk
    le = data.astype(data.dtype.newbyteorder("<"), copy=False) if data.dtype.itemsize > 1 else data
    _write_bytes(path, blob + le.tobytes())


def _read_nifti(path) -> tuple[np.ndarray, tuple, tuple]:
    raw = _read_bytes(path)
    if len(raw) < 352:
        raise FormatError(f"{path}: file too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise FormatError(f"{path}: bad NIfTI field 'sizeof_hdr' ({sizeof_hdr})")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad NIfTI field 'magic' ({magic!r})")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: bad NIfTI field 'dim[0]' ({ndim})")
    shape_xyz = [max(1, dim[i]) for i in range(1, 4)]
    if ndim > 3 and any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise FormatError(f"{path}: bad NIfTI field 'dim' (only scalar 3D volumes supported)")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: bad NIfTI field 'datatype' ({datatype})")
    pixdim = struct.unpack_from("<8f", raw, 76)
    sx, sy, sz = pixdim[1], pixdim[2], pixdim[3]
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise FormatError(f"{path}: bad NIfTI field 'spacing' (pixdim {(sx, sy, sz)})")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset) if vox_offset >= 352 else 352
    slope, inter = struct.unpack_from("<2f", raw, 112)
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    w, h, d = shape_xyz
    count = d * h * w
    if offset + count * dt.itemsize > len(raw):
        raise FormatError(f"{path}: bad NIfTI field 'data' (payload truncated)")
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    data = flat.reshape(d, h, w).copy()  # z slowest on disk -> (d,h,w)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * (slope if slope != 0.0 else 1.0) + inter
    origin = None
    (sform_code,) = struct.unpack_from("<h", raw, 254)
    if sform_code > 0:
        srow_x = struct.unpack_from("<4f", raw, 280)
        srow_y = struct.unpack_from("<4f", raw, 296)
        srow_z = struct.unpack_from("<4f", raw, 312)
        origin = (float(srow_z[3]), float(srow_y[3]), float(srow_x[3]))
    return data, (float(sz), float(sy), float(sx)), origin


# ---------------------------------------------------------------------------
# Public I/O
# ---------------------------------------------------------------------------

def _is_nifti(path) -> bool:
    s = str(path)
    return s.endswith(".nii") or s.endswith(".nii.gz")


def save_volume(path, volume: Volume, labels: Optional[LabelMap] = None) -> None:
    """Write a volume (and optional labels, raw container only) to disk."""
    if _is_nifti(path):
        if labels is not None:
            raise DataError("NIfTI files hold one array; write labels to their own file")
        _write_nifti(path, volume.data.astype(np.float32, copy=False),
                     volume.spacing_mm, volume.origin_mm)
        return
    arc = CheckpointArchive()
    arc.meta["spacing_mm"] = list(volume.spacing_mm)
    if volume.origin_mm is not None:
        arc.meta["origin_mm"] = list(volume.origin_mm)
    arc.add("image", volume.data.astype(np.float32, copy=False))
    if labels is not None:
        arc.meta["num_classes"] = labels.num_classes
        arc.add("labels", labels.data.astype(np.int16, copy=False))
    arc.save(path)


def save_labelmap(path, labels: LabelMap) -> None:
    if _is_nifti(path):
        _write_nifti(path, labels.data.astype(np.int16, copy=False), labels.spacing_mm, None)
        return
    arc = CheckpointArchive()
    arc.meta["spacing_mm"] = list(labels.spacing_mm)
    arc.meta["num_classes"] = labels.num_classes
    arc.add("labels", labels.data.astype(np.int16, copy=False))
    arc.save(path)


def load_volume(path) -> tuple[Volume, Optional[LabelMap]]:
    """Read a volume; raw containers may also carry labels."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if _is_nifti(path):
        data, spacing, origin = _read_nifti(path)
        return Volume(data.astype(np.float32), spacing, origin), None
    arc = CheckpointArchive.load(path)
    if "spacing_mm" not in arc.meta:
        raise FormatError(f"{path}: missing 'spacing' metadata")
    spacing = tuple(arc.meta["spacing_mm"])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: bad field 'spacing' ({spacing})")
    if "image" not in arc:
        raise FormatError(f"{path}: missing 'image' tensor")
    origin = tuple(arc.meta["origin_mm"]) if "origin_mm" in arc.meta else None
    vol = Volume(arc["image"].astype(np.float32), spacing, origin)
    labels = None
    if "labels" in arc:
        k = int(arc.meta.get("num_classes", int(arc["labels"].max(initial=0))))
        labels = LabelMap(arc["labels"].astype(np.int16), k, spacing)
    return vol, labels


def load_labelmap(path, num_classes: Optional[int] = None) -> LabelMap:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if _is_nifti(path):
        data, spacing, _ = _read_nifti(path)
        data = np.rint(data).astype(np.int16)
        k = num_classes if num_classes is not None else int(data.max(initial=0))
        return LabelMap(data, k, spacing)
    arc = CheckpointArchive.load(path)
    if "labels" not in arc:
        raise FormatError(f"{path}: container holds no 'labels' tensor")
    spacing = tuple(arc.meta.get("spacing_mm", ()))
    if not spacing:
        raise FormatError(f"{path}: missing 'spacing' metadata")
    k = num_classes if num_classes is not None \
        else int(arc.meta.get("num_classes", int(arc["labels"].max(initial=0))))
    return LabelMap(arc["labels"].astype(np.int16), k, spacing)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    label: str
    split: str


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "label", "split"])
        for e in entries:
            writer.writerow([e.image, e.label, e.split])


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such manifest")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image", "label", "split"]:
            raise FormatError(f"{path}: bad manifest header {header!r}")
        for row in reader:
            if len(row) != 3:
                raise FormatError(f"{path}: bad manifest row {row!r}")
            entries.append(ManifestEntry(*row))
    return entries
