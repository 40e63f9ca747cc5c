"""AODF v1 binary container for fields and masks.

Layout (little-endian)::

    0..3    magic b"AODF"
    4..7    version      u32 = 1
    8..11   n_time       u32
    12..15  height       u32
    16..19  width        u32
    20..23  payload kind u32 (0 = float32 field, 1 = uint8 mask)
    24..    payload, row-major (t, i, j)

Fields are held in float64 in memory and stored as float32.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .grid import Field, GridSpec, MaskField

MAGIC = b"AODF"
VERSION = 1
KIND_FIELD = 0
KIND_MASK = 1
_HEADER = struct.Struct("<4sIIIII")
_DTYPES = {KIND_FIELD: np.dtype("<f4"), KIND_MASK: np.dtype("u1")}


def write_array(values: np.ndarray, path, kind: int = KIND_FIELD) -> None:
    """Write any (T, H, W) array; no grid-size validation (observation payloads can be tiny)."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise FormatError(f"AODF stores 3-D arrays, got shape {values.shape}")
    if kind not in _DTYPES:
        raise FormatError(f"unknown payload kind {kind}")
    if kind == KIND_FIELD and not np.all(np.isfinite(values)):
        raise ValueError("refusing to write non-finite field values")
    payload = np.ascontiguousarray(values, dtype=_DTYPES[kind])
    header = _HEADER.pack(MAGIC, VERSION, *values.shape, kind)
    with open(os.fspath(path), "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_array(path) -> tuple[np.ndarray, int]:
    """Return ``(values, kind)``; float payloads come back as float64."""
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, t, h, w, kind = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind not in _DTYPES:
        raise FormatError(f"{path}: unknown payload kind {kind}")
    dtype = _DTYPES[kind]
    expected = t * h * w * dtype.itemsize
    got = len(blob) - _HEADER.size
    if got != expected:
        raise FormatError(f"{path}: payload has {got} bytes, header implies {expected}")
    values = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(t, h, w)
    if kind == KIND_FIELD:
        values = values.astype(np.float64)
    else:
        values = values.copy()
    return values, kind


def write_field(x: Field | MaskField, path) -> None:
    if isinstance(x, MaskField):
        write_array(x.flags, path, KIND_MASK)
    else:
        write_array(x.values, path, KIND_FIELD)


def read_field(path, dt_hours: float = 1.0) -> Field:
    values, kind = read_array(path)
    if kind != KIND_FIELD:
        raise FormatError(f"{path}: holds a mask, not a field")
    try:
        return Field(GridSpec.from_shape(values.shape, dt_hours), values)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_mask(path, dt_hours: float = 1.0) -> MaskField:
    values, kind = read_array(path)
    if kind != KIND_MASK:
        raise FormatError(f"{path}: holds a field, not a mask")
    try:
        return MaskField(GridSpec.from_shape(values.shape, dt_hours), values)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
