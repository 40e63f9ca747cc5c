"""Grid data model and robust normalization.

Fields are stored as float64 arrays of shape ``(n_time, height, width)``.
Missing data is never encoded in the values; it lives in a :class:`MaskField`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateDistribution, NegativeInput, ShapeError

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    n_time: int
    dt_hours: float = 1.0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ShapeError(f"grid must be at least 4x4, got {self.height}x{self.width}")
        if self.n_time < 1:
            raise ShapeError(f"n_time must be >= 1, got {self.n_time}")
        if not self.dt_hours > 0:
            raise ValueError("dt_hours must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_time, self.height, self.width)

    @classmethod
    def from_shape(cls, shape: Sequence[int], dt_hours: float = 1.0) -> "GridSpec":
        if len(shape) != 3:
            raise ShapeError(f"expected a (T, H, W) shape, got {tuple(shape)}")
        t, h, w = (int(s) for s in shape)
        return cls(height=h, width=w, n_time=t, dt_hours=dt_hours)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Field:
    """A real-valued (T, H, W) grid sequence."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != self.spec.shape:
            raise ShapeError(f"values shape {v.shape} does not match spec {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("Field values must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_array(cls, values, dt_hours: float = 1.0) -> "Field":
        values = np.asarray(values, dtype=np.float64)
        return cls(GridSpec.from_shape(values.shape, dt_hours), values)

    def with_values(self, values) -> "Field":
        return Field(self.spec, values)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.spec.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)


@dataclass(frozen=True, eq=False)
class MaskField:
    """Binary validity flags; 1 = observed, 0 = missing."""

    spec: GridSpec
    flags: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flags)
        if f.shape != self.spec.shape:
            raise ShapeError(f"flags shape {f.shape} does not match spec {self.spec.shape}")
        if f.dtype == np.bool_:
            f = f.astype(np.uint8)
        elif not np.all((f == 0) | (f == 1)):
            raise ValueError("mask flags must be exactly 0 or 1")
        object.__setattr__(self, "flags", _frozen(np.array(f, dtype=np.uint8, copy=True)))

    @classmethod
    def from_array(cls, flags, dt_hours: float = 1.0) -> "MaskField":
        flags = np.asarray(flags)
        return cls(GridSpec.from_shape(flags.shape, dt_hours), flags)

    @classmethod
    def ones(cls, spec: GridSpec) -> "MaskField":
        return cls(spec, np.ones(spec.shape, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.spec.shape

    @property
    def missing_fraction(self) -> float:
        return 1.0 - float(self.flags.mean())

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.flags
        return self.flags.astype(dtype)


@dataclass(frozen=True)
class NormParams:
    q_lo: float
    q_hi: float

    def __post_init__(self):
        if not self.q_hi > self.q_lo:
            raise DegenerateDistribution(f"q_hi ({self.q_hi}) must exceed q_lo ({self.q_lo})")

    @property
    def span(self) -> float:
        return self.q_hi - self.q_lo


# -- array-level transforms (used by the sampler on raw ndarrays) -------------

def log_transform_array(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size and v.min() < -1.0 + _EPS:
        raise NegativeInput(f"log transform needs values > -1, got min {v.min()!r}")
    return np.log1p(v)


def normalize_array(v: np.ndarray, p: NormParams) -> np.ndarray:
    return 2.0 * (log_transform_array(v) - p.q_lo) / (p.q_hi - p.q_lo) - 1.0


def denormalize_array(v: np.ndarray, p: NormParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.expm1((v + 1.0) / 2.0 * (p.q_hi - p.q_lo) + p.q_lo)


# -- Field-level API -----------------------------------------------------------

def log_transform(x: Field) -> Field:
    """Elementwise ``ln(1 + x)``."""
    return x.with_values(log_transform_array(x.values))


def fit_normalizer(
    dataset: Iterable[Field], masks: Iterable[MaskField] | None = None
) -> NormParams:
    """Pooled 1st/99th percentiles of ``ln(1 + x)`` over every cell of every field.

    When ``masks`` is given (one per field) only observed cells are pooled.
    Percentiles use linear interpolation between order statistics.
    """
    fields = list(dataset)
    if masks is None:
        pooled = [np.asarray(f.values).ravel() for f in fields]
    else:
        masks = list(masks)
        if len(masks) != len(fields):
            raise ShapeError("need exactly one mask per field")
        pooled = [np.asarray(f.values)[np.asarray(m.flags) > 0] for f, m in zip(fields, masks)]
    values = np.concatenate(pooled) if pooled else np.empty(0)
    if values.size < 100:
        raise ValueError(f"need at least 100 pooled values to fit, got {values.size}")
    logs = log_transform_array(values)
    q_lo, q_hi = np.percentile(logs, [1.0, 99.0], method="linear")
    if q_hi - q_lo < 1e-9:
        raise DegenerateDistribution("1st and 99th percentiles coincide; data is (near) constant")
    return NormParams(float(q_lo), float(q_hi))


def normalize(x: Field, p: NormParams) -> Field:
    """Map ``ln(1 + x)`` affinely so that [q_lo, q_hi] lands on [-1, 1]; tails are not clipped."""
    return x.with_values(normalize_array(x.values, p))


def denormalize(x: Field, p: NormParams) -> Field:
    return x.with_values(denormalize_array(x.values, p))
