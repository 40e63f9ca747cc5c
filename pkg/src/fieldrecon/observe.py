"""Linear degradation operators, noisy observation synthesis and fidelity gradients.

All operators act on plain ``(T, H, W)`` arrays; :class:`~fieldrecon.grid.Field`
instances are accepted anywhere an array is.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.ndimage import gaussian_filter

from . import aodf
from .errors import RangeError, ShapeError
from .grid import Field, MaskField
from .seeding import make_rng


def _as3d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"expected a (T, H, W) array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Identity:
    name = "identity"

    def out_shape(self, shape):
        return tuple(shape)

    def check(self, shape):
        pass

    def apply(self, x):
        return _as3d(x).copy()

    def adjoint(self, u, shape):
        u = _as3d(u)
        if u.shape != tuple(shape):
            raise ShapeError(f"residual shape {u.shape} != {tuple(shape)}")
        return u.copy()

    def gram_norm(self) -> float:
        return 1.0


@dataclass(frozen=True, eq=False)
class Masking:
    mask: np.ndarray
    name = "masking"

    def __post_init__(self):
        m = np.asarray(self.mask.flags if isinstance(self.mask, MaskField) else self.mask)
        if m.ndim != 3:
            raise ShapeError(f"mask must be (T, H, W), got {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary")
        m = np.array(m, dtype=np.uint8)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    def out_shape(self, shape):
        self.check(shape)
        return tuple(shape)

    def check(self, shape):
        if tuple(shape) != self.mask.shape:
            raise ShapeError(f"field shape {tuple(shape)} != mask shape {self.mask.shape}")

    def apply(self, x):
        x = _as3d(x)
        self.check(x.shape)
        return np.where(self.mask > 0, x, 0.0)

    def adjoint(self, u, shape):
        u = _as3d(u)
        self.check(u.shape)
        return np.where(self.mask > 0, u, 0.0)

    def gram_norm(self) -> float:
        return 1.0 if self.mask.any() else 0.0


@dataclass(frozen=True)
class Downsample:
    """``s_step`` x ``s_step`` block means, then keep frames 0, t_step, 2*t_step, ..."""

    s_step: int
    t_step: int = 1
    name = "downsample"

    def __post_init__(self):
        if self.s_step < 1 or self.t_step < 1:
            raise ValueError("s_step and t_step must be positive")

    def check(self, shape):
        t, h, w = shape
        if h % self.s_step or w % self.s_step:
            raise ShapeError(f"s_step={self.s_step} does not divide grid {h}x{w}")
        if self.t_step > t:
            raise ShapeError(f"t_step={self.t_step} exceeds n_time={t}")

    def out_shape(self, shape):
        self.check(shape)
        t, h, w = shape
        return (len(range(0, t, self.t_step)), h // self.s_step, w // self.s_step)

    def apply(self, x):
        x = _as3d(x)
        self.check(x.shape)
        t, h, w = x.shape
        s = self.s_step
        pooled = x[:: self.t_step].reshape(-1, h // s, s, w // s, s).mean(axis=(2, 4))
        return pooled

    def adjoint(self, u, shape):
        u = _as3d(u)
        if u.shape != self.out_shape(shape):
            raise ShapeError(f"residual shape {u.shape} != {self.out_shape(shape)}")
        s = self.s_step
        out = np.zeros(tuple(shape))
        spread = np.repeat(np.repeat(u, s, axis=1), s, axis=2) / (s * s)
        out[:: self.t_step] = spread
        return out

    def gram_norm(self) -> float:
        return 1.0 / (self.s_step * self.s_step)


OperatorKind = Union[Identity, Masking, Downsample]


@dataclass(frozen=True, eq=False)
class Observation:
    kind: OperatorKind
    y: np.ndarray
    sigma_m: float = 0.0
    lambda_m: float = 1.0
    gamma: float | None = None

    def __post_init__(self):
        y = np.array(np.asarray(self.y, dtype=np.float64), copy=True)
        if y.ndim != 3:
            raise ShapeError(f"observation values must be (T, H, W), got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("observation values must be finite")
        if self.sigma_m < 0:
            raise ValueError("sigma_m must be >= 0")
        if not self.lambda_m > 0:
            raise ValueError("lambda_m must be positive")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    def check(self, shape):
        expected = self.kind.out_shape(shape)
        if self.y.shape != expected:
            raise ShapeError(f"observation shape {self.y.shape} != operator output {expected}")

    def residual(self, x) -> np.ndarray:
        x = _as3d(x)
        self.check(x.shape)
        return self.kind.apply(x) - self.y

    def with_values(self, y) -> "Observation":
        return Observation(self.kind, y, self.sigma_m, self.lambda_m, self.gamma)


def mask_from_cloud(tcc, gamma: float) -> MaskField:
    """Cells whose cloud cover exceeds ``gamma`` are missing (0); ``tcc == gamma`` stays observed."""
    if not 0.0 <= gamma <= 1.0:
        raise RangeError(f"gamma must be in [0, 1], got {gamma}")
    values = _as3d(tcc)
    flags = np.where(values > gamma, 0, 1).astype(np.uint8)
    if isinstance(tcc, Field):
        return MaskField(tcc.spec, flags)
    return MaskField.from_array(flags)


def cloudlike_mask(shape, missing_rate: float, seed: int) -> np.ndarray:
    """Binary keep-mask from smooth noise cut at its ``missing_rate`` quantile.

    Noise is white noise smoothed with a Gaussian of std ``(1, H/8, W/8)``
    cells (periodic), so gaps are spatially coherent blobs that drift slowly
    in time. The missing share equals ``missing_rate`` up to ties.
    """
    t, h, w = shape
    if not 0.0 <= missing_rate < 1.0:
        raise RangeError(f"missing_rate must be in [0, 1), got {missing_rate}")
    if missing_rate == 0:
        return np.ones(shape, dtype=np.uint8)
    noise = gaussian_filter(make_rng(seed, "cloudlike").standard_normal(shape),
                            sigma=(1.0, h / 8, w / 8), mode="wrap")
    return (noise >= np.quantile(noise, missing_rate)).astype(np.uint8)


def apply_operator(kind: OperatorKind, x) -> np.ndarray:
    return kind.apply(x)


def adjoint_operator(kind: OperatorKind, u, shape) -> np.ndarray:
    return kind.adjoint(u, shape)


def observe_noisy(kind: OperatorKind, x, sigma_m: float, seed: int,
                  lambda_m: float = 1.0, gamma: float | None = None) -> Observation:
    """``y = A(x) + sigma_m * xi``; masked-out cells stay exactly zero."""
    if sigma_m < 0:
        raise ValueError("sigma_m must be >= 0")
    clean = kind.apply(x)
    if sigma_m > 0:
        noise = sigma_m * make_rng(seed, "observation").standard_normal(clean.shape)
        if isinstance(kind, Masking):
            noise = np.where(kind.mask > 0, noise, 0.0)
        y = clean + noise
    else:
        y = clean
    return Observation(kind, y, float(sigma_m), float(lambda_m), gamma)


def fidelity_grad(obs: Observation, x) -> np.ndarray:
    """Gradient of ``||A(x) - y||^2`` with respect to ``x``."""
    x = _as3d(x)
    return 2.0 * obs.kind.adjoint(obs.residual(x), x.shape)


# -- serialization ------------------------------------------------------------

def save_observation(obs: Observation, directory, stem: str) -> Path:
    """Write ``<stem>.y.aodf`` (+ ``<stem>.mask.aodf``) and a ``<stem>.obs.txt`` descriptor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    aodf.write_array(obs.y, d / f"{stem}.y.aodf")
    lines = [f"kind = {obs.kind.name}", f"y = {stem}.y.aodf"]
    if isinstance(obs.kind, Masking):
        aodf.write_array(obs.kind.mask, d / f"{stem}.mask.aodf", aodf.KIND_MASK)
        lines.append(f"mask = {stem}.mask.aodf")
    if isinstance(obs.kind, Downsample):
        lines += [f"s_step = {obs.kind.s_step}", f"t_step = {obs.kind.t_step}"]
    lines += [f"sigma_m = {obs.sigma_m!r}", f"lambda_m = {obs.lambda_m!r}"]
    if obs.gamma is not None:
        lines.append(f"gamma = {obs.gamma!r}")
    path = d / f"{stem}.obs.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def observation_from_settings(settings: dict, base=".") -> Observation:
    """Build an observation from descriptor-style ``key -> str`` settings."""
    base = Path(base)

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    kind_name = settings.get("kind", "").strip().lower()
    if "y" not in settings:
        raise KeyError("y")
    y, ykind = aodf.read_array(resolve(settings["y"]))
    if ykind != aodf.KIND_FIELD:
        raise ValueError("observation values file holds a mask")
    if kind_name == "identity":
        kind = Identity()
    elif kind_name == "masking":
        if "mask" not in settings:
            raise KeyError("mask")
        m, mkind = aodf.read_array(resolve(settings["mask"]))
        if mkind != aodf.KIND_MASK:
            raise ValueError("mask file holds a float field")
        kind = Masking(m)
    elif kind_name == "downsample":
        kind = Downsample(int(settings.get("s_step", 1)), int(settings.get("t_step", 1)))
    else:
        raise ValueError(f"unknown observation kind {kind_name!r}")
    gamma = settings.get("gamma")
    return Observation(
        kind, y,
        sigma_m=float(settings.get("sigma_m", 0.0)),
        lambda_m=float(settings.get("lambda_m", 1.0)),
        gamma=None if gamma is None else float(gamma),
    )


def load_observation(path) -> Observation:
    from .config import parse_flat

    path = Path(path)
    settings = parse_flat(path.read_text(encoding="utf-8"), str(path))
    return observation_from_settings(settings, path.parent)
