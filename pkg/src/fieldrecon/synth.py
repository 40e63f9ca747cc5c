"""Synthetic proxy fields: log-normal spectral GRF sequences and cloud-cover surrogates."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import aodf
from .grid import Field, GridSpec, MaskField
from .seeding import derive_seed, make_rng

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class GrfConfig:
    spec: GridSpec
    spectral_slope: float = 2.0
    temporal_rho: float = 0.8
    amplitude: float = 0.5
    offset: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.temporal_rho <= 1.0:
            raise ValueError("temporal_rho must lie in [0, 1]")
        if self.spectral_slope < 0:
            raise ValueError("spectral_slope must be >= 0")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")


@dataclass(frozen=True)
class CloudConfig:
    spec: GridSpec
    correlation_length: float = 4.0
    temporal_rho: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.correlation_length < 1:
            raise ValueError("correlation_length must be >= 1 cell")
        if not 0.0 <= self.temporal_rho <= 1.0:
            raise ValueError("temporal_rho must lie in [0, 1]")


def _wavenumber(h: int, w: int) -> np.ndarray:
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    return np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)


def _unit_variance(filt: np.ndarray) -> np.ndarray:
    # ifft2(fft2(white) * f) has per-cell variance mean(f**2).
    return filt / np.sqrt(np.mean(filt**2))


def _ar1_frames(rng: np.random.Generator, filt: np.ndarray, n_time: int, rho: float) -> np.ndarray:
    h, w = filt.shape
    out = np.empty((n_time, h, w))
    innov = np.sqrt(max(0.0, 1.0 - rho * rho))
    prev = None
    for t in range(n_time):
        white = rng.standard_normal((h, w))
        frame = np.fft.ifft2(np.fft.fft2(white) * filt).real
        prev = frame if prev is None else rho * prev + innov * frame
        out[t] = prev
    return out


def power_law_filter(h: int, w: int, slope: float) -> np.ndarray:
    """Unit-variance spectral amplitude filter ``k**(-slope/2)`` with the DC term zeroed."""
    k = _wavenumber(h, w)
    filt = np.zeros_like(k)
    nz = k > 0
    filt[nz] = k[nz] ** (-slope / 2.0)
    return _unit_variance(filt)


def gen_grf(cfg: GrfConfig) -> Field:
    """Strictly positive log-normal field whose log has a ``k**-slope`` spectrum and AR(1) memory."""
    spec = cfg.spec
    filt = power_law_filter(spec.height, spec.width, cfg.spectral_slope)
    g = _ar1_frames(make_rng(cfg.seed), filt, spec.n_time, cfg.temporal_rho)
    return Field(spec, np.exp(cfg.amplitude * g + cfg.offset))


def gen_cloud(cfg: CloudConfig) -> Field:
    """Cloud-cover surrogate in [0, 1] with approximately uniform marginals."""
    spec = cfg.spec
    fy = np.fft.fftfreq(spec.height)[:, None]
    fx = np.fft.fftfreq(spec.width)[None, :]
    # Gaussian smoothing kernel with std `correlation_length` cells, applied spectrally.
    ell = cfg.correlation_length
    filt = _unit_variance(np.exp(-2.0 * np.pi**2 * ell**2 * (fy**2 + fx**2)))
    g = _ar1_frames(make_rng(cfg.seed), filt, spec.n_time, cfg.temporal_rho)
    return Field(spec, ndtr(g))


def sequence_seed(seed: int, i: int) -> int:
    return derive_seed(seed, "sequence", i)


def make_dataset(
    grf_cfg: GrfConfig,
    n_sequences: int,
    out_dir,
    cloud_cfg: CloudConfig | None = None,
    gamma: float | None = None,
) -> Path:
    """Write ``n_sequences`` AODF fields plus ``manifest.txt`` and return the manifest path.

    Manifest lines are ``path<TAB>seed`` with paths relative to the manifest.
    With ``cloud_cfg`` and ``gamma`` each sequence also gets a cloud mask
    (third column); the stored field is then zero at missing cells, so the
    hidden values never reach disk.
    """
    from .observe import mask_from_cloud  # local: observe imports grid only

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if (cloud_cfg is None) != (gamma is None):
        raise ValueError("cloud_cfg and gamma must be given together")
    lines = []
    for i in range(n_sequences):
        s = sequence_seed(grf_cfg.seed, i)
        x = gen_grf(GrfConfig(grf_cfg.spec, grf_cfg.spectral_slope, grf_cfg.temporal_rho,
                              grf_cfg.amplitude, grf_cfg.offset, s))
        name = f"seq_{i:04d}.aodf"
        if cloud_cfg is None:
            aodf.write_field(x, out / name)
            lines.append(f"{name}\t{s}")
            continue
        cs = derive_seed(s, "cloud")
        tcc = gen_cloud(CloudConfig(cloud_cfg.spec, cloud_cfg.correlation_length,
                                    cloud_cfg.temporal_rho, cs))
        mask = mask_from_cloud(tcc, gamma)
        mname = f"seq_{i:04d}.mask.aodf"
        aodf.write_field(Field(x.spec, np.where(mask.flags > 0, x.values, 0.0)), out / name)
        aodf.write_field(mask, out / mname)
        lines.append(f"{name}\t{s}\t{mname}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    seed: int
    mask_path: Path | None = None


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns")
        p = Path(parts[0])
        mask = Path(parts[2]) if len(parts) == 3 else None
        entries.append(ManifestEntry(
            path=p if p.is_absolute() else base / p,
            seed=int(parts[1]),
            mask_path=None if mask is None else (mask if mask.is_absolute() else base / mask),
        ))
    return entries


def load_dataset(path) -> list[tuple[Field, MaskField]]:
    """Read every manifest entry as ``(field, mask)``; entries without a mask get all-ones."""
    out = []
    for e in read_manifest(path):
        x = aodf.read_field(e.path)
        m = aodf.read_mask(e.mask_path) if e.mask_path is not None else MaskField.ones(x.spec)
        if m.shape != x.shape:
            raise ValueError(f"{e.mask_path}: mask shape {m.shape} != field shape {x.shape}")
        out.append((x, m))
    return out

