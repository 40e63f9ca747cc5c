"""Field-comparison metrics: nRMSE, radially averaged power spectra, MELR, temporal ACF.

RAPSD convention: after removing the frame mean, ``F = fft2(v)`` (no window,
no scaling) and each full-plane frequency ``(ky, kx)`` (signed integers) falls
in ring ``round(sqrt(ky^2 + kx^2))``. A ring's power is the mean of
``|F|^2 / (H * W)`` over its members, so
``sum_k power_k * count_k == sum_cells (v - mean)^2`` (Parseval).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AllConstant, EmptySpectrum, ShapeError

RAPSD_CONVENTION = ("power = mean over ring of |fft2(v - mean)|^2 / (H*W); "
                    "rings round(sqrt(ky^2+kx^2)) over the full frequency plane")


@dataclass(frozen=True, eq=False)
class Spectrum:
    wavenumbers: np.ndarray
    power: np.ndarray
    n_contributors: np.ndarray

    def at(self, k: int) -> float:
        hit = np.nonzero(self.wavenumbers == k)[0]
        return float(self.power[hit[0]]) if hit.size else 0.0


@dataclass(frozen=True, eq=False)
class AcfCurve:
    lags: np.ndarray
    values: np.ndarray


def _ring_index(h: int, w: int) -> np.ndarray:
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    return np.rint(np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)).astype(int)


def rapsd(frame) -> Spectrum:
    v = np.asarray(frame, dtype=np.float64)
    if v.ndim != 2 or min(v.shape) < 4:
        raise ShapeError(f"need a 2-D frame of at least 4x4, got {v.shape}")
    h, w = v.shape
    power2d = np.abs(np.fft.fft2(v - v.mean())) ** 2 / (h * w)
    rings = _ring_index(h, w).ravel()
    counts = np.bincount(rings)
    sums = np.bincount(rings, weights=power2d.ravel())
    keep = counts > 0
    k = np.nonzero(keep)[0]
    return Spectrum(k, sums[keep] / counts[keep], counts[keep])


def _frames(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ShapeError(f"expected (T, H, W), got {a.shape}")
    return a


def melr(gen, gt) -> float:
    """Mean over frames of the mean over rings ``1..K`` of ``|ln(P_gen / P_gt)|``."""
    g, r = _frames(gen), _frames(gt)
    if g.shape != r.shape:
        raise ShapeError(f"shape mismatch {g.shape} vs {r.shape}")
    per_frame = []
    dropped = 0
    for a, b in zip(g, r):
        sa, sb = rapsd(a), rapsd(b)
        k_max = min(sa.wavenumbers.max(), sb.wavenumbers.max())
        pa = np.zeros(k_max + 1)
        pb = np.zeros(k_max + 1)
        pa[sa.wavenumbers[sa.wavenumbers <= k_max]] = sa.power[sa.wavenumbers <= k_max]
        pb[sb.wavenumbers[sb.wavenumbers <= k_max]] = sb.power[sb.wavenumbers <= k_max]
        pa, pb = pa[1:], pb[1:]
        ok = (pa > 0) & (pb > 0)
        dropped += int((~ok).sum())
        if ok.any():
            per_frame.append(np.mean(np.abs(np.log(pa[ok] / pb[ok]))))
    if dropped:
        warnings.warn(f"melr: excluded {dropped} empty spectral bins", RuntimeWarning, stacklevel=2)
    if not per_frame:
        raise EmptySpectrum("every spectral bin was empty")
    return float(np.mean(per_frame))


def nrmse(gen, gt, sigma_x: float) -> float:
    """Per-frame RMSE divided by ``sigma_x``, averaged over frames."""
    g, r = _frames(gen), _frames(gt)
    if g.shape != r.shape:
        raise ShapeError(f"shape mismatch {g.shape} vs {r.shape}")
    if not sigma_x > 0:
        raise ValueError("sigma_x must be positive")
    rmse = np.sqrt(np.mean((g - r) ** 2, axis=(1, 2)))
    return float(np.mean(rmse / sigma_x))


def dataset_std(fields) -> float:
    """Population std pooled over every cell of every field."""
    pooled = np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in fields])
    return float(pooled.std())


def temporal_acf(x, max_lag: int) -> AcfCurve:
    """Cell-wise autocorrelation (biased estimator, so |r| <= 1) averaged over non-constant cells."""
    a = _frames(x)
    t = a.shape[0]
    if not 1 <= max_lag < t:
        raise ValueError(f"need 1 <= max_lag < n_time ({t}), got {max_lag}")
    d = (a - a.mean(axis=0)).reshape(t, -1)
    denom = np.sum(d * d, axis=0)
    live = denom > 0
    if not live.any():
        raise AllConstant("every cell is constant in time")
    d, denom = d[:, live], denom[live]
    values = np.empty(max_lag + 1)
    values[0] = 1.0
    for lag in range(1, max_lag + 1):
        values[lag] = float(np.mean(np.sum(d[:-lag] * d[lag:], axis=0) / denom))
    return AcfCurve(np.arange(max_lag + 1), np.clip(values, -1.0, 1.0))


def spatial_mean_std(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell temporal mean and population std."""
    a = _frames(x)
    if a.shape[0] < 2:
        raise ValueError("need at least two frames")
    return a.mean(axis=0), a.std(axis=0)
