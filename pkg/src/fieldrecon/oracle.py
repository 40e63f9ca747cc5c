"""Exact posteriors for linear observations of a diagonal Gaussian prior."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NonLinearOperator, ShapeError
from .observe import Downsample, Identity, Masking


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Independent per-cell Gaussian ``N(mean, var_diag)``."""

    mean: np.ndarray
    var_diag: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        var = np.broadcast_to(np.asarray(self.var_diag, dtype=np.float64), mean.shape).copy()
        if not np.all(var > 0):
            raise ValueError("var_diag must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_diag", var)


def _block_view(a: np.ndarray, s: int) -> np.ndarray:
    t, h, w = a.shape
    return a.reshape(t, h // s, s, w // s, s)


def exact_gaussian_posterior(prior: GaussianBelief, kind, y, sigma_y: float) -> GaussianBelief:
    """Conjugate update of ``prior`` given ``y = A x + N(0, sigma_y^2 I)``.

    Downsample posteriors are correlated within each block; the returned
    belief holds their exact marginals (block mean and marginal variances).
    """
    if not sigma_y > 0:
        raise ValueError("sigma_y must be positive")
    y = np.asarray(y, dtype=np.float64)
    mu, v = prior.mean, prior.var_diag
    s2 = float(sigma_y) ** 2
    if isinstance(kind, (Identity, Masking)):
        if y.shape != mu.shape:
            raise ShapeError(f"y shape {y.shape} != prior shape {mu.shape}")
        prec = 1.0 / v + 1.0 / s2
        mean = (mu / v + y / s2) / prec
        var = 1.0 / prec
        if isinstance(kind, Masking):
            kind.check(mu.shape)
            keep = kind.mask > 0
            mean = np.where(keep, mean, mu)
            var = np.where(keep, var, v)
        return GaussianBelief(mean, var)
    if isinstance(kind, Downsample):
        if y.shape != kind.out_shape(mu.shape):
            raise ShapeError(f"y shape {y.shape} != operator output {kind.out_shape(mu.shape)}")
        s, n = kind.s_step, kind.s_step**2
        mean, var = mu.copy(), v.copy()
        mu_b = _block_view(mu[:: kind.t_step], s)
        v_b = _block_view(v[:: kind.t_step], s)
        # Scalar observation of the block mean: innovation variance and gain per block.
        innov = v_b.sum(axis=(2, 4)) / n**2 + s2
        resid = y - mu_b.mean(axis=(2, 4))
        gain = v_b / (n * innov[:, :, None, :, None])
        mean[:: kind.t_step] = (mu_b + gain * resid[:, :, None, :, None]).reshape(mean[:: kind.t_step].shape)
        var[:: kind.t_step] = (v_b - v_b**2 / (n**2 * innov[:, :, None, :, None])
                               ).reshape(var[:: kind.t_step].shape)
        return GaussianBelief(mean, var)
    raise NonLinearOperator(f"no closed form for operator {type(kind).__name__}")


def posterior_sample_stats(samples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell sample mean and unbiased variance."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    return stack.mean(axis=0), stack.var(axis=0, ddof=1)
