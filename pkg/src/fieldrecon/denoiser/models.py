"""Score models: the EDM-preconditioned learned denoiser and an analytic Gaussian prior.

Both expose ``denoise(windows, masks, sigma, frames)`` on batches of windows
``(B, w, H, W)``; ``frames`` gives the absolute frame index of every window
slot so that non-stationary analytic priors can look up their moments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..errors import MaskViolation, NonPositiveSigma, ShapeError
from ..grid import NormParams
from .net import LocalScoreNet, NetConfig, NetParams, build_net

SIGMA_DATA = 0.5


def edm_coefficients(sigma, sigma_data: float = SIGMA_DATA):
    """``(c_skip, c_out, c_in, c_noise)`` for EDM preconditioning."""
    s2 = sigma * sigma
    d2 = sigma_data * sigma_data
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / (s2 + d2) ** 0.5
    c_in = 1.0 / (s2 + d2) ** 0.5
    c_noise = (torch.log(sigma) if torch.is_tensor(sigma) else np.log(sigma)) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float = SIGMA_DATA):
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2


def _check_sigma(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise NonPositiveSigma(f"sigma must be positive and finite, got {sigma!r}")


def _frames_for(windows: np.ndarray, frames) -> np.ndarray:
    if frames is None:
        return np.broadcast_to(np.arange(windows.shape[1]), windows.shape[:2])
    frames = np.asarray(frames)
    if frames.shape != windows.shape[:2]:
        raise ShapeError(f"frames shape {frames.shape} != windows batch shape {windows.shape[:2]}")
    return frames


class LearnedScoreModel:
    """EDM wrapper ``D(x, m, sigma) = c_skip x + c_out F(c_in x (+) m, c_noise)`` around a net."""

    def __init__(self, config: NetConfig, params: NetParams | LocalScoreNet,
                 norm: NormParams | None = None, sigma_data: float = SIGMA_DATA):
        self.config = config
        self.net = params if isinstance(params, LocalScoreNet) else build_net(config, params)
        self.net.eval()
        self.norm = norm
        self.sigma_data = sigma_data

    @property
    def window(self) -> int:
        return self.config.window

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    @property
    def params(self) -> NetParams:
        return {k: v.detach() for k, v in self.net.named_parameters()}

    def denoise_tensor(self, x, mask, sigma):
        """Differentiable path on tensors; ``sigma`` has shape ``(B,)``."""
        c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, self.sigma_data)
        view = (-1, 1, 1, 1)
        f = self.net(c_in.view(view) * x, mask, c_noise)
        return c_skip.view(view) * x + c_out.view(view) * f

    def denoise(self, windows, masks, sigma, frames=None, batch_size: int = 64) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        masks = np.asarray(masks)
        if windows.ndim != 4 or windows.shape[1] != self.window:
            raise ShapeError(f"expected (B, {self.window}, H, W) windows, got {windows.shape}")
        if masks.shape != windows.shape:
            raise ShapeError(f"mask shape {masks.shape} != window shape {windows.shape}")
        self.config.check_grid(*windows.shape[2:])
        _check_sigma(sigma)
        out = np.empty_like(windows)
        with torch.inference_mode():
            for lo in range(0, windows.shape[0], batch_size):
                x = torch.as_tensor(windows[lo:lo + batch_size], dtype=self.dtype)
                m = torch.as_tensor(masks[lo:lo + batch_size], dtype=self.dtype)
                s = torch.full((x.shape[0],), float(sigma), dtype=self.dtype)
                out[lo:lo + batch_size] = self.denoise_tensor(x, m, s).double().numpy()
        return out


@dataclass(frozen=True, eq=False)
class AnalyticGaussian:
    """Independent-cell Gaussian prior ``N(mean, diag(var_diag))`` over a (T, H, W) sequence.

    Its denoiser is the exact posterior mean, so it doubles as an oracle for
    the samplers. Time-separable, so any odd ``window`` gives identical
    center-frame estimates.
    """

    mean: np.ndarray
    var_diag: np.ndarray
    window: int = 1

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        var = np.broadcast_to(np.asarray(self.var_diag, dtype=np.float64), mean.shape).copy()
        if mean.ndim != 3:
            raise ShapeError(f"mean must be (T, H, W), got {mean.shape}")
        if not np.all(var > 0):
            raise ValueError("var_diag must be strictly positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_diag", var)

    def denoise(self, windows, masks, sigma, frames=None, batch_size=None) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 4 or windows.shape[2:] != self.mean.shape[1:]:
            raise ShapeError(f"windows {windows.shape} incompatible with prior {self.mean.shape}")
        _check_sigma(sigma)
        idx = _frames_for(windows, frames)
        mu = self.mean[idx]
        var = self.var_diag[idx]
        s2 = float(sigma) ** 2
        est = (var * windows + s2 * mu) / (var + s2)
        if masks is None:
            return est
        # Cells are independent, so a hidden cell's posterior mean is its prior mean.
        return np.where(np.asarray(masks) > 0, est, mu)

    def score_closed_form(self, x, sigma, frames=None) -> np.ndarray:
        """Score of the noised marginal ``N(mean, var_diag + sigma^2)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            fr = None if frames is None else np.asarray(frames)[None]
            return self.score_closed_form(x[None], sigma, fr)[0]
        idx = _frames_for(x, frames)
        return -(x - self.mean[idx]) / (self.var_diag[idx] + float(sigma) ** 2)


ScoreModel = LearnedScoreModel | AnalyticGaussian


def forward(model: ScoreModel, noisy_window, mask_window, sigma, frames=None) -> np.ndarray:
    """Clean estimate of a single ``(w, H, W)`` window."""
    noisy_window = np.asarray(noisy_window, dtype=np.float64)
    mask_window = np.asarray(mask_window)
    if noisy_window.ndim != 3 or mask_window.shape != noisy_window.shape:
        raise ShapeError(f"need matching (w, H, W) window and mask, got "
                         f"{noisy_window.shape} and {mask_window.shape}")
    if noisy_window.shape[0] != model.window:
        raise ShapeError(f"window has {noisy_window.shape[0]} frames, model expects {model.window}")
    _check_sigma(sigma)
    fr = None if frames is None else np.asarray(frames)[None]
    return model.denoise(noisy_window[None], mask_window[None], sigma, fr)[0]


def score(model: ScoreModel, noisy_window, mask_window, sigma, frames=None) -> np.ndarray:
    """Tweedie score ``(x_hat0 - x) / sigma^2``."""
    x0 = forward(model, noisy_window, mask_window, sigma, frames)
    return (x0 - np.asarray(noisy_window, dtype=np.float64)) / float(sigma) ** 2


# -- training objective ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainBatch:
    """Stacked ambient-training batch; all arrays ``(B, w, H, W)`` except ``sigma`` ``(B,)``."""

    x0: np.ndarray
    obs_mask: np.ndarray
    train_mask: np.ndarray
    sigma: np.ndarray
    noise: np.ndarray

    @classmethod
    def from_items(cls, items: Sequence[tuple]) -> "TrainBatch":
        if not items:
            raise ValueError("batch must be non-empty")
        cols = list(zip(*items))
        return cls(*(np.stack([np.asarray(v) for v in col]) for col in cols[:3]),
                   np.asarray(cols[3], dtype=np.float64),
                   np.stack([np.asarray(v) for v in cols[4]]))


def ambient_loss(model: LearnedScoreModel, batch: TrainBatch, per_item: bool = False):
    """Differentiable ambient loss tensor.

    Pooled mean over the batch of ``lambda(sigma) * (x_hat0 - x0)^2`` on cells
    with ``obs_mask == 1``. The network only sees ``(x0 + sigma*noise)`` where
    ``train_mask == 1``; hidden cells are excluded with ``where`` (not a
    product), so their stored values cannot leak in, not even as NaN.
    """
    if batch.x0.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    a = np.asarray(batch.obs_mask)
    at = np.asarray(batch.train_mask)
    if np.any(at > a):
        raise MaskViolation("train mask has valid cells outside the observation mask")
    dt = model.dtype
    x0 = torch.as_tensor(np.asarray(batch.x0, dtype=np.float64), dtype=dt)
    sigma = torch.as_tensor(np.asarray(batch.sigma, dtype=np.float64), dtype=dt)
    noise = torch.as_tensor(np.asarray(batch.noise, dtype=np.float64), dtype=dt)
    a_t = torch.as_tensor(a > 0)
    at_t = torch.as_tensor(at > 0)
    x_in = torch.where(at_t, x0 + sigma.view(-1, 1, 1, 1) * noise, torch.zeros((), dtype=dt))
    x_hat = model.denoise_tensor(x_in, at_t.to(dt), sigma)
    err = torch.where(a_t, x_hat - x0, torch.zeros((), dtype=dt))
    per_cell = loss_weight(sigma).view(-1, 1, 1, 1) * err * err
    total = per_cell.sum()
    count = max(int(a_t.sum()), 1)
    loss = total / count
    if per_item:
        return loss, per_cell.sum(dim=(1, 2, 3)), a_t.sum(dim=(1, 2, 3))
    return loss


def loss_and_grad(model: LearnedScoreModel, batch: TrainBatch | Sequence[tuple]):
    """Ambient loss and its exact reverse-mode gradient for every parameter."""
    if not isinstance(batch, TrainBatch):
        batch = TrainBatch.from_items(batch)
    params = dict(model.net.named_parameters())
    loss = ambient_loss(model, batch)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {name: (torch.zeros_like(p) if g is None else g.detach())
           for (name, p), g in zip(params.items(), grads)}
    return float(loss.detach()), out
