"""Corruption-aware denoiser training.

The core loop works on already-normalized ``(T, H, W)`` arrays paired with
observation masks ``A``. Every step draws i.i.d. windows, noise levels, noise
and an extra dropout mask ``B``; the network sees ``A * B`` while the loss is
scored on ``A``. The optimizer is ``torch.optim.Adam``; the returned parameters
are an exponential moving average of the iterates.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import format_config, parse_flat
from .errors import ConfigError, DivergedLoss, ShapeError
from .grid import Field, MaskField, NormParams, fit_normalizer, normalize
from .denoiser.models import LearnedScoreModel, TrainBatch, ambient_loss
from .denoiser.net import NetConfig, init_params
from .observe import cloudlike_mask
from .seeding import derive_seed, make_rng
from .synth import load_dataset

DROPOUT_KINDS = ("rects", "cloudlike", "none")
LR_SCHEDULES = ("constant", "cosine")
# Upper edges of the noise-level buckets used in the training log.
SIGMA_BUCKETS = ((0.1, "low"), (1.0, "mid"), (math.inf, "high"))


@dataclass(frozen=True)
class TrainConfig:
    p_mean: float = -1.2
    p_std: float = 1.2
    dropout_kind: str = "none"
    dropout_rate: float = 0.0
    batch_size: int = 8
    n_steps: int = 1000
    lr: float = 1e-3
    lr_schedule: str = "constant"
    ema_decay: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if not self.p_std > 0:
            raise ValueError("p_std must be positive")
        if self.dropout_kind not in DROPOUT_KINDS:
            raise ValueError(f"dropout_kind must be one of {DROPOUT_KINDS}")
        if not 0.0 <= self.dropout_rate <= 0.9:
            raise ValueError("dropout_rate must lie in [0, 0.9]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def to_text(self) -> str:
        return format_config({k: repr(v) if isinstance(v, float) else v
                              for k, v in asdict(self).items()})

    @classmethod
    def from_settings(cls, settings: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(settings) - set(types)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        kw = {}
        for key, raw in settings.items():
            conv = {"float": float, "int": int, "str": str}[types[key]]
            try:
                kw[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        try:
            return cls(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        return cls.from_settings(parse_flat(path.read_text(encoding="utf-8"), str(path)))


def sample_sigma(cfg: TrainConfig, seed: int, i: int) -> float:
    """Log-normal noise level for draw ``i``."""
    z = make_rng(seed, "sigma", i).standard_normal()
    return float(np.exp(cfg.p_mean + cfg.p_std * z))


def _rect_dropout(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero random axis-aligned rectangles (shared across frames) until ``rate`` is reached."""
    _, h, w = shape
    keep = np.ones((h, w), dtype=bool)
    target = rate * h * w
    for _ in range(1000):
        if (~keep).sum() >= target:
            break
        rh = int(rng.integers(1, max(2, h // 2) + 1))
        rw = int(rng.integers(1, max(2, w // 2) + 1))
        i = int(rng.integers(0, h - rh + 1))
        j = int(rng.integers(0, w - rw + 1))
        keep[i:i + rh, j:j + rw] = False
    return np.broadcast_to(keep, shape)


def make_train_mask(obs_mask, cfg: TrainConfig, seed: int) -> np.ndarray:
    """``A * B`` for a fresh dropout mask ``B``; works on any ``(w, H, W)`` window."""
    a = np.asarray(obs_mask.flags if isinstance(obs_mask, MaskField) else obs_mask)
    if a.ndim != 3:
        raise ShapeError(f"mask window must be (w, H, W), got {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("mask must be binary")
    if cfg.dropout_kind == "none" or cfg.dropout_rate == 0:
        return a.astype(np.uint8)
    rng = make_rng(seed)
    if cfg.dropout_kind == "rects":
        keep = _rect_dropout(a.shape, cfg.dropout_rate, rng)
    else:
        keep = cloudlike_mask(a.shape, cfg.dropout_rate, seed) > 0
    return (a.astype(bool) & keep).astype(np.uint8)


def window_indices(center: int, window: int, n_time: int) -> np.ndarray:
    """Frame indices ``center-k .. center+k`` with replication at the sequence ends."""
    k = window // 2
    return np.clip(np.arange(center - k, center + k + 1), 0, n_time - 1)


def draw_batch(data: Sequence[tuple[np.ndarray, np.ndarray]], net_cfg: NetConfig,
               cfg: TrainConfig, step: int) -> TrainBatch:
    rng = make_rng(cfg.seed, "step", step)
    items = []
    for b in range(cfg.batch_size):
        s = int(rng.integers(len(data)))
        x, a = data[s]
        idx = window_indices(int(rng.integers(x.shape[0])), net_cfg.window, x.shape[0])
        xw, aw = x[idx], a[idx]
        sigma = sample_sigma(cfg, cfg.seed, step * cfg.batch_size + b)
        noise = rng.standard_normal(xw.shape)
        at = make_train_mask(aw, cfg, derive_seed(cfg.seed, "mask", step, b))
        items.append((xw, aw, at, sigma, noise))
    return TrainBatch.from_items(items)


def sigma_bucket(sigma: float) -> str:
    for edge, name in SIGMA_BUCKETS:
        if sigma < edge:
            return name
    return SIGMA_BUCKETS[-1][1]


@dataclass
class TrainLog:
    """Rows of ``(step, loss, sigma_bucket, seconds)``; ``seconds`` is None unless timed."""

    rows: list = None
    params_path: str | None = None

    def __post_init__(self):
        if self.rows is None:
            self.rows = []

    def losses(self, bucket: str = "all") -> np.ndarray:
        return np.array([r[1] for r in self.rows if r[2] == bucket])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["step", "loss", "sigma_bucket", "seconds"])
            for step, loss, bucket, seconds in self.rows:
                wr.writerow([step, repr(float(loss)), bucket,
                             "" if seconds is None else f"{seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rows.append((int(r["step"]), float(r["loss"]), r["sigma_bucket"],
                             float(r["seconds"]) if r["seconds"] else None))
        return cls(rows)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.n_steps <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / cfg.n_steps))


def train_arrays(data: Sequence[tuple[np.ndarray, np.ndarray]], net_cfg: NetConfig,
                 cfg: TrainConfig, norm: NormParams | None = None, dtype=torch.float32,
                 record_time: bool = False) -> tuple[LearnedScoreModel, TrainLog]:
    """Train on normalized ``(x, A)`` pairs; returns the EMA model and the log."""
    if not data:
        raise ValueError("empty dataset")
    data = [(np.asarray(x, dtype=np.float64), np.asarray(a, dtype=np.uint8)) for x, a in data]
    for x, a in data:
        if x.shape != a.shape or x.ndim != 3:
            raise ShapeError(f"field {x.shape} and mask {a.shape} must be matching (T, H, W)")
        net_cfg.check_grid(*x.shape[1:])
    model = LearnedScoreModel(net_cfg, init_params(net_cfg, cfg.seed, dtype), norm)
    model.net.train()
    params = list(model.net.parameters())
    ema = [p.detach().clone() for p in params]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    log = TrainLog()
    start = time.perf_counter()
    for step in range(cfg.n_steps):
        batch = draw_batch(data, net_cfg, cfg, step)
        for group in opt.param_groups:
            group["lr"] = _lr_at(cfg, step)
        opt.zero_grad(set_to_none=True)
        loss, item_sums, item_counts = ambient_loss(model, batch, per_item=True)
        value = float(loss.detach())
        if not math.isfinite(value):
            log.rows.append((step, value, "all", None))
            err = DivergedLoss(f"non-finite loss {value} at step {step}")
            err.log = log
            raise err
        loss.backward()
        opt.step()
        with torch.no_grad():
            for e, p in zip(ema, params):
                e.mul_(cfg.ema_decay).add_(p.detach(), alpha=1.0 - cfg.ema_decay)
        seconds = time.perf_counter() - start if record_time else None
        log.rows.append((step, value, "all", seconds))
        sums = item_sums.detach().double().numpy()
        counts = item_counts.numpy()
        buckets = [sigma_bucket(s) for s in batch.sigma]
        for _, name in SIGMA_BUCKETS:
            sel = [i for i, bk in enumerate(buckets) if bk == name]
            n = counts[sel].sum() if sel else 0
            if n:
                log.rows.append((step, float(sums[sel].sum() / n), name, seconds))
    with torch.no_grad():
        for e, p in zip(ema, params):
            p.copy_(e)
    model.net.eval()
    return model, log


def normalized_dataset(pairs: Sequence[tuple[Field, MaskField]], norm: NormParams | None = None):
    """Fit (if needed) and apply robust normalization on observed cells only."""
    if norm is None:
        norm = fit_normalizer([x for x, _ in pairs], [m for _, m in pairs])
    data = []
    for x, m in pairs:
        z = normalize(Field(x.spec, np.where(m.flags > 0, x.values, 0.0)), norm).values
        data.append((np.where(m.flags > 0, z, 0.0), m.flags))
    return data, norm


def train(manifest, net_cfg: NetConfig, cfg: TrainConfig, record_time: bool = False):
    """Train from a dataset manifest; returns ``(params, log, model)``."""
    data, norm = normalized_dataset(load_dataset(manifest))
    for x, _ in data:
        if net_cfg.window > 2 * x.shape[0] + 1:
            raise ShapeError("window is too long for the sequences")
    model, log = train_arrays(data, net_cfg, cfg, norm, record_time=record_time)
    return model.params, log, model
