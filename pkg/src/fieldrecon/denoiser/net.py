"""Spatiotemporal U-Net used as the raw network inside the EDM-preconditioned denoiser.

Tensors are laid out as ``(batch, channels, frames, height, width)``. Each of
the ``w`` frames enters with two channels (noisy value, validity mask), so the
stem sees ``2*w`` input values per pixel grouped frame by frame. The stem's
value path is a partial convolution: its response is rescaled by the share of
valid cells under each kernel, so early features do not depend on how much of
the window is missing (a net trained on gappy windows then transfers to
complete ones). Spatial
convolutions use ``1x3x3`` kernels shared across frames; the second convolution
of every residual block is a full ``3x3x3`` kernel that also mixes neighbouring
frames. A multi-head self-attention block at the bottleneck attends jointly over
all ``w * (H/2^L) * (W/2^L)`` positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError
from ..seeding import make_rng


@dataclass(frozen=True)
class NetConfig:
    window: int = 5
    base_channels: int = 16
    n_levels: int = 2
    attn_heads: int = 2

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.n_levels < 2:
            raise ValueError("n_levels must be >= 2")
        if self.attn_heads < 1 or self.channels[-1] % self.attn_heads:
            raise ValueError(
                f"attn_heads={self.attn_heads} must divide bottleneck width {self.channels[-1]}")

    @property
    def in_channels(self) -> int:
        return 2 * self.window

    @property
    def half_window(self) -> int:
        return self.window // 2

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(self.n_levels + 1)]

    @property
    def embed_dim(self) -> int:
        return 4 * self.base_channels

    def check_grid(self, height: int, width: int) -> None:
        f = 2**self.n_levels
        if height % f or width % f:
            raise ShapeError(f"grid {height}x{width} not divisible by 2^n_levels = {f}")


def _groups(channels: int) -> int:
    return max(g for g in range(1, 9) if channels % g == 0)


class GroupNorm(nn.Module):
    """Parameter-free group normalization (at most 8 groups)."""

    def __init__(self, channels: int):
        super().__init__()
        self.groups = _groups(channels)

    def forward(self, x):
        return F.group_norm(x, self.groups, eps=1e-5)


def _spatial_conv(cin, cout, stride=1):
    return nn.Conv3d(cin, cout, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, embed_dim: int):
        super().__init__()
        self.norm1 = GroupNorm(cin)
        self.conv1 = _spatial_conv(cin, cout)
        self.emb = nn.Linear(embed_dim, cout)
        self.norm2 = GroupNorm(cout)
        self.conv2 = nn.Conv3d(cout, cout, (3, 3, 3), padding=1)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return (x if self.skip is None else self.skip(x)) + h


class SpaceTimeAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = GroupNorm(channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x):
        b, c, t, h, w = x.shape
        d = c // self.heads
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, d, t * h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bhdn,bhdm->bhnm", q, k) / math.sqrt(d), dim=-1)
        out = torch.einsum("bhnm,bhdm->bhdn", attn, v).reshape(b, c, t, h, w)
        return x + self.proj(out)


class LocalScoreNet(nn.Module):
    """Raw network ``F(x_in (+) mask, c_noise)``; output has the shape of one data channel."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        e = config.embed_dim
        self.embed_in = nn.Linear(1, e)
        self.embed_out = nn.Linear(e, e)
        self.stem = _spatial_conv(2, ch[0])
        self.enc = nn.ModuleList(ResBlock(ch[i], ch[i], e) for i in range(config.n_levels))
        self.down = nn.ModuleList(_spatial_conv(ch[i], ch[i + 1], stride=2)
                                  for i in range(config.n_levels))
        self.mid = ResBlock(ch[-1], ch[-1], e)
        self.attn = SpaceTimeAttention(ch[-1], config.attn_heads)
        self.up = nn.ModuleList(_spatial_conv(ch[i + 1], ch[i]) for i in range(config.n_levels))
        self.dec = nn.ModuleList(ResBlock(2 * ch[i], ch[i], e) for i in range(config.n_levels))
        self.out_norm = GroupNorm(ch[0])
        self.out = _spatial_conv(ch[0], 1)

    def forward(self, x, mask, c_noise):
        """``x`` and ``mask`` are ``(B, w, H, W)``; ``c_noise`` is ``(B,)``."""
        emb = F.silu(self.embed_out(F.silu(self.embed_in(c_noise[:, None]))))
        h = self._partial_stem(x, mask)
        skips = []
        for block, down in zip(self.enc, self.down):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.attn(self.mid(h, emb))
        for i in reversed(range(self.config.n_levels)):
            h = self.up[i](F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest"))
            h = self.dec[i](torch.cat([h, skips[i]], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))[:, 0]


    def _partial_stem(self, x, mask):
        w = self.stem.weight
        pad = (0, 1, 1)
        value = F.conv3d(x[:, None], w[:, :1], padding=pad)
        valid = F.conv3d(mask[:, None], torch.ones_like(w[:1, :1]), padding=pad)
        full = float(w[0, 0].numel())
        scale = torch.where(valid > 0.5, full / valid.clamp(min=1.0), torch.zeros_like(valid))
        return value * scale + F.conv3d(mask[:, None], w[:, 1:], self.stem.bias, padding=pad)


NetParams = dict  # ordered name -> tensor mapping, in ``named_parameters()`` order


def init_params(config: NetConfig, seed: int, dtype=torch.float32) -> NetParams:
    """Deterministic init: final layer zero, everything else U(+-sqrt(3/fan_in)), biases zero."""
    net = LocalScoreNet(config)
    rng = make_rng(seed, "init")
    params = {}
    for name, p in net.named_parameters():
        if name.startswith("out.") or name.endswith(".bias"):
            values = np.zeros(p.shape)
        else:
            fan_in = int(np.prod(p.shape[1:]))
            bound = math.sqrt(3.0 / fan_in)
            values = rng.uniform(-bound, bound, size=p.shape)
        params[name] = torch.tensor(values, dtype=dtype)
    return params


def build_net(config: NetConfig, params: NetParams) -> LocalScoreNet:
    net = LocalScoreNet(config)
    dtype = next(iter(params.values())).dtype
    net.to(dtype)
    net.load_state_dict(params, strict=True)
    return net


def flatten_params(params: NetParams) -> np.ndarray:
    return np.concatenate([t.detach().cpu().numpy().ravel().astype(np.float64)
                           for t in params.values()])


def unflatten_params(vector: np.ndarray, template: NetParams) -> NetParams:
    vector = np.asarray(vector)
    n = sum(t.numel() for t in template.values())
    if vector.size != n:
        raise ShapeError(f"vector has {vector.size} entries, parameters need {n}")
    out, offset = {}, 0
    for name, t in template.items():
        k = t.numel()
        out[name] = torch.tensor(vector[offset:offset + k].reshape(t.shape), dtype=t.dtype)
        offset += k
    return out


def param_count(params: NetParams) -> int:
    return sum(t.numel() for t in params.values())
