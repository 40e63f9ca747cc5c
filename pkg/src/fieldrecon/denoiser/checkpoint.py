"""AODP parameter checkpoints.

Layout (little-endian)::

    magic b"AODP" | version u32 = 1 | n_params u64 | n_sections u32
    n_sections x (name_len u16, name utf8, ndim u8, dims u32 * ndim)
    float32 payload, sections concatenated in flatten order
    footer_len u32 | footer utf8 (``key = value`` lines: net config, norm, sigma_data)

The footer is the last thing in the file, so its length is written before it
and read by seeking from the end of the payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np
import torch

from ..config import format_config, parse_flat
from ..errors import FormatError
from ..grid import NormParams
from .models import SIGMA_DATA, LearnedScoreModel
from .net import NetConfig, NetParams

MAGIC = b"AODP"
VERSION = 1
_HEAD = struct.Struct("<4sIQI")


def _footer(config: NetConfig, norm: NormParams | None, sigma_data: float) -> str:
    settings = {
        "window": config.window,
        "base_channels": config.base_channels,
        "n_levels": config.n_levels,
        "attn_heads": config.attn_heads,
        "sigma_data": repr(float(sigma_data)),
    }
    if norm is not None:
        settings["norm_q_lo"] = repr(float(norm.q_lo))
        settings["norm_q_hi"] = repr(float(norm.q_hi))
    return format_config(settings)


def save_checkpoint(path, config: NetConfig, params: NetParams,
                    norm: NormParams | None = None, sigma_data: float = SIGMA_DATA) -> None:
    table = bytearray()
    payload = []
    total = 0
    for name, t in params.items():
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} is not finite")
        raw = name.encode("utf-8")
        table += struct.pack("<HB", len(raw), arr.ndim) + raw
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        total += arr.size
    footer = _footer(config, norm, sigma_data).encode("utf-8")
    with open(os.fspath(path), "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, total, len(params)))
        fh.write(bytes(table))
        for chunk in payload:
            fh.write(chunk)
        fh.write(struct.pack("<I", len(footer)))
        fh.write(footer)


def load_checkpoint(path, dtype=torch.float32):
    """Return ``(config, params, norm, sigma_data)``."""
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, total, n_sections = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEAD.size
    sections = []
    try:
        for _ in range(n_sections):
            name_len, ndim = struct.unpack_from("<HB", blob, pos)
            pos += 3
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            sections.append((name, dims))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt section table") from exc
    count = sum(int(np.prod(d)) for _, d in sections)
    if count != total:
        raise FormatError(f"{path}: section table holds {count} values, header says {total}")
    end = pos + 4 * total
    if end + 4 > len(blob):
        raise FormatError(f"{path}: truncated payload")
    (footer_len,) = struct.unpack_from("<I", blob, end)
    if end + 4 + footer_len != len(blob):
        raise FormatError(f"{path}: footer length mismatch")
    flat = np.frombuffer(blob, dtype="<f4", count=total, offset=pos)
    params, off = {}, 0
    for name, dims in sections:
        k = int(np.prod(dims))
        params[name] = torch.tensor(flat[off:off + k].reshape(dims).astype(np.float64), dtype=dtype)
        off += k
    try:
        meta = parse_flat(blob[end + 4:].decode("utf-8"), str(path))
        config = NetConfig(int(meta["window"]), int(meta["base_channels"]),
                           int(meta["n_levels"]), int(meta["attn_heads"]))
        sigma_data = float(meta["sigma_data"])
        norm = None
        if "norm_q_lo" in meta:
            norm = NormParams(float(meta["norm_q_lo"]), float(meta["norm_q_hi"]))
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: bad footer ({exc})") from exc
    return config, params, norm, sigma_data


def load_model(path, dtype=torch.float32) -> LearnedScoreModel:
    config, params, norm, sigma_data = load_checkpoint(path, dtype)
    return LearnedScoreModel(config, params, norm, sigma_data)


def save_model(path, model: LearnedScoreModel) -> None:
    save_checkpoint(path, model.config, model.params, model.norm, model.sigma_data)
