"""Multiscale UNet denoiser built from NL blocks.

Parameter names::

    head.*                      3x3 conv, in_channels -> C[0]
    scale{s}.enc.*              NL block, encoder side (s < scales-1)
    scale{s}.down.*             2x2 stride-2 conv, C[s] -> C[s+1]
    scale{S-1}.bottom.*         NL block at the coarsest scale
    scale{s}.up.*               2x2 stride-2 transposed conv, C[s+1] -> C[s]
    scale{s}.dec.*              NL block, decoder side
    tail.*                      3x3 conv, C[0] -> out_channels
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .config import NetworkConfig
from .core import Tensor, add, concat, conv_transpose2d
from .core.tensor import ShapeError
from .layers import ParamSpec, ParamStore, conv, conv_specs, init_params as _init_from_specs
from .nlfemf import nl_block_forward, nl_block_specs


def param_specs(cfg: NetworkConfig) -> "OrderedDict[str, ParamSpec]":
    c = cfg.c_per_scale
    last = cfg.scales - 1
    specs = OrderedDict()
    specs.update(conv_specs("head", cfg.in_channels, c[0], 3))
    for s in range(last):
        specs.update(nl_block_specs(f"scale{s}.enc", cfg.block(s)))
        specs.update(conv_specs(f"scale{s}.down", c[s], c[s + 1], 2))
    specs.update(nl_block_specs(f"scale{last}.bottom", cfg.block(last)))
    for s in reversed(range(last)):
        specs[f"scale{s}.up.weight"] = ParamSpec((c[s + 1], c[s], 2, 2), c[s + 1])
        specs[f"scale{s}.up.bias"] = ParamSpec((c[s],), c[s + 1], "zeros")
        specs.update(nl_block_specs(f"scale{s}.dec", cfg.block(s)))
    specs.update(conv_specs("tail", c[0], cfg.out_channels, 3))
    return specs


def init_params(cfg: NetworkConfig, seed: int = 0) -> ParamStore:
    return _init_from_specs(param_specs(cfg), seed)


def count_params(cfg: NetworkConfig) -> int:
    return int(sum(np.prod(spec.shape) for spec in param_specs(cfg).values()))


def forward(noisy: Tensor, noise_map: Tensor, params: ParamStore, cfg: NetworkConfig) -> Tensor:
    """Denoise ``noisy`` given its per-pixel noise standard deviation map."""
    if noisy.ndim != 4 or noise_map.ndim != 4:
        raise ShapeError("noisy and noise_map must be B x C x H x W")
    if noisy.shape[0] != noise_map.shape[0] or noisy.shape[2:] != noise_map.shape[2:]:
        raise ShapeError(f"noisy {noisy.shape} and noise map {noise_map.shape} disagree")
    if noisy.shape[1] + noise_map.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"image ({noisy.shape[1]}) + noise map ({noise_map.shape[1]}) channels != in_channels {cfg.in_channels}")
    h, w = noisy.shape[2:]
    m = cfg.multiple
    if h % m or w % m:
        raise ShapeError(
            f"spatial size {h}x{w} not divisible by {m}; pad by ({-h % m}, {-w % m}) "
            f"or use pad_reflect_to_multiple")
    last = cfg.scales - 1
    x = conv(concat([noisy, noise_map], axis=1), params, "head", padding=1)
    skips = []
    for s in range(last):
        x = nl_block_forward(x, params, f"scale{s}.enc", cfg.block(s))
        skips.append(x)
        x = conv(x, params, f"scale{s}.down", stride=2)
    x = nl_block_forward(x, params, f"scale{last}.bottom", cfg.block(last))
    for s in reversed(range(last)):
        x = conv_transpose2d(x, params[f"scale{s}.up.weight"], params[f"scale{s}.up.bias"], stride=2)
        x = add(x, skips[s])
        x = nl_block_forward(x, params, f"scale{s}.dec", cfg.block(s))
    return conv(x, params, "tail", padding=1)


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int


def pad_reflect_to_multiple(x: np.ndarray, m: int) -> tuple[np.ndarray, CropRecord]:
    """Reflect-pad the bottom/right of a ... x H x W array up to multiples of ``m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    h, w = x.shape[-2:]
    ph, pw = -h % m, -w % m
    record = CropRecord(h, w)
    if ph == 0 and pw == 0:
        return x, record
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if h > 1 and w > 1 else "edge"
    return np.pad(x, pad, mode=mode), record


def crop(x: np.ndarray, record: CropRecord) -> np.ndarray:
    return x[..., :record.height, :record.width]


def denoise(noisy: np.ndarray, noise_map: np.ndarray, params: ParamStore, cfg: NetworkConfig) -> np.ndarray:
    """Inference on arbitrary spatial size: pad, run, crop back. Arrays are B x C x H x W."""
    xp, rec = pad_reflect_to_multiple(noisy, cfg.multiple)
    mp, _ = pad_reflect_to_multiple(noise_map, cfg.multiple)
    dt = params[params.names()[0]].dtype
    out = forward(Tensor(xp.astype(dt)), Tensor(mp.astype(dt)), params, cfg)
    return crop(out.data, rec)
