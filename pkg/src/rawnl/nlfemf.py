"""Nonlocal feature matching and filtering block.

Each pixel gathers K neighbor features at learned (or fixed) offsets, the K-stack of
every feature channel is transformed by its own K x K map, shrunk by a learned
modulation map, mapped back, and finally aggregated to C channels by a 1x1 conv.

Neighbor stacks are laid out channel-major: slot ``c * K + k`` holds neighbor k of
feature channel c, so grouped convs with C groups see exactly one channel's K
neighbors. Offsets are interleaved as ``[dy_0, dx_0, dy_1, dx_1, ...]``.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .config import NLFeMFConfig
from .core import (
    Tensor, add, grid_sample_bilinear, leaky_relu, mul, relu, reshape, sigmoid, tanh_scaled, transpose,
)
from .core.tensor import ShapeError
from .layers import ParamSpec, ParamStore, conv, conv_specs, convnext_forward, convnext_specs

OFFSET_LAYERS = 6
MODULATION_LAYERS = 3
LEAKY_SLOPE = 0.1


def nlfemf_specs(prefix: str, cfg: NLFeMFConfig) -> "OrderedDict[str, ParamSpec]":
    c, k, h = cfg.channels, cfg.neighbors, cfg.hidden
    ck = c * k
    specs = OrderedDict()
    if cfg.matching == "learned_offsets":
        widths = [c] + [h] * (OFFSET_LAYERS - 1) + [2 * k]
        for i in range(OFFSET_LAYERS):
            last = i == OFFSET_LAYERS - 1
            specs.update(conv_specs(f"{prefix}.offset_cnn.conv{i}", widths[i], widths[i + 1], 3, zero=last))
    specs.update(conv_specs(f"{prefix}.transform", ck, ck, 1, groups=c))
    for i in range(MODULATION_LAYERS):
        specs.update(conv_specs(f"{prefix}.modulation.conv{i}", ck, ck, 3, groups=ck))
    specs.update(conv_specs(f"{prefix}.inverse", ck, ck, 1, groups=c))
    specs.update(conv_specs(f"{prefix}.aggregate", ck, c, 1))
    return specs


def nl_block_specs(prefix: str, cfg: NLFeMFConfig) -> "OrderedDict[str, ParamSpec]":
    specs = OrderedDict()
    specs.update(convnext_specs(f"{prefix}.convnext_in", cfg.channels))
    specs.update(nlfemf_specs(f"{prefix}.nlfemf", cfg))
    specs.update(convnext_specs(f"{prefix}.convnext_out", cfg.channels))
    return specs


def predict_offsets(features: Tensor, params: ParamStore, prefix: str, cfg: NLFeMFConfig) -> Tensor:
    """Six 3x3 convs with LeakyReLU(0.1) between them, then r * tanh: B x 2K x H x W in (-r, r)."""
    if features.shape[1] != cfg.channels:
        raise ShapeError(f"{prefix}: expected {cfg.channels} feature channels, got {features.shape[1]}")
    h = features
    for i in range(OFFSET_LAYERS):
        h = conv(h, params, f"{prefix}.offset_cnn.conv{i}", padding=1)
        if i < OFFSET_LAYERS - 1:
            h = leaky_relu(h, LEAKY_SLOPE)
    return tanh_scaled(h, cfg.search_radius)


def _base_grid(b: int, k: int, h: int, w: int, dtype) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    grid = np.stack([yy, xx])[:, None]  # 2 x 1 x H x W
    return np.broadcast_to(grid[None], (b, 2, k, h, w)).copy()


def gather_neighbors(features: Tensor, offsets: Tensor) -> Tensor:
    """Bilinearly sample K displaced copies of ``features`` into a channel-major C*K stack."""
    b, c, h, w = features.shape
    if offsets.ndim != 4 or offsets.shape[0] != b or offsets.shape[1] % 2 or offsets.shape[2:] != (h, w):
        raise ShapeError(f"offsets shape {offsets.shape} incompatible with features {features.shape}")
    k = offsets.shape[1] // 2
    # B x 2K x H x W -> B x 2 x K x H x W, rows then cols
    off = transpose(reshape(offsets, (b, k, 2, h, w)), (0, 2, 1, 3, 4))
    coords = add(off, Tensor(_base_grid(b, k, h, w, offsets.dtype)))
    sampled = grid_sample_bilinear(features, reshape(coords, (b, 2, k * h, w)))  # B x C x KH x W
    return reshape(sampled, (b, c * k, h, w))


def local_window_offsets(cfg: NLFeMFConfig, b: int, h: int, w: int, dtype=np.float32) -> Tensor:
    """Constant integer displacements of a rows x cols window centered at 0, row-major."""
    rows, cols = cfg.window
    dys = np.arange(rows) - (rows - 1) // 2
    dxs = np.arange(cols) - (cols - 1) // 2
    pairs = [(dy, dx) for dy in dys for dx in dxs]
    flat = np.array(pairs, dtype=dtype).reshape(-1)  # dy0, dx0, dy1, dx1, ...
    return Tensor(np.broadcast_to(flat[None, :, None, None], (b, 2 * len(pairs), h, w)).copy())


def grouped_transform(stack: Tensor, params: ParamStore, name: str, channels: int) -> Tensor:
    """1x1 conv with one K x K map (plus bias) per feature channel."""
    return conv(stack, params, name, groups=channels)


def modulation(stack: Tensor, params: ParamStore, prefix: str) -> Tensor:
    ck = stack.shape[1]
    h = stack
    for i in range(MODULATION_LAYERS):
        h = conv(h, params, f"{prefix}.modulation.conv{i}", padding=1, groups=ck)
        h = relu(h) if i < MODULATION_LAYERS - 1 else sigmoid(h)
    return h


def collaborative_filter(stack: Tensor, params: ParamStore, prefix: str, cfg: NLFeMFConfig) -> Tensor:
    """inverse(transform(stack) * modulation(stack)); the modulation reads the untransformed stack."""
    c, k = cfg.channels, cfg.neighbors
    if stack.shape[1] != c * k:
        raise ShapeError(f"{prefix}: stack has {stack.shape[1]} channels, expected C*K = {c * k}")
    coeffs = grouped_transform(stack, params, f"{prefix}.transform", c)
    shrunk = mul(coeffs, modulation(stack, params, prefix))
    return grouped_transform(shrunk, params, f"{prefix}.inverse", c)


def aggregate(stack: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return conv(stack, params, f"{prefix}.aggregate")


def nlfemf_forward(features: Tensor, params: ParamStore, prefix: str, cfg: NLFeMFConfig) -> Tensor:
    b, _, h, w = features.shape
    if cfg.matching == "local_window":
        offsets = local_window_offsets(cfg, b, h, w, features.dtype)
    else:
        offsets = predict_offsets(features, params, prefix, cfg)
    stack = gather_neighbors(features, offsets)
    return aggregate(collaborative_filter(stack, params, prefix, cfg), params, prefix)


def nl_block_forward(features: Tensor, params: ParamStore, prefix: str, cfg: NLFeMFConfig) -> Tensor:
    x = convnext_forward(features, params, f"{prefix}.convnext_in")
    x = nlfemf_forward(x, params, f"{prefix}.nlfemf", cfg)
    return convnext_forward(x, params, f"{prefix}.convnext_out")


def set_identity(params: ParamStore, prefix: str, cfg: NLFeMFConfig, saturation: float = 20.0) -> None:
    """Hand-set an NLFeMF block to the identity map (given zero offsets).

    Identity grouped transforms, modulation biased to ~1, and per-channel neighbor averaging.
    """
    c, k = cfg.channels, cfg.neighbors
    ck = c * k
    eye = np.tile(np.eye(k, dtype=np.float32), (c, 1)).reshape(ck, k, 1, 1)
    for name in ("transform", "inverse"):
        params.set(f"{prefix}.{name}.weight", eye)
        params.set(f"{prefix}.{name}.bias", np.zeros(ck))
    for i in range(MODULATION_LAYERS):
        params.set(f"{prefix}.modulation.conv{i}.weight", np.zeros((ck, 1, 3, 3)))
        params.set(f"{prefix}.modulation.conv{i}.bias", np.full(ck, saturation if i == MODULATION_LAYERS - 1 else 0.0))
    avg = np.zeros((c, ck, 1, 1), dtype=np.float32)
    for ch in range(c):
        avg[ch, ch * k:(ch + 1) * k] = 1.0 / k
    params.set(f"{prefix}.aggregate.weight", avg)
    params.set(f"{prefix}.aggregate.bias", np.zeros(c))
    if cfg.matching == "learned_offsets":
        last = f"{prefix}.offset_cnn.conv{OFFSET_LAYERS - 1}"
        params.set(f"{last}.weight", np.zeros(params[f"{last}.weight"].shape))
        params.set(f"{last}.bias", np.zeros(2 * k))
