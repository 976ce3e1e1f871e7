"""Convolutions and bilinear sampling on B x C x H x W tensors."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy import sparse

from .tensor import ShapeError, Tensor, make_output


def _check_conv_shapes(x: Tensor, weight: Tensor, bias: Optional[Tensor], groups: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be B x C x H x W, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be Cout x Cin/groups x kh x kw, got {weight.shape}")
    cin = x.shape[1]
    cout, cin_g = weight.shape[:2]
    if groups < 1 or cin % groups:
        raise ShapeError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cin_g * groups != cin:
        raise ShapeError(
            f"conv2d: weight in-channels per group is {cin_g}, expected {cin // groups} "
            f"(input channels {cin}, groups {groups})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")


def _tap(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _depthwise(x: Tensor, weight: Tensor, bias: Optional[Tensor], xp: np.ndarray, padding: int) -> Tensor:
    """Stride-1 depthwise conv on row-flattened padded planes.

    Tap (i, j) becomes a shift of i*Wp + j along the flattened axis; outputs are
    computed at full padded width and the wrap-around columns cropped away.
    """
    b, c, h, w = x.shape
    _, _, kh, kw = weight.shape
    hp, wp = xp.shape[2:]
    ho, wo = hp - kh + 1, wp - kw + 1
    n = ho * wp
    flat = np.zeros((b, c, hp * wp + kw), dtype=x.dtype)
    flat[:, :, :hp * wp] = xp.reshape(b, c, -1)
    wd = weight.data
    offs = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    acc = np.zeros((b, c, n), dtype=x.dtype)
    tmp = np.empty_like(acc)
    for i, j, off in offs:
        np.multiply(flat[:, :, off:off + n], wd[None, :, 0, i, j, None], out=tmp)
        acc += tmp
    out = np.ascontiguousarray(acc.reshape(b, c, ho, wp)[:, :, :, :wo])
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    def backward(g):
        gx = gw = gb = None
        gfull = np.zeros((b, c, ho, wp), dtype=g.dtype)
        gfull[:, :, :, :wo] = g
        gflat = gfull.reshape(b, c, n)
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            for i, j, off in offs:
                gw[:, 0, i, j] = np.einsum("bcn,bcn->c", gflat, flat[:, :, off:off + n])
        if x.requires_grad:
            gxf = np.zeros_like(flat)
            tmp = np.empty_like(gflat)
            for i, j, off in offs:
                np.multiply(gflat, wd[None, :, 0, i, j, None], out=tmp)
                gxf[:, :, off:off + n] += tmp
            gxp = gxf[:, :, :hp * wp].reshape(b, c, hp, wp)
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, backward, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Zero-padded, optionally grouped 2D cross-correlation.

    Computed as a sum over kernel taps of shifted input views, each contracted with
    that tap's (grouped) weight matrix. Depthwise convs use a pure elementwise path.
    """
    _check_conv_shapes(x, weight, bias, groups)
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    og = cout // groups
    depthwise = cg == 1 and og == 1
    wd = weight.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    if depthwise and stride == 1:
        return _depthwise(x, weight, bias, xp, padding)
    if depthwise:
        out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
        for i, j in taps:
            out += wd[None, :, 0, i, j, None, None] * _tap(xp, i, j, stride, ho, wo)
    else:
        # per-tap contiguous G x og x cg matrices keep matmul on BLAS
        wt = np.ascontiguousarray(wd.reshape(groups, og, cg, kh, kw).transpose(3, 4, 0, 1, 2))
        acc = np.zeros((b, groups, og, ho * wo), dtype=x.dtype)
        for i, j in taps:
            acc += np.matmul(wt[i, j], _tap(xp, i, j, stride, ho, wo).reshape(b, groups, cg, ho * wo))
        out = acc.reshape(b, cout, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gx = gw = gb = None
        need_x, need_w = x.requires_grad, weight.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        gw_ = np.zeros_like(wd) if need_w and depthwise else None
        if depthwise:
            for i, j in taps:
                if need_w:
                    gw_[:, 0, i, j] = np.einsum("bchw,bchw->c", g, _tap(xp, i, j, stride, ho, wo))
                if need_x:
                    _tap(gxp, i, j, stride, ho, wo)[...] += wd[None, :, 0, i, j, None, None] * g
        else:
            gm = np.ascontiguousarray(g).reshape(b, groups, og, ho * wo)
            wtt = np.ascontiguousarray(wt.transpose(0, 1, 2, 4, 3))
            gwt = np.zeros_like(wt) if need_w else None
            for i, j in taps:
                if need_w:
                    xs = np.ascontiguousarray(_tap(xp, i, j, stride, ho, wo)).reshape(b, groups, cg, ho * wo)
                    gwt[i, j] = np.matmul(gm, xs.transpose(0, 1, 3, 2)).sum(axis=0)
                if need_x:
                    gt = np.matmul(wtt[i, j], gm)
                    _tap(gxp, i, j, stride, ho, wo)[...] += gt.reshape(b, cin, ho, wo)
            if need_w:
                gw_ = gwt.transpose(2, 3, 4, 0, 1).reshape(wd.shape)
        if need_w:
            gw = gw_
        if need_x:
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w]) if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to the stride (non-overlapping blocks).

    ``weight`` is Cin x Cout x k x k; the result is the adjoint of ``conv2d`` with the
    same weight array and stride.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-D input and weight")
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if kh != stride or kw != stride:
        raise ShapeError(f"conv_transpose2d: kernel {kh}x{kw} must equal stride {stride}")
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: weight in-channels {wcin} != input channels {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    s = stride
    xm = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    wm = weight.data.reshape(cin, cout * s * s)
    out = (xm @ wm).reshape(b, h, w, cout, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(b, cout, h * s, w * s)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.reshape(b, cout, h, s, w, s).transpose(0, 2, 4, 1, 3, 5).reshape(b * h * w, cout * s * s)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gm @ wm.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xm.T @ gm).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, backward, "conv_transpose2d")


def _axis_weights(c: np.ndarray, n: int):
    """Clamp coordinates to [0, n-1]; return lower index, fractional weight, in-range mask."""
    inside = (c >= 0) & (c <= n - 1)
    cc = np.clip(c, 0, n - 1)
    if n == 1:
        i0 = np.zeros(c.shape, dtype=np.int64)
        return i0, np.zeros_like(cc), np.zeros(c.shape, dtype=bool), 0
    i0 = np.minimum(np.floor(cc).astype(np.int64), n - 2)
    return i0, cc - i0, inside, 1


def grid_sample_bilinear(features: Tensor, coords: Tensor) -> Tensor:
    """Sample ``features`` (B x C x H x W) at absolute pixel positions.

    ``coords`` is B x 2 x Ho x Wo holding (row, col) per output pixel. Positions are
    clamped to the image border before interpolation; the clamped region has zero
    gradient with respect to the coordinates.
    """
    if features.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
        raise ShapeError(f"grid_sample_bilinear: bad shapes {features.shape}, {coords.shape}")
    if coords.shape[0] != features.shape[0]:
        raise ShapeError("grid_sample_bilinear: batch sizes differ")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("grid_sample_bilinear: non-finite sampling coordinate")
    b, c, h, w = features.shape
    ho, wo = coords.shape[2:]
    dt = features.dtype
    y0, wy, in_y, dy = _axis_weights(coords.data[:, 0].astype(dt, copy=False), h)
    x0, wx, in_x, dx = _axis_weights(coords.data[:, 1].astype(dt, copy=False), w)
    y1, x1 = y0 + dy, x0 + dx

    n = ho * wo
    base = (np.arange(b) * (h * w))[:, None]
    idx = [(base + (yy * w + xx).reshape(b, n)).reshape(-1) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    wy_, wx_ = wy.reshape(-1), wx.reshape(-1)
    wts = [(1 - wy_) * (1 - wx_), (1 - wy_) * wx_, wy_ * (1 - wx_), wy_ * wx_]
    col = np.tile(np.arange(b * n), 4)
    # sampling matrix: (B*H*W) x (B*Ho*Wo), four taps per column
    smat = sparse.csr_matrix((np.concatenate(wts), (np.concatenate(idx), col)), shape=(b * h * w, b * n))

    fflat = features.data.transpose(1, 0, 2, 3).reshape(c, b * h * w)
    out = (smat.T @ fflat.T).T.reshape(c, b, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out, dtype=dt)

    def backward(g):
        gflat = g.transpose(1, 0, 2, 3).reshape(c, b * n)
        gf = gc = None
        if features.requires_grad:
            gf = (smat @ gflat.T).T.reshape(c, b, h, w).transpose(1, 0, 2, 3)
            gf = np.ascontiguousarray(gf, dtype=dt)
        if coords.requires_grad:
            taps = [fflat[:, i] for i in idx]  # each C x (B*Ho*Wo)
            d_wy = (taps[2] - taps[0]) * (1 - wx_) + (taps[3] - taps[1]) * wx_
            d_wx = (taps[1] - taps[0]) * (1 - wy_) + (taps[3] - taps[2]) * wy_
            gy = (gflat * d_wy).sum(axis=0) * in_y.reshape(-1) * dy
            gx = (gflat * d_wx).sum(axis=0) * in_x.reshape(-1) * dx
            gc = np.stack([gy.reshape(b, ho, wo), gx.reshape(b, ho, wo)], axis=1).astype(coords.dtype)
        return gf, gc

    return make_output(out, (features, coords), backward, "grid_sample_bilinear")
