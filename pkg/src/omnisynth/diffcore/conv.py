"""2-D convolution with horizontally-circular padding.

Feature maps are (N, C, H, W). Columns wrap around (the panorama seam),
rows are zero padded; both paddings keep ``H_out = ceil(H / stride)`` for
odd kernels. Implemented as im2col + matmul so the heavy lifting stays in
BLAS.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _as_operand, _emit

__all__ = ["conv2d_circular"]


def _pad_circular_w_zero_h(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if pw:
        x = np.concatenate([x[..., -pw:], x, x[..., :pw]], axis=3)
    if ph:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0)))
    return x


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d_circular(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Convolve (N, C_in, H, W) with (C_out, C_in, kh, kw).

    Odd kernel sizes only; horizontal padding wraps, vertical padding is
    zero, so output spatial size is (H/stride, W/stride) for divisible H, W.
    """
    tx, vx = _as_operand(x)
    tw, vw = _as_operand(weight)
    tb, vb = (None, None) if bias is None else _as_operand(bias)
    if vx.ndim != 4 or vw.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {vx.shape} and {vw.shape}")
    co, ci, kh, kw = vw.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel sizes must be odd")
    if vx.shape[1] != ci:
        raise ShapeError(f"input channels {vx.shape[1]} != weight channels {ci}")
    if vb is not None and vb.shape != (co,):
        raise ShapeError(f"bias shape {vb.shape} != ({co},)")
    n, _, h, w = vx.shape
    ph, pw = kh // 2, kw // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1

    xp = _pad_circular_w_zero_h(vx, ph, pw)
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    w2 = vw.reshape(co, ci * kh * kw)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo)
    if vb is not None:
        out = out + vb[:, None, None]

    need_x = tx is not None and tx.requires_grad

    def backward(g):
        g2 = g.reshape(n, co, ho * wo)
        grads = []
        if tx is not None and not need_x:
            grads.append(None)
        if need_x:
            gcols = np.matmul(w2.T, g2).reshape(n, ci, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[:, :, i, j]
            if ph:
                gxp = gxp[:, :, ph:-ph, :]
            gx = gxp[..., pw : pw + w].copy() if pw else gxp
            if pw:
                gx[..., :pw] += gxp[..., pw + w :]
                gx[..., -pw:] += gxp[..., :pw]
            grads.append(gx)
        if tw is not None:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(co, ci, kh, kw)
            grads.append(gw)
        if tb is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = tuple(t for t in (tx, tw, tb) if t is not None)
    return _emit("conv2d_circular", out, inputs, backward)
