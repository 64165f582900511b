"""Differentiable primitives over 4-D NHWC tensors.

Every op validates shapes, computes the forward value with numpy, and
registers a backward closure via :func:`nddr.autodiff.emit`. Backward
closures add into ``input.grad`` (never overwrite), so fan-out sums
gradients naturally. Convolutions lower to a patch-matrix GEMM; the
backward pass scatters patch gradients with a small loop over filter
positions.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, ShapeError, accumulate_grad as _acc, emit as _emit

__all__ = [
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "matmul",
    "relu",
    "conv2d",
    "conv1x1",
    "fully_connected",
    "batch_norm_train",
    "batch_norm_eval",
    "max_pool",
    "bilinear_resize",
    "nearest_resize",
    "global_avg_pool",
    "softmax",
    "concat_channels",
]


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _same_dtype(name: str, *tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        _require(t.dtype == dt, f"{name}: mixed dtypes {dt} and {t.dtype}")


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    _require(a.shape == b.shape, f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    _same_dtype("add", a, b)

    def bwd(g: np.ndarray) -> None:
        _acc(a, g)
        _acc(b, g)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    _same_dtype("sub", a, b)

    def bwd(g: np.ndarray) -> None:
        _acc(a, g)
        _acc(b, -g, own=True)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    _same_dtype("mul", a, b)

    def bwd(g: np.ndarray) -> None:
        _acc(a, g * b.data, own=True)
        _acc(b, g * a.data, own=True)

    return _emit("mul", a.data * b.data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g: np.ndarray) -> None:
        _acc(x, g * np.asarray(c, dtype=g.dtype), own=True)

    return _emit("scale", x.data * np.asarray(c, dtype=x.dtype), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)

    def bwd(g: np.ndarray) -> None:
        _acc(x, np.broadcast_to(g, x.shape))

    return _emit("sum_all", out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    inv = np.asarray(1.0 / x.numel(), dtype=x.dtype)
    out = (x.data.sum(dtype=x.dtype) * inv).reshape(1, 1, 1, 1)

    def bwd(g: np.ndarray) -> None:
        _acc(x, np.broadcast_to(g * inv, x.shape))

    return _emit("mean_all", out, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(1,1,M,K) @ (1,1,K,P) -> (1,1,M,P)."""
    _require(
        a.shape[:2] == (1, 1) and b.shape[:2] == (1, 1),
        f"matmul: expects (1,1,M,K) and (1,1,K,P), got {a.shape} and {b.shape}",
    )
    _require(a.shape[3] == b.shape[2], f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    _same_dtype("matmul", a, b)
    am, bm = a.data[0, 0], b.data[0, 0]
    out = (am @ bm)[None, None]

    def bwd(g: np.ndarray) -> None:
        gm = g[0, 0]
        _acc(a, (gm @ bm.T)[None, None], own=True)
        _acc(b, (am.T @ gm)[None, None], own=True)

    return _emit("matmul", out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g: np.ndarray) -> None:
        _acc(x, g * (x.data > 0), own=True)

    return _emit("relu", out, (x,), bwd)


def _gather_patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N,Hp,Wp,C) -> (N,Ho,Wo,kh,kw,C) patch matrix (contiguous copy)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N, Ho*, Wo*, C, kh, kw)
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _scatter_patches(dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of _gather_patches: sum overlapping patch gradients."""
    n, ho, wo = dcols.shape[:3]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Correlate x (N,H,W,Cin) with filterbank w (F,kh,kw,Cin) -> (N,Ho,Wo,F)."""
    n, h, wd, cin = x.shape
    f, kh, kw, wc = w.shape
    _require(cin == wc, f"conv2d: input has {cin} channels, filters expect {wc}")
    _require(stride >= 1 and pad >= 0, f"conv2d: bad stride/pad ({stride}, {pad})")
    hp, wp = h + 2 * pad, wd + 2 * pad
    _require(kh <= hp and kw <= wp, f"conv2d: kernel ({kh},{kw}) exceeds padded input ({hp},{wp})")
    if b is not None:
        _require(b.shape == (1, 1, 1, f), f"conv2d: bias shape {b.shape}, want (1,1,1,{f})")
        _same_dtype("conv2d", x, w, b)
    else:
        _same_dtype("conv2d", x, w)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols6 = _gather_patches(xp, kh, kw, stride)  # (N,Ho,Wo,kh,kw,Cin)
    ho, wo = cols6.shape[1], cols6.shape[2]
    cols = cols6.reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(f, kh * kw * cin)
    out2 = cols @ wmat.T
    if b is not None:
        out2 += b.data.reshape(1, f)
    out = out2.reshape(n, ho, wo, f)

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(n * ho * wo, f)
        if w._grad_wanted:
            _acc(w, (g2.T @ cols).reshape(w.shape), own=True)
        if b is not None:
            _acc(b, g2.sum(axis=0).reshape(1, 1, 1, f), own=True)
        if x._grad_wanted:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, cin)
            dxp = _scatter_patches(dcols, xp.shape, kh, kw, stride)
            dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
            _acc(x, dx, own=not pad)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, bwd)


def conv1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Pointwise projection: x (N,H,W,Cin) with w (F,1,1,Cin) -> (N,H,W,F)."""
    n, h, wd, cin = x.shape
    f, kh, kw, wc = w.shape
    _require(kh == 1 and kw == 1, f"conv1x1: filterbank must be (F,1,1,Cin), got {w.shape}")
    _require(cin == wc, f"conv1x1: input has {cin} channels, filters expect {wc}")
    if b is not None:
        _require(b.shape == (1, 1, 1, f), f"conv1x1: bias shape {b.shape}, want (1,1,1,{f})")
        _same_dtype("conv1x1", x, w, b)
    else:
        _same_dtype("conv1x1", x, w)

    x2 = x.data.reshape(n * h * wd, cin)
    w2 = w.data.reshape(f, cin)
    out2 = x2 @ w2.T
    if b is not None:
        out2 += b.data.reshape(1, f)

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(n * h * wd, f)
        if w._grad_wanted:
            _acc(w, (g2.T @ x2).reshape(w.shape), own=True)
        if b is not None:
            _acc(b, g2.sum(axis=0).reshape(1, 1, 1, f), own=True)
        if x._grad_wanted:
            _acc(x, (g2 @ w2).reshape(x.shape), own=True)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv1x1", out2.reshape(n, h, wd, f), inputs, bwd)


def fully_connected(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dense layer on collapsed spatial dims: x (N,1,1,D), w (Out,1,1,D)."""
    _require(x.shape[1] == 1 and x.shape[2] == 1, f"fully_connected: x must be (N,1,1,D), got {x.shape}")
    return conv1x1(x, w, b)


def batch_norm_train(
    x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = 1e-5
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize by batch statistics over (N,H,W) per channel.

    Returns (out, batch_mean, batch_var) with the biased variance, so the
    caller can fold the statistics into its running estimates.
    """
    n, h, wd, c = x.shape
    m = n * h * wd
    _require(m >= 2, f"batch_norm_train: needs N*H*W >= 2, got {m}")
    affine = gamma is not None
    if affine:
        assert beta is not None
        _require(gamma.shape == (1, 1, 1, c), f"batch_norm_train: gamma shape {gamma.shape}, want (1,1,1,{c})")
        _require(beta.shape == (1, 1, 1, c), f"batch_norm_train: beta shape {beta.shape}, want (1,1,1,{c})")
        _same_dtype("batch_norm_train", x, gamma, beta)

    mean = x.data.mean(axis=(0, 1, 2))
    xc = x.data - mean
    var = np.mean(xc * xc, axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data if affine else xhat

    def bwd(g: np.ndarray) -> None:
        if affine:
            _acc(gamma, (g * xhat).sum(axis=(0, 1, 2)).reshape(1, 1, 1, c), own=True)
            _acc(beta, g.sum(axis=(0, 1, 2)).reshape(1, 1, 1, c), own=True)
        if x._grad_wanted:
            dxhat = g * gamma.data if affine else g
            s1 = dxhat.sum(axis=(0, 1, 2))
            s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
            _acc(x, (inv / m) * (m * dxhat - s1 - xhat * s2), own=True)

    inputs = (x, gamma, beta) if affine else (x,)
    return _emit("batch_norm_train", out, inputs, bwd), mean, var


def batch_norm_eval(
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize by frozen statistics; still differentiable in x, gamma, beta."""
    n, h, wd, c = x.shape
    _require(running_mean.shape == (c,) and running_var.shape == (c,),
             f"batch_norm_eval: stats must be ({c},), got {running_mean.shape}/{running_var.shape}")
    affine = gamma is not None
    if affine:
        assert beta is not None
        _same_dtype("batch_norm_eval", x, gamma, beta)

    inv = 1.0 / np.sqrt(running_var + np.asarray(eps, dtype=x.dtype))
    xs = (x.data - running_mean) * inv
    out = xs * gamma.data + beta.data if affine else xs

    def bwd(g: np.ndarray) -> None:
        if affine:
            _acc(gamma, (g * xs).sum(axis=(0, 1, 2)).reshape(1, 1, 1, c), own=True)
            _acc(beta, g.sum(axis=(0, 1, 2)).reshape(1, 1, 1, c), own=True)
        if x._grad_wanted:
            dx = g * (gamma.data * inv) if affine else g * inv
            _acc(x, dx, own=True)

    inputs = (x, gamma, beta) if affine else (x,)
    return _emit("batch_norm_eval", out, inputs, bwd)


def max_pool(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over window x window patches; ties break to the first in row-major order."""
    if stride is None:
        stride = window
    n, h, wd, c = x.shape
    _require(window >= 1 and stride >= 1, f"max_pool: bad window/stride ({window}, {stride})")
    _require(window <= h and window <= wd, f"max_pool: window {window} exceeds input ({h},{wd})")

    win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    flat = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, window * window, c)
    am = flat.argmax(axis=3)  # first max wins: row-major within the window
    out = np.take_along_axis(flat, am[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(g: np.ndarray) -> None:
        rows = am // window + (np.arange(ho) * stride)[None, :, None, None]
        cols = am % window + (np.arange(wo) * stride)[None, None, :, None]
        dx = np.zeros_like(x.data)
        np.add.at(
            dx,
            (np.arange(n)[:, None, None, None], rows, cols, np.arange(c)[None, None, None, :]),
            g,
        )
        _acc(x, dx, own=True)

    return _emit("max_pool", np.ascontiguousarray(out), (x,), bwd)


def _interp_matrix(n_in: int, n_out: int, dtype, nearest: bool = False) -> np.ndarray:
    """Row-stochastic (n_out, n_in) 1-D resampling matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    if nearest:
        idx = np.clip(np.floor(src + 0.5), 0, n_in - 1).astype(np.intp)
        m[np.arange(n_out), idx] = 1.0
        return m
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = (src - i0).astype(dtype)
    np.add.at(m, (np.arange(n_out), i0), (1.0 - w1).astype(dtype))
    np.add.at(m, (np.arange(n_out), i1), w1)
    return m


def _resize(x: Tensor, out_h: int, out_w: int, nearest: bool, name: str) -> Tensor:
    n, h, wd, c = x.shape
    _require(out_h >= 1 and out_w >= 1, f"{name}: bad output size ({out_h}, {out_w})")
    ry = _interp_matrix(h, out_h, x.dtype, nearest)
    rx = _interp_matrix(wd, out_w, x.dtype, nearest)
    t = np.einsum("oh,nhwc->nowc", ry, x.data)
    out = np.einsum("pw,nowc->nopc", rx, t)

    def bwd(g: np.ndarray) -> None:
        dt = np.einsum("pw,nopc->nowc", rx, g)
        _acc(x, np.einsum("oh,nowc->nhwc", ry, dt), own=True)

    return _emit(name, out, (x,), bwd)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling with half-pixel (align_corners=False) mapping."""
    return _resize(x, out_h, out_w, nearest=False, name="bilinear_resize")


def nearest_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return _resize(x, out_h, out_w, nearest=True, name="nearest_resize")


def global_avg_pool(x: Tensor) -> Tensor:
    n, h, wd, c = x.shape
    out = x.data.mean(axis=(1, 2), keepdims=True)
    inv = np.asarray(1.0 / (h * wd), dtype=x.dtype)

    def bwd(g: np.ndarray) -> None:
        _acc(x, np.broadcast_to(g * inv, x.shape))

    return _emit("global_avg_pool", out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis, shifted by the row max for stability."""
    z = x.data - x.data.max(axis=3, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=3, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        inner = (g * p).sum(axis=3, keepdims=True)
        _acc(x, p * (g - inner), own=True)

    return _emit("softmax", p, (x,), bwd)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    _require(len(tensors) >= 1, "concat_channels: needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        _require(t.shape[:3] == first.shape[:3],
                 f"concat_channels: N/H/W mismatch {t.shape} vs {first.shape}")
    _same_dtype("concat_channels", *tensors)
    sizes = [t.shape[3] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=3)
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _acc(t, g[:, :, :, lo:hi])

    return _emit("concat_channels", out, tuple(tensors), bwd)
