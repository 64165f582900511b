"""Task losses: masked softmax cross-entropy and masked unit-normal distance.

Both are fused graph ops returning a scalar tensor. Means run over the
non-ignored (or masked-in) elements only; an empty mask yields loss 0 with
zero gradient rather than a NaN.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tensor, ShapeError, accumulate_grad as _acc, emit as _emit

__all__ = ["softmax_cross_entropy", "normal_loss", "IGNORE_LABEL", "NORMAL_EPS"]

IGNORE_LABEL = 255
NORMAL_EPS = 1e-8


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: (N,H,W,Cls); labels: integer array shaped (N,H,W) (or (N,) for
    (N,1,1,Cls) logits). Positions equal to ignore_label contribute neither
    loss nor gradient. Log-probabilities use the shifted log-sum-exp form.
    """
    n, h, w, ncls = logits.shape
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"softmax_cross_entropy: labels must be integers, got {labels.dtype}")
    if labels.shape == (n,) and h == 1 and w == 1:
        labels = labels.reshape(n, 1, 1)
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= ncls))
    if bad.any():
        raise ShapeError(
            f"softmax_cross_entropy: labels outside [0,{ncls}) at {int(bad.sum())} positions"
        )
    count = int(valid.sum())
    dtype = logits.dtype
    if count == 0:
        def bwd_empty(g: np.ndarray) -> None:
            _acc(logits, np.zeros_like(logits.data))
        return _emit("softmax_cross_entropy", np.zeros((1, 1, 1, 1), dtype=dtype), (logits,), bwd_empty)

    z = logits.data - logits.data.max(axis=3, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=3))
    safe = np.where(valid, labels, 0)
    z_at = np.take_along_axis(z, safe[:, :, :, None], axis=3)[:, :, :, 0]
    nll = np.where(valid, lse - z_at, 0.0)
    loss = np.asarray(nll.sum() / count, dtype=dtype).reshape(1, 1, 1, 1)

    def bwd(g: np.ndarray) -> None:
        p = np.exp(z - np.log(np.exp(z).sum(axis=3, keepdims=True)))
        np.put_along_axis(p, safe[:, :, :, None], np.take_along_axis(p, safe[:, :, :, None], axis=3) - 1.0, axis=3)
        p *= valid[:, :, :, None]
        p *= g.reshape(()) / count
        _acc(logits, p.astype(dtype, copy=False), own=True)

    return _emit("softmax_cross_entropy", loss, (logits,), bwd)


def normal_loss(pred: Tensor, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared distance between l2-normalized predictions and unit targets.

    pred: (N,H,W,3); gt: (N,H,W,3) unit vectors; mask: (N,H,W) truthy where
    supervised (None means everywhere). Per pixel the loss is
    ||p_hat - g||^2 = 2 - 2 cos(p_hat, g); predictions are normalized with
    an eps floor on the norm so zero vectors stay finite.
    """
    n, h, w, c = pred.shape
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"normal_loss: gt shape {gt.shape} does not match pred {pred.shape}")
    if mask is None:
        m = np.ones((n, h, w), dtype=bool)
    else:
        m = np.asarray(mask)
        if m.shape != (n, h, w):
            raise ShapeError(f"normal_loss: mask shape {m.shape}, want {(n, h, w)}")
        m = m.astype(bool)
    count = int(m.sum())
    dtype = pred.dtype
    if count == 0:
        def bwd_empty(g: np.ndarray) -> None:
            _acc(pred, np.zeros_like(pred.data))
        return _emit("normal_loss", np.zeros((1, 1, 1, 1), dtype=dtype), (pred,), bwd_empty)

    eps = np.asarray(NORMAL_EPS, dtype=dtype)
    norm = np.sqrt((pred.data * pred.data).sum(axis=3, keepdims=True))
    denom = np.maximum(norm, eps)
    phat = pred.data / denom
    cos = (phat * gt).sum(axis=3)
    per_px = 2.0 - 2.0 * cos
    loss = np.asarray(per_px[m].sum() / count, dtype=dtype).reshape(1, 1, 1, 1)

    def bwd(g: np.ndarray) -> None:
        # d(-2 cos)/d pred: through p_hat = pred/denom. Where the norm is
        # above eps, denom varies with pred; below, it is a constant floor.
        live = (norm > eps).astype(dtype)
        grad_dir = (gt - phat * cos[:, :, :, None] * live) / denom
        dpred = (-2.0 * g.reshape(()) / count) * grad_dir
        dpred *= m[:, :, :, None]
        _acc(pred, dpred.astype(dtype, copy=False), own=True)

    return _emit("normal_loss", loss, (pred,), bwd)
