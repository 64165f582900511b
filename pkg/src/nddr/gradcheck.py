"""Finite-difference validation of every differentiable op.

Each check builds a few random-shape problems in float64, reduces the op
output to a scalar with a fixed random projection (so permuted or dropped
gradient entries cannot cancel), and compares tape gradients against
central differences for every differentiable input. Inputs are kept away
from kinks: ReLU and max-pool values are spaced wider than the step, and
normalized vectors stay far from the zero-norm guard.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Optional

import numpy as np

from . import losses, ops
from .autodiff import Tensor, finite_difference_check
from .fusion import CrossStitchLayer, InitPolicy, NddrLayer, SluiceLayer, shortcut_aggregate

__all__ = ["run_suite", "CHECKS", "DEFAULT_EPS"]

DEFAULT_EPS = 1e-5


def _proj(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(0.2, 1.0, size=shape), dtype=np.float64)


def _reduce(out: Tensor, proj: Tensor) -> Tensor:
    return ops.sum_all(ops.mul(out, proj))


def _param(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _spaced(rng: np.random.Generator, shape, gap: float = 5e-3) -> np.ndarray:
    """Distinct values with pairwise gaps >> the fd step (argmax stays put)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2.0) * gap
    return vals.reshape(shape)


def _check_inputs(build: Callable[[], tuple], tensors: Iterable[str], eps: float) -> float:
    """build() returns (loss_fn, {name: tensor}); fd-check each named input."""
    loss_fn, named = build()
    worst = 0.0
    for name in tensors:
        t = named[name]
        worst = max(worst, finite_difference_check(lambda _t: loss_fn(), t, eps=eps, max_coords=400))
    return worst


def check_conv2d(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, h, w = rng.integers(1, 4), rng.integers(3, 8), rng.integers(3, 8)
        cin, f = rng.integers(1, 5), rng.integers(1, 5)
        k = int(rng.integers(1, min(4, h + 1, w + 1)))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = _param(rng, (n, h, w, cin))
        wt = _param(rng, (f, k, k, cin))
        b = _param(rng, (1, 1, 1, f))
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        proj = _proj(rng, (n, ho, wo, f))
        fn = lambda: _reduce(ops.conv2d(x, wt, b, stride=stride, pad=pad), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x, "w": wt, "b": b}), ("x", "w", "b"), eps))
    return worst


def check_conv1x1(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, h, w = rng.integers(1, 4), rng.integers(2, 7), rng.integers(2, 7)
        cin, f = rng.integers(1, 7), rng.integers(1, 7)
        x = _param(rng, (n, h, w, cin))
        wt = _param(rng, (f, 1, 1, cin))
        b = _param(rng, (1, 1, 1, f))
        proj = _proj(rng, (n, h, w, f))
        fn = lambda: _reduce(ops.conv1x1(x, wt, b), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x, "w": wt, "b": b}), ("x", "w", "b"), eps))
    return worst


def check_fully_connected(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, d, out = rng.integers(1, 6), rng.integers(1, 9), rng.integers(1, 9)
        x = _param(rng, (n, 1, 1, d))
        wt = _param(rng, (out, 1, 1, d))
        b = _param(rng, (1, 1, 1, out))
        proj = _proj(rng, (n, 1, 1, out))
        fn = lambda: _reduce(ops.fully_connected(x, wt, b), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x, "w": wt, "b": b}), ("x", "w", "b"), eps))
    return worst


def check_batch_norm(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, h, w, c = rng.integers(2, 5), rng.integers(2, 6), rng.integers(2, 6), rng.integers(1, 5)
        x = _param(rng, (n, h, w, c), lo=-2.0, hi=2.0)
        gamma = _param(rng, (1, 1, 1, c), lo=0.5, hi=1.5)
        beta = _param(rng, (1, 1, 1, c), lo=-0.5, hi=0.5)
        proj = _proj(rng, (n, h, w, c))
        fn = lambda: _reduce(ops.batch_norm_train(x, gamma, beta, eps=1e-5)[0], proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x, "g": gamma, "b": beta}), ("x", "g", "b"), eps))
    return worst


def check_max_pool(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, c = rng.integers(1, 3), rng.integers(1, 4)
        h, w = rng.integers(4, 9), rng.integers(4, 9)
        window = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        x = Tensor(_spaced(rng, (n, h, w, c)), requires_grad=True, dtype=np.float64)
        ho = (h - window) // stride + 1
        wo = (w - window) // stride + 1
        proj = _proj(rng, (n, ho, wo, c))
        fn = lambda: _reduce(ops.max_pool(x, window, stride), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x}), ("x",), eps))
    return worst


def check_bilinear_resize(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, c = rng.integers(1, 3), rng.integers(1, 4)
        h, w = rng.integers(2, 7), rng.integers(2, 7)
        oh, ow = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        x = _param(rng, (n, h, w, c))
        proj = _proj(rng, (n, oh, ow, c))
        fn = lambda: _reduce(ops.bilinear_resize(x, oh, ow), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x}), ("x",), eps))
    return worst


def check_softmax(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, h, w, c = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 7)
        x = _param(rng, (n, h, w, c), lo=-2.0, hi=2.0)
        proj = _proj(rng, (n, h, w, c))
        fn = lambda: _reduce(ops.softmax(x), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x}), ("x",), eps))
    return worst


def check_softmax_cross_entropy(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, h, w, c = rng.integers(1, 3), rng.integers(2, 5), rng.integers(2, 5), rng.integers(2, 6)
        x = _param(rng, (n, h, w, c), lo=-2.0, hi=2.0)
        labels = rng.integers(0, c, size=(n, h, w)).astype(np.int64)
        drop = rng.random(size=labels.shape) < 0.25
        labels[drop] = losses.IGNORE_LABEL
        if (labels == losses.IGNORE_LABEL).all():
            labels[0, 0, 0] = 0
        fn = lambda: losses.softmax_cross_entropy(x, labels)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x}), ("x",), eps))
    return worst


def check_normal_loss(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, h, w = rng.integers(1, 3), rng.integers(2, 5), rng.integers(2, 5)
        pred_v = rng.uniform(-1.0, 1.0, size=(n, h, w, 3))
        # keep norms well above the eps guard so fd never crosses the branch
        pred_v += 0.35 * np.sign(pred_v) + np.where(pred_v == 0, 0.35, 0.0)
        pred = Tensor(pred_v, requires_grad=True, dtype=np.float64)
        gt = rng.standard_normal((n, h, w, 3))
        gt /= np.linalg.norm(gt, axis=-1, keepdims=True)
        mask = rng.random(size=(n, h, w)) < 0.7
        if not mask.any():
            mask[0, 0, 0] = True
        fn = lambda: losses.normal_loss(pred, gt, mask)
        worst = max(worst, _check_inputs(lambda: (fn, {"p": pred}), ("p",), eps))
    return worst


def check_nddr_forward(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(2, 4))
        c = int(rng.integers(1, 4))
        n, h, w = rng.integers(2, 4), rng.integers(2, 5), rng.integers(2, 5)
        layer = NddrLayer(k, c, InitPolicy("diagonal", 0.9, 0.1), dtype=np.float64)
        feats = [_param(rng, (n, h, w, c)) for _ in range(k)]
        projs = [_proj(rng, (n, h, w, c)) for _ in range(k)]

        def fn():
            outs = layer.forward(feats, train=True)
            total = _reduce(outs[0], projs[0])
            for o, p in zip(outs[1:], projs[1:]):
                total = ops.add(total, _reduce(o, p))
            return total

        named = {f"f{i}": f for i, f in enumerate(feats)}
        named["w0"] = layer.weights[0]
        named["b0"] = layer.biases[0]
        named["gamma"] = layer.bns[0].gamma
        worst = max(worst, _check_inputs(lambda: (fn, named), tuple(named), eps))
    return worst


def check_shortcut_aggregate(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        c1, c2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cr = int(rng.integers(1, 4))
        n = int(rng.integers(1, 3))
        h2, w2 = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        lvl1 = _param(rng, (n, 2 * h2, 2 * w2, c1))
        lvl2 = _param(rng, (n, h2, w2, c2))
        wt = _param(rng, (cr, 1, 1, c1 + c2))
        b = _param(rng, (1, 1, 1, cr))
        proj = _proj(rng, (n, h2, w2, cr))
        fn = lambda: _reduce(shortcut_aggregate([lvl1, lvl2], wt, b), proj)
        named = {"l1": lvl1, "l2": lvl2, "w": wt, "b": b}
        worst = max(worst, _check_inputs(lambda: (fn, named), tuple(named), eps))
    return worst


def _check_mix(rng: np.random.Generator, trials: int, eps: float, subspaces: int) -> float:
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(2, 4))
        c = subspaces * int(rng.integers(1, 4))
        n, h, w = rng.integers(1, 3), rng.integers(2, 4), rng.integers(2, 4)
        init = InitPolicy("diagonal", 0.8, 0.15)
        layer = (
            CrossStitchLayer(k, c, init, dtype=np.float64)
            if subspaces == 1
            else SluiceLayer(k, c, init, subspaces=subspaces, dtype=np.float64)
        )
        layer.mix.data = layer.mix.data + rng.uniform(-0.05, 0.05, size=layer.mix.shape)
        feats = [_param(rng, (n, h, w, c)) for _ in range(k)]
        projs = [_proj(rng, (n, h, w, c)) for _ in range(k)]

        def fn():
            outs = layer.forward(feats, train=True)
            total = _reduce(outs[0], projs[0])
            for o, p in zip(outs[1:], projs[1:]):
                total = ops.add(total, _reduce(o, p))
            return total

        named = {f"f{i}": f for i, f in enumerate(feats)}
        named["mix"] = layer.mix
        worst = max(worst, _check_inputs(lambda: (fn, named), tuple(named), eps))
    return worst


def check_cross_stitch(rng, trials, eps):
    return _check_mix(rng, trials, eps, 1)


def check_sluice(rng, trials, eps):
    return _check_mix(rng, trials, eps, 2)


def check_matmul(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        m, k, p = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 6)
        a = _param(rng, (1, 1, m, k))
        b = _param(rng, (1, 1, k, p))
        proj = _proj(rng, (1, 1, m, p))
        fn = lambda: _reduce(ops.matmul(a, b), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"a": a, "b": b}), ("a", "b"), eps))
    return worst


def check_relu(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        shape = tuple(rng.integers(1, 5, size=4))
        vals = rng.uniform(0.05, 1.0, size=shape) * np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        x = Tensor(vals, requires_grad=True, dtype=np.float64)
        proj = _proj(rng, shape)
        fn = lambda: _reduce(ops.relu(x), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x}), ("x",), eps))
    return worst


def check_global_avg_pool(rng: np.random.Generator, trials: int, eps: float) -> float:
    worst = 0.0
    for _ in range(trials):
        n, h, w, c = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 5)
        x = _param(rng, (n, h, w, c))
        proj = _proj(rng, (n, 1, 1, c))
        fn = lambda: _reduce(ops.global_avg_pool(x), proj)
        worst = max(worst, _check_inputs(lambda: (fn, {"x": x}), ("x",), eps))
    return worst


CHECKS: "OrderedDict[str, Callable]" = OrderedDict(
    [
        ("conv2d", check_conv2d),
        ("conv1x1", check_conv1x1),
        ("fully_connected", check_fully_connected),
        ("batch_norm", check_batch_norm),
        ("max_pool", check_max_pool),
        ("bilinear_resize", check_bilinear_resize),
        ("softmax", check_softmax),
        ("softmax_cross_entropy", check_softmax_cross_entropy),
        ("normal_loss", check_normal_loss),
        ("nddr_forward", check_nddr_forward),
        ("shortcut_aggregate", check_shortcut_aggregate),
        ("cross_stitch", check_cross_stitch),
        ("sluice", check_sluice),
        ("matmul", check_matmul),
        ("relu", check_relu),
        ("global_avg_pool", check_global_avg_pool),
    ]
)


def run_suite(
    names: Optional[Iterable[str]] = None,
    trials: int = 5,
    eps: float = DEFAULT_EPS,
    seed: int = 0,
) -> "OrderedDict[str, float]":
    """Max relative gradient error per op name, float64 throughout."""
    chosen = list(CHECKS) if names is None else list(names)
    unknown = [n for n in chosen if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown gradcheck op(s): {unknown} (available: {list(CHECKS)})")
    results: "OrderedDict[str, float]" = OrderedDict()
    for name in chosen:
        # stable per-op stream: global order index, not the run order
        rng = np.random.default_rng(np.random.SeedSequence((seed, list(CHECKS).index(name))))
        results[name] = CHECKS[name](rng, trials, eps)
    return results
