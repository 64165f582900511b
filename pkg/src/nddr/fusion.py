"""Feature fusion layers that tie multiple task branches together.

The main layer concatenates the K task feature maps along channels and
projects back to C channels per task with learned 1x1 convolutions, so
each task draws on every branch's features. With a diagonal filterbank
initialization (alpha on the own-task block, beta elsewhere) the layer
starts as a weighted blend; at (1, 0) the whole network computes exactly
the K independent single-task networks.

Scalar mixing baselines are the constrained special cases of that layer:
a KxK matrix blending whole feature maps, and its block variant that
splits channels into S subspaces mixed by a (K*S)x(K*S) matrix. Both can
be exported to equivalent 1x1 filterbanks for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import Tensor, ShapeError, accumulate_grad as _acc, emit as _emit
from .layers import BatchNorm, he_uniform, xavier_uniform

__all__ = [
    "InitPolicy",
    "diagonal_filterbanks",
    "xavier_filterbanks",
    "NddrLayer",
    "CrossStitchLayer",
    "SluiceLayer",
    "constrained_filterbanks",
    "as_constrained_nddr",
    "shortcut_aggregate",
    "ShortcutReduce",
    "FusionParamCount",
    "count_fusion_params",
]


@dataclass(frozen=True)
class InitPolicy:
    """How fusion weights start: 'diagonal' with (alpha, beta), or 'xavier'."""

    kind: str = "diagonal"
    alpha: float = 0.9
    beta: float = 0.1

    def __post_init__(self):
        if self.kind not in ("diagonal", "xavier"):
            raise ValueError(f"unknown fusion init kind '{self.kind}'")

    @staticmethod
    def parse(text: str) -> "InitPolicy":
        """Parse CLI syntax: 'xavier' or 'diag:ALPHA,BETA'."""
        text = text.strip()
        if text == "xavier":
            return InitPolicy("xavier")
        if text.startswith("diag:"):
            parts = text[len("diag:"):].split(",")
            if len(parts) != 2:
                raise ValueError(f"diagonal init needs 'diag:ALPHA,BETA', got '{text}'")
            try:
                return InitPolicy("diagonal", float(parts[0]), float(parts[1]))
            except ValueError as exc:
                raise ValueError(f"bad diagonal init values in '{text}'") from exc
        raise ValueError(f"unknown init '{text}' (expected 'xavier' or 'diag:ALPHA,BETA')")

    def describe(self) -> str:
        if self.kind == "xavier":
            return "xavier"
        return f"diag:{self.alpha:g},{self.beta:g}"


def diagonal_filterbanks(tasks: int, channels: int, alpha: float, beta: float, dtype=np.float32) -> list[np.ndarray]:
    """Per-task (C,1,1,K*C) filterbanks: alpha on the own-task diagonal block,
    beta on the other tasks' diagonal blocks, zero elsewhere."""
    banks = []
    eye = np.eye(channels, dtype=dtype)
    for i in range(tasks):
        blocks = [(alpha if j == i else beta) * eye for j in range(tasks)]
        w = np.concatenate(blocks, axis=1).astype(dtype)  # (C, K*C)
        banks.append(w.reshape(channels, 1, 1, tasks * channels))
    return banks


def xavier_filterbanks(tasks: int, channels: int, rng: np.random.Generator, dtype=np.float32) -> list[np.ndarray]:
    """Per-task uniform Xavier draws with fan_in=K*C, fan_out=C."""
    kc = tasks * channels
    return [xavier_uniform(rng, (channels, 1, 1, kc), kc, channels, dtype) for _ in range(tasks)]


def _init_mix_matrix(tasks: int, subspaces: int, init: InitPolicy, rng: np.random.Generator, dtype) -> np.ndarray:
    ks = tasks * subspaces
    if init.kind == "xavier":
        return xavier_uniform(rng, (1, 1, ks, ks), ks, ks, dtype)
    m = np.full((ks, ks), init.beta, dtype=dtype)
    np.fill_diagonal(m, init.alpha)
    return m.reshape(1, 1, ks, ks)


def _check_branch_features(features: Sequence[Tensor], tasks: int, channels: int) -> None:
    if len(features) != tasks:
        raise ShapeError(f"fusion layer built for {tasks} tasks, got {len(features)} feature maps")
    first = features[0].shape
    for t in features:
        if t.shape != first:
            raise ShapeError(f"branch feature shapes differ: {t.shape} vs {first}")
    if first[3] != channels:
        raise ShapeError(f"fusion layer built for {channels} channels, got {first[3]}")


class NddrLayer:
    """Concat-then-project fusion over K same-shape branch feature maps.

    Forward: concatenate along channels to (N,H,W,K*C), batch-normalize the
    stack (shared by default, per-branch with per_task_bn), then apply one
    (C,1,1,K*C) 1x1 filterbank per task. bn_mode 'identity' keeps the norm
    layer a bit-exact pass-through; 'off' drops it.
    """

    def __init__(
        self,
        tasks: int,
        channels: int,
        init: InitPolicy,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        bn_mode: str = "batch",
        bn_affine: bool = True,
        per_task_bn: bool = False,
        bias: bool = True,
    ):
        if tasks < 2:
            raise ValueError(f"fusion needs at least 2 tasks, got {tasks}")
        if bn_mode not in ("batch", "identity", "off"):
            raise ValueError(f"unknown bn_mode '{bn_mode}'")
        self.tasks = tasks
        self.channels = channels
        self.bn_mode = bn_mode
        self.per_task_bn = per_task_bn
        if init.kind == "xavier":
            rng = rng if rng is not None else np.random.default_rng(0)
            banks = xavier_filterbanks(tasks, channels, rng, dtype)
        else:
            banks = diagonal_filterbanks(tasks, channels, init.alpha, init.beta, dtype)
        self.weights = [Tensor(b, requires_grad=True) for b in banks]
        self.biases = (
            [Tensor(np.zeros((1, 1, 1, channels), dtype=dtype), requires_grad=True) for _ in range(tasks)]
            if bias
            else [None] * tasks
        )
        self.bns: list[BatchNorm] = []
        if bn_mode != "off":
            if per_task_bn:
                self.bns = [BatchNorm(channels, affine=bn_affine, dtype=dtype) for _ in range(tasks)]
            else:
                self.bns = [BatchNorm(tasks * channels, affine=bn_affine, dtype=dtype)]

    def forward(self, features: Sequence[Tensor], train: bool) -> list[Tensor]:
        _check_branch_features(features, self.tasks, self.channels)
        identity = self.bn_mode == "identity"
        if self.bn_mode == "off":
            fused = ops.concat_channels(features)
        elif self.per_task_bn:
            normed = [bn.forward(f, train, identity=identity) for bn, f in zip(self.bns, features)]
            fused = ops.concat_channels(normed)
        else:
            fused = self.bns[0].forward(ops.concat_channels(features), train, identity=identity)
        return [ops.conv1x1(fused, w, b) for w, b in zip(self.weights, self.biases)]

    def params(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"task{i}/weight", w, True))
            if b is not None:
                out.append((f"task{i}/bias", b, False))
        for tag, bn in self._named_bns():
            out.extend((f"{tag}/{suffix}", t, decay) for suffix, t, decay in bn.params())
        return out

    def buffers(self):
        out = []
        for tag, bn in self._named_bns():
            out.extend((f"{tag}/{suffix}", arr) for suffix, arr in bn.buffers())
        return out

    def _named_bns(self):
        if not self.bns:
            return []
        if self.per_task_bn:
            return [(f"bn{i}", bn) for i, bn in enumerate(self.bns)]
        return [("bn", self.bns[0])]


def _mix_single_task(features: Sequence[Tensor], mix: Tensor, task: int, subspaces: int) -> Tensor:
    """out_task = sum over (branch j, subspace t) of mix coefficient * slice.

    One tape node per task output. The S=1 case is plain whole-map blending;
    both scalar fusion layers route through here so they share rounding
    behavior exactly.
    """
    k = len(features)
    c = features[0].shape[3]
    s = subspaces
    cs = c // s
    m = mix.data[0, 0]
    chunks = []
    for so in range(s):
        acc = None
        for j in range(k):
            fj = features[j].data
            for t in range(s):
                term = m[task * s + so, j * s + t] * fj[:, :, :, t * cs : (t + 1) * cs]
                acc = term if acc is None else acc + term
        chunks.append(acc)
    out = chunks[0] if s == 1 else np.concatenate(chunks, axis=3)

    def bwd(g: np.ndarray) -> None:
        if mix._grad_wanted:
            dm = np.zeros_like(mix.data)
            for so in range(s):
                gs = g[:, :, :, so * cs : (so + 1) * cs]
                for j in range(k):
                    fj = features[j].data
                    for t in range(s):
                        dm[0, 0, task * s + so, j * s + t] = np.sum(gs * fj[:, :, :, t * cs : (t + 1) * cs])
            _acc(mix, dm, own=True)
        for j in range(k):
            if not features[j]._grad_wanted:
                continue
            df = np.zeros_like(features[j].data)
            for t in range(s):
                for so in range(s):
                    df[:, :, :, t * cs : (t + 1) * cs] += m[task * s + so, j * s + t] * g[:, :, :, so * cs : (so + 1) * cs]
            _acc(features[j], df, own=True)

    return _emit("mix_features", out, tuple(features) + (mix,), bwd)


class CrossStitchLayer:
    """Blend whole feature maps with a learned KxK matrix (row i weights task i's mix)."""

    def __init__(
        self,
        tasks: int,
        channels: int,
        init: InitPolicy,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if tasks < 2:
            raise ValueError(f"fusion needs at least 2 tasks, got {tasks}")
        self.tasks = tasks
        self.channels = channels
        self.subspaces = 1
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mix = Tensor(_init_mix_matrix(tasks, 1, init, rng, dtype), requires_grad=True)

    def forward(self, features: Sequence[Tensor], train: bool) -> list[Tensor]:
        _check_branch_features(features, self.tasks, self.channels)
        return [_mix_single_task(features, self.mix, i, 1) for i in range(self.tasks)]

    def params(self):
        return [("mix", self.mix, False)]

    def buffers(self):
        return []


class SluiceLayer:
    """Blend S channel subspaces per task with a learned (K*S)x(K*S) matrix.

    S=1 degenerates to the whole-map KxK blend (same code path, same floats).
    """

    def __init__(
        self,
        tasks: int,
        channels: int,
        init: InitPolicy,
        subspaces: int = 2,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if tasks < 2:
            raise ValueError(f"fusion needs at least 2 tasks, got {tasks}")
        if subspaces < 1 or channels % subspaces != 0:
            raise ValueError(f"channels {channels} not divisible into {subspaces} subspaces")
        self.tasks = tasks
        self.channels = channels
        self.subspaces = subspaces
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mix = Tensor(_init_mix_matrix(tasks, subspaces, init, rng, dtype), requires_grad=True)

    def forward(self, features: Sequence[Tensor], train: bool) -> list[Tensor]:
        _check_branch_features(features, self.tasks, self.channels)
        return [_mix_single_task(features, self.mix, i, self.subspaces) for i in range(self.tasks)]

    def params(self):
        return [("mix", self.mix, False)]

    def buffers(self):
        return []


def constrained_filterbanks(mix: np.ndarray, tasks: int, subspaces: int, channels: int, dtype=np.float64) -> list[np.ndarray]:
    """Expand a (K*S)x(K*S) scalar mixing matrix into equivalent 1x1 filterbanks.

    Entry (i*S+s, j*S+t) lands on W_i[s*Cs+u, j*C + t*Cs + u] for every
    within-subspace offset u, i.e. scalar * identity blocks.
    """
    cs = channels // subspaces
    banks = []
    for i in range(tasks):
        w = np.zeros((channels, tasks * channels), dtype=dtype)
        for s in range(subspaces):
            for j in range(tasks):
                for t in range(subspaces):
                    coef = mix[i * subspaces + s, j * subspaces + t]
                    for u in range(cs):
                        w[s * cs + u, j * channels + t * cs + u] = coef
        banks.append(w.reshape(channels, 1, 1, tasks * channels))
    return banks


def as_constrained_nddr(layer, dtype=None) -> NddrLayer:
    """Build an NddrLayer (no norm, no bias) computing the same map as a
    scalar mixing layer, for equivalence checks."""
    dtype = dtype if dtype is not None else layer.mix.dtype
    nddr = NddrLayer(
        layer.tasks,
        layer.channels,
        InitPolicy("diagonal", 1.0, 0.0),
        dtype=dtype,
        bn_mode="off",
        bias=False,
    )
    banks = constrained_filterbanks(layer.mix.data[0, 0], layer.tasks, layer.subspaces, layer.channels, dtype)
    for w, bank in zip(nddr.weights, banks):
        w.data = bank.astype(dtype)
    return nddr


def shortcut_aggregate(level_outputs: Sequence[Tensor], reduce_weight: Tensor, reduce_bias: Optional[Tensor] = None) -> Tensor:
    """Resize every level's map to the last level's spatial size, concat
    along channels, and reduce with a 1x1 conv."""
    if len(level_outputs) < 1:
        raise ShapeError("shortcut_aggregate: needs at least one level")
    th, tw = level_outputs[-1].shape[1:3]
    resized = [
        t if t.shape[1:3] == (th, tw) else ops.bilinear_resize(t, th, tw)
        for t in level_outputs
    ]
    return ops.conv1x1(ops.concat_channels(resized), reduce_weight, reduce_bias)


class ShortcutReduce:
    """Per-task 1x1 reduction over the multi-level concat."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float32):
        w = he_uniform(rng, (out_channels, 1, 1, in_channels), in_channels, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, 1, 1, out_channels), dtype=dtype), requires_grad=True)

    def forward(self, level_outputs: Sequence[Tensor]) -> Tensor:
        return shortcut_aggregate(level_outputs, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight, True), ("bias", self.bias, False)]

    def buffers(self):
        return []


@dataclass(frozen=True)
class FusionParamCount:
    """Parameter ledger for concat-project fusion at each listed stage width."""

    tasks: int
    channels: tuple[int, ...]
    per_task: int            # 1x1 projection weights only: sum of K*C*C
    per_task_with_bias: int  # + C bias per stage
    total: int
    total_with_bias: int
    bn_affine: int           # gamma+beta on the K*C concat per stage

    def stage_rows(self) -> list[tuple[int, int, int]]:
        """(stage channels, per-task weights, per-task with bias) rows."""
        return [
            (c, self.tasks * c * c, self.tasks * c * c + c)
            for c in self.channels
        ]


def count_fusion_params(tasks: int, channels: Sequence[int]) -> FusionParamCount:
    if tasks < 2:
        raise ValueError(f"fusion needs at least 2 tasks, got {tasks}")
    channels = tuple(int(c) for c in channels)
    if any(c < 1 for c in channels):
        raise ValueError(f"bad channel widths {channels}")
    per_task = sum(tasks * c * c for c in channels)
    per_task_bias = per_task + sum(channels)
    return FusionParamCount(
        tasks=tasks,
        channels=channels,
        per_task=per_task,
        per_task_with_bias=per_task_bias,
        total=tasks * per_task,
        total_with_bias=tasks * per_task_bias,
        bn_affine=sum(2 * tasks * c for c in channels),
    )
