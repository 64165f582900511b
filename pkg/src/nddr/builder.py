"""Assemble single-task, shared-trunk, and fused multi-task graphs.

A graph is K copies of a small VGG-style conv backbone (two 3x3 convs +
ReLU per stage, optional 2x2 max pool) whose stages are stitched together
by a fusion layer at every stage end, plus one head per task. Modes:

- ``single``: one branch, one head; the warm-start donor for fusion runs.
- ``shared``: one trunk, all heads hang off the last stage.
- ``nddr`` / ``cross-stitch`` / ``sluice``: K branches with a fusion layer
  after every stage; optionally a shortcut that concatenates every stage's
  fused output (bilinear-resized to the last stage's size) and reduces it
  with a per-task 1x1 conv before the head.

All trainable tensors and running buffers live in an ordered registry
keyed by stable hierarchical names, which is what checkpoints serialize.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .autodiff import Tensor
from .fusion import (
    CrossStitchLayer,
    InitPolicy,
    NddrLayer,
    ShortcutReduce,
    SluiceLayer,
)
from .layers import Conv2d, Linear, MaxPool

__all__ = [
    "StageSpec",
    "PixelHead",
    "VectorHead",
    "BackboneSpec",
    "toy_vgg",
    "vgg16_stages",
    "MODES",
    "FUSION_MODES",
    "ParamEntry",
    "TaskGraph",
    "build",
    "build_from_config",
    "forward_multi",
    "expected_param_count",
    "LoadError",
]

MODES = ("single", "shared", "nddr", "cross-stitch", "sluice")
FUSION_MODES = ("nddr", "cross-stitch", "sluice")


class LoadError(ValueError):
    """Checkpoint state does not fit the target graph; message lists every mismatch."""


@dataclass(frozen=True)
class StageSpec:
    convs: int
    channels: int
    pool: bool


@dataclass(frozen=True)
class PixelHead:
    """Dense per-pixel output: 1x1 conv then bilinear upsample to input size."""

    channels: int
    kind: str = "pixel"


@dataclass(frozen=True)
class VectorHead:
    """Whole-image logits: global average pool then a dense layer."""

    classes: int
    kind: str = "vector"


Head = Union[PixelHead, VectorHead]


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple[StageSpec, ...]
    heads: tuple[Head, ...]
    in_channels: int = 3
    input_hw: int = 32

    def pool_factor(self) -> int:
        return 2 ** sum(1 for s in self.stages if s.pool)

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("backbone needs at least one stage")
        if not self.heads:
            raise ValueError("backbone needs at least one head")
        factor = self.pool_factor()
        if self.input_hw % factor != 0 or self.input_hw // factor < 1:
            raise ValueError(
                f"input size {self.input_hw} is not divisible by the pooling factor {factor}"
            )

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "input_hw": self.input_hw,
            "stages": [[s.convs, s.channels, bool(s.pool)] for s in self.stages],
            "heads": [
                ["pixel", h.channels] if isinstance(h, PixelHead) else ["vector", h.classes]
                for h in self.heads
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneSpec":
        stages = tuple(StageSpec(int(c), int(ch), bool(p)) for c, ch, p in d["stages"])
        heads = []
        for kind, n in d["heads"]:
            heads.append(PixelHead(int(n)) if kind == "pixel" else VectorHead(int(n)))
        return BackboneSpec(stages, tuple(heads), int(d["in_channels"]), int(d["input_hw"]))


def toy_vgg(
    heads: Sequence[Head],
    hw: int = 32,
    in_channels: int = 3,
    channels: Sequence[int] = (4, 8, 16, 32),
    convs_per_stage: int = 2,
    pools: Optional[Sequence[bool]] = None,
) -> BackboneSpec:
    """Desk-scale backbone. Only the first two stages pool by default, so a
    32x32 input keeps an 8x8 final grid: deep enough to fuse at four stages,
    fine enough that upsampled per-pixel heads can fit small round regions.
    Widths are deliberately tight; a trunk this size has to choose what to
    encode, which is what makes multi-task comparisons on it informative."""
    if pools is None:
        pools = [i < 2 for i in range(len(channels))]
    if len(pools) != len(channels):
        raise ValueError(f"got {len(channels)} stages but {len(pools)} pool flags")
    stages = tuple(StageSpec(convs_per_stage, int(c), bool(p)) for c, p in zip(channels, pools))
    spec = BackboneSpec(stages, tuple(heads), in_channels, hw)
    spec.validate()
    return spec


def vgg16_stages(heads: Sequence[Head], hw: int = 224, in_channels: int = 3) -> BackboneSpec:
    """The classic 5-stage layout (for parameter accounting more than training)."""
    convs = (2, 2, 3, 3, 3)
    channels = (64, 128, 256, 512, 512)
    stages = tuple(StageSpec(c, ch, True) for c, ch in zip(convs, channels))
    spec = BackboneSpec(stages, tuple(heads), in_channels, hw)
    spec.validate()
    return spec


@dataclass
class ParamEntry:
    tensor: Tensor
    decay: bool
    group: str  # "backbone" or "fusion"; fusion trains at the scaled lr


class _Branch:
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator, dtype):
        self.stage_convs: list[list[Conv2d]] = []
        self.stage_pools: list[Optional[MaxPool]] = []
        cin = spec.in_channels
        for stage in spec.stages:
            convs = []
            for _ in range(stage.convs):
                convs.append(Conv2d(cin, stage.channels, kernel=3, stride=1, pad=1, rng=rng, dtype=dtype))
                cin = stage.channels
            self.stage_convs.append(convs)
            self.stage_pools.append(MaxPool(2, 2) if stage.pool else None)

    def run_stage(self, x: Tensor, s: int) -> Tensor:
        for conv in self.stage_convs[s]:
            x = ops.relu(conv.forward(x))
        pool = self.stage_pools[s]
        return pool.forward(x) if pool is not None else x


class _PixelHeadLayer:
    def __init__(self, in_channels: int, head: PixelHead, out_hw: int, rng, dtype):
        self.conv = Conv2d(in_channels, head.channels, kernel=1, pad=0, rng=rng, dtype=dtype)
        self.out_hw = out_hw

    def forward(self, x: Tensor) -> Tensor:
        logits = self.conv.forward(x)
        if logits.shape[1] == self.out_hw and logits.shape[2] == self.out_hw:
            return logits
        return ops.bilinear_resize(logits, self.out_hw, self.out_hw)

    def params(self):
        return self.conv.params()

    def buffers(self):
        return []


class _VectorHeadLayer:
    def __init__(self, in_channels: int, head: VectorHead, rng, dtype):
        self.fc = Linear(in_channels, head.classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc.forward(ops.global_avg_pool(x))

    def params(self):
        return self.fc.params()

    def buffers(self):
        return []


def _make_head(head: Head, in_channels: int, out_hw: int, rng, dtype):
    if isinstance(head, PixelHead):
        return _PixelHeadLayer(in_channels, head, out_hw, rng, dtype)
    return _VectorHeadLayer(in_channels, head, rng, dtype)


class TaskGraph:
    """A built network: branches, fusion layers, heads, and the name registry."""

    def __init__(self, spec: BackboneSpec, mode: str, build_config: dict, dtype):
        self.spec = spec
        self.mode = mode
        self.build_config = build_config
        self.dtype = dtype
        self.tasks = len(spec.heads)
        self.branches: list[_Branch] = []
        self.heads: list = []
        self.fusions: list = []
        self.shortcuts: list[ShortcutReduce] = []
        self.shortcut = False
        self.params: "OrderedDict[str, ParamEntry]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    # -- registry ---------------------------------------------------------

    def _register(self, prefix: str, layer, group: str) -> None:
        for suffix, tensor, decay in layer.params():
            name = f"{prefix}/{suffix}"
            if name in self.params:
                raise ValueError(f"duplicate parameter name '{name}'")
            self.params[name] = ParamEntry(tensor=tensor, decay=decay, group=group)
        for suffix, arr in layer.buffers():
            name = f"{prefix}/{suffix}"
            if name in self.buffers:
                raise ValueError(f"duplicate buffer name '{name}'")
            self.buffers[name] = arr

    def param_count(self) -> int:
        return sum(e.tensor.numel() for e in self.params.values())

    def zero_grad(self) -> None:
        for e in self.params.values():
            e.tensor.grad = None

    # -- forward ----------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False) -> list[Tensor]:
        n_stages = len(self.spec.stages)
        if self.mode == "single":
            f = x
            for s in range(n_stages):
                f = self.branches[0].run_stage(f, s)
            return [self.heads[0].forward(f)]
        if self.mode == "shared":
            f = x
            for s in range(n_stages):
                f = self.branches[0].run_stage(f, s)
            return [head.forward(f) for head in self.heads]

        per_task = [x] * self.tasks
        levels: list[list[Tensor]] = [[] for _ in range(self.tasks)]
        for s in range(n_stages):
            per_task = [self.branches[i].run_stage(per_task[i], s) for i in range(self.tasks)]
            per_task = self.fusions[s].forward(per_task, train)
            if self.shortcut:
                for i in range(self.tasks):
                    levels[i].append(per_task[i])
        if self.shortcut:
            head_in = [self.shortcuts[i].forward(levels[i]) for i in range(self.tasks)]
        else:
            head_in = per_task
        return [head.forward(f) for head, f in zip(self.heads, head_in)]

    # -- state ------------------------------------------------------------

    def state_records(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, entry in self.params.items():
            out[name] = entry.tensor.data
        for name, arr in self.buffers.items():
            out[name] = arr
        return out

    def load_state(self, records: dict) -> None:
        """Copy named arrays into the graph; collects every mismatch first."""
        problems = []
        targets = self.state_records()
        for name, arr in targets.items():
            if name not in records:
                problems.append(f"missing from checkpoint: {name}")
            elif tuple(records[name].shape) != tuple(arr.shape):
                problems.append(
                    f"shape mismatch for {name}: checkpoint {tuple(records[name].shape)}, graph {tuple(arr.shape)}"
                )
        for name in records:
            if name not in targets:
                problems.append(f"not in graph: {name}")
        if problems:
            raise LoadError("checkpoint does not fit graph:\n  " + "\n  ".join(problems))
        for name, entry in self.params.items():
            entry.tensor.data[...] = records[name].astype(self.dtype, copy=False)
        for name, arr in self.buffers.items():
            arr[...] = records[name].astype(arr.dtype, copy=False)


def forward_multi(graph: TaskGraph, x: Tensor, train: bool = False) -> list[Tensor]:
    return graph.forward(x, train)


def build(
    spec: BackboneSpec,
    mode: str,
    init: Optional[InitPolicy] = None,
    seed: int = 0,
    dtype=np.float32,
    shortcut: bool = False,
    bn_mode: str = "batch",
    bn_affine: bool = True,
    per_task_bn: bool = False,
    sluice_subspaces: int = 2,
    fusion_bias: bool = True,
) -> TaskGraph:
    """Construct a graph for ``mode`` with seeded initialization.

    Backbone and head weights draw from the rng first and fusion layers
    last, so two builds with the same seed share backbone init even when
    the fusion init policy differs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}' (expected one of {MODES})")
    spec.validate()
    if init is None:
        init = InitPolicy()
    elif isinstance(init, str):
        init = InitPolicy.parse(init)
    k = len(spec.heads)
    if mode == "single" and k != 1:
        raise ValueError(f"single mode takes exactly one head, got {k}")
    if mode in FUSION_MODES and k < 2:
        raise ValueError(f"{mode} mode needs at least 2 heads, got {k}")
    if shortcut and mode not in FUSION_MODES:
        raise ValueError(f"shortcut aggregation requires a fusion mode, not '{mode}'")

    cfg = {
        "mode": mode,
        "seed": int(seed),
        "dtype": np.dtype(dtype).name,
        "init": init.describe(),
        "shortcut": bool(shortcut),
        "bn_mode": bn_mode,
        "bn_affine": bool(bn_affine),
        "per_task_bn": bool(per_task_bn),
        "sluice_subspaces": int(sluice_subspaces),
        "fusion_bias": bool(fusion_bias),
        "spec": spec.to_dict(),
    }
    g = TaskGraph(spec, mode, cfg, np.dtype(dtype))
    g.shortcut = bool(shortcut)
    rng = np.random.default_rng(seed)
    last_c = spec.stages[-1].channels

    if mode == "single":
        g.branches = [_Branch(spec, rng, dtype)]
        g.heads = [_make_head(spec.heads[0], last_c, spec.input_hw, rng, dtype)]
        _register_branch(g, 0, g.branches[0])
        g._register("branch0/head", g.heads[0], "backbone")
        return g

    if mode == "shared":
        g.branches = [_Branch(spec, rng, dtype)]
        g.heads = [_make_head(h, last_c, spec.input_hw, rng, dtype) for h in spec.heads]
        _register_trunk(g, g.branches[0])
        for i, head in enumerate(g.heads):
            g._register(f"head{i}", head, "backbone")
        return g

    g.branches = [_Branch(spec, rng, dtype) for _ in range(k)]
    g.heads = [_make_head(h, last_c, spec.input_hw, rng, dtype) for h in spec.heads]
    for i, branch in enumerate(g.branches):
        _register_branch(g, i, branch)
    for i, head in enumerate(g.heads):
        g._register(f"branch{i}/head", head, "backbone")

    for s, stage in enumerate(spec.stages):
        if mode == "nddr":
            layer = NddrLayer(
                k, stage.channels, init, rng=rng, dtype=dtype,
                bn_mode=bn_mode, bn_affine=bn_affine, per_task_bn=per_task_bn, bias=fusion_bias,
            )
        elif mode == "cross-stitch":
            layer = CrossStitchLayer(k, stage.channels, init, rng=rng, dtype=dtype)
        else:
            layer = SluiceLayer(k, stage.channels, init, subspaces=sluice_subspaces, rng=rng, dtype=dtype)
        g.fusions.append(layer)
        g._register(f"fusion{s}", layer, "fusion")

    if shortcut:
        total_c = sum(st.channels for st in spec.stages)
        for i in range(k):
            red = ShortcutReduce(total_c, last_c, rng=rng, dtype=dtype)
            g.shortcuts.append(red)
            g._register(f"shortcut/task{i}", red, "fusion")
    return g


def build_from_config(cfg: dict) -> TaskGraph:
    spec = BackboneSpec.from_dict(cfg["spec"])
    return build(
        spec,
        cfg["mode"],
        init=InitPolicy.parse(cfg["init"]),
        seed=cfg["seed"],
        dtype=np.dtype(cfg["dtype"]),
        shortcut=cfg["shortcut"],
        bn_mode=cfg["bn_mode"],
        bn_affine=cfg["bn_affine"],
        per_task_bn=cfg["per_task_bn"],
        sluice_subspaces=cfg["sluice_subspaces"],
        fusion_bias=cfg["fusion_bias"],
    )


def _register_branch(g: TaskGraph, i: int, branch: _Branch) -> None:
    for s, convs in enumerate(branch.stage_convs):
        for j, conv in enumerate(convs):
            g._register(f"branch{i}/stage{s}/conv{j}", conv, "backbone")


def _register_trunk(g: TaskGraph, branch: _Branch) -> None:
    for s, convs in enumerate(branch.stage_convs):
        for j, conv in enumerate(convs):
            g._register(f"trunk/stage{s}/conv{j}", conv, "backbone")


def _conv_stack_count(spec: BackboneSpec) -> int:
    total = 0
    cin = spec.in_channels
    for stage in spec.stages:
        for _ in range(stage.convs):
            total += stage.channels * 9 * cin + stage.channels
            cin = stage.channels
    return total


def _head_count(head: Head, cin: int) -> int:
    if isinstance(head, PixelHead):
        return head.channels * cin + head.channels
    return head.classes * cin + head.classes


def expected_param_count(
    spec: BackboneSpec,
    mode: str,
    shortcut: bool = False,
    bn_mode: str = "batch",
    bn_affine: bool = True,
    sluice_subspaces: int = 2,
    fusion_bias: bool = True,
) -> int:
    """Closed-form trainable parameter count for a build; must match the
    registry enumeration exactly for every mode."""
    k = len(spec.heads)
    last_c = spec.stages[-1].channels
    stack = _conv_stack_count(spec)
    heads = sum(_head_count(h, last_c) for h in spec.heads)
    if mode == "single":
        return stack + heads
    if mode == "shared":
        return stack + heads
    total = k * stack + heads
    for stage in spec.stages:
        c = stage.channels
        if mode == "nddr":
            total += k * (k * c * c + (c if fusion_bias else 0))
            if bn_mode != "off" and bn_affine:
                total += 2 * k * c
        elif mode == "cross-stitch":
            total += k * k
        else:
            total += (k * sluice_subspaces) ** 2
    if shortcut:
        total_c = sum(st.channels for st in spec.stages)
        total += k * (last_c * total_c + last_c)
    return total
