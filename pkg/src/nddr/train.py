"""Training engine: momentum SGD with per-group learning rates.

One training step: sample a batch, forward all tasks, sum the per-task
losses, walk the tape backward, and update every registered parameter.
Fusion-layer parameters train at ``nddr_lr_scale`` times the base rate;
weight decay adds 2*lambda*w to decayed parameters inside the optimizer
(the logged loss stays pure data loss, with the decay term reported
separately). Any non-finite gradient aborts with the parameter name.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses, metrics, ops
from .autodiff import Tape, Tensor
from .builder import PixelHead, TaskGraph, VectorHead
from .checkpoint import save_checkpoint
from .data import DatasetHandle, TaskDescriptor
from .metrics import MetricsLog

__all__ = [
    "TrainConfig",
    "SGD",
    "TrainingDiverged",
    "heads_for_tasks",
    "task_loss",
    "evaluate",
    "train",
    "TrainResult",
    "decay_penalty",
    "load_pretrained",
]


class TrainingDiverged(RuntimeError):
    """A non-finite value appeared in a gradient or loss."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nddr_lr_scale: float = 100.0
    seed: int = 0
    task: Optional[int] = None            # single mode: which dataset task to train on
    loss_weights: Optional[tuple] = None  # per-task scalars, default all 1
    eval_every: int = 250
    eval_batch: int = 16
    # Optional plateau exit: stop once metric on the train split reaches the
    # threshold (checked at eval points). None disables. stop_task is a
    # dataset task index; None means the first trained task.
    stop_metric: Optional[str] = None
    stop_task: Optional[int] = None
    stop_at: float = 1.0

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (batch norm needs it), got {self.batch_size}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.nddr_lr_scale < 1:
            raise ValueError(f"nddr_lr_scale must be >= 1, got {self.nddr_lr_scale}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")


class SGD:
    """Momentum SGD over a graph's registry: v = m*v + g (+ 2*wd*w); w -= lr*v."""

    def __init__(self, graph: TaskGraph, cfg: TrainConfig):
        self.graph = graph
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(e.tensor.data) for name, e in graph.params.items()}

    def step(self) -> None:
        cfg = self.cfg
        for name, entry in self.graph.params.items():
            g = entry.tensor.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in parameter '{name}'")
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            if entry.decay and cfg.weight_decay:
                v += (2.0 * cfg.weight_decay) * entry.tensor.data
            lr = cfg.base_lr * (cfg.nddr_lr_scale if entry.group == "fusion" else 1.0)
            entry.tensor.data -= lr * v


def heads_for_tasks(tasks: Sequence[TaskDescriptor]):
    heads = []
    for t in tasks:
        if t.kind == "pixel-class":
            heads.append(PixelHead(t.classes))
        elif t.kind == "pixel-direction":
            heads.append(PixelHead(3))
        else:
            heads.append(VectorHead(t.classes))
    return heads


def task_loss(task: TaskDescriptor, out: Tensor, label: np.ndarray, mask: np.ndarray, ignore_label: int) -> Tensor:
    if task.kind == "pixel-class":
        return losses.softmax_cross_entropy(out, label, ignore_label)
    if task.kind == "pixel-direction":
        return losses.normal_loss(out, label, mask)
    return losses.softmax_cross_entropy(out, label, ignore_label)


def decay_penalty(graph: TaskGraph, weight_decay: float) -> float:
    """lambda * sum ||w||^2 over decayed parameters (reported, not backpropped;
    the optimizer applies the matching 2*lambda*w gradient analytically)."""
    if not weight_decay:
        return 0.0
    total = 0.0
    for entry in graph.params.values():
        if entry.decay:
            w = entry.tensor.data
            total += float((w.astype(np.float64) ** 2).sum())
    return weight_decay * total


def _graph_task_indices(graph: TaskGraph, data: DatasetHandle, cfg_task: Optional[int]) -> list[int]:
    """Map each graph output to a dataset task index."""
    if graph.mode == "single":
        task = cfg_task if cfg_task is not None else 0
        if not 0 <= task < len(data.tasks):
            raise ValueError(f"task index {task} out of range for {len(data.tasks)} dataset tasks")
        return [task]
    if len(data.tasks) != graph.tasks:
        raise ValueError(f"graph has {graph.tasks} tasks but the dataset has {len(data.tasks)}")
    return list(range(graph.tasks))


def evaluate(
    graph: TaskGraph,
    data: DatasetHandle,
    batch_size: int = 16,
    task: Optional[int] = None,
) -> list[dict]:
    """Eval-mode metrics per graph output, streamed over fixed-order batches.

    pixel-class: loss, pixel_acc, miou. pixel-direction: loss, mean/median
    angle and within-t fractions. image-class: loss, acc, and mean/median
    absolute error of the distribution's expected value.
    """
    idxs = _graph_task_indices(graph, data, task)
    n = data.n
    acc: list[dict] = []
    for t_idx in idxs:
        t = data.tasks[t_idx]
        slot: dict = {"kind": t.kind, "loss_sum": 0.0, "count": 0}
        if t.kind == "pixel-class":
            slot["cm"] = np.zeros((t.classes, t.classes), dtype=np.int64)
        elif t.kind == "pixel-direction":
            slot["angles"] = []
        else:
            slot["correct"] = 0
            slot["expect_err"] = []
        acc.append(slot)

    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        x = Tensor(data.inputs[lo:hi])
        outs = graph.forward(x, train=False)
        for out, slot, t_idx in zip(outs, acc, idxs):
            t = data.tasks[t_idx]
            label = data.labels[t_idx][lo:hi]
            mask = data.masks[t_idx][lo:hi]
            loss = task_loss(t, out, label, mask, data.ignore_label)
            if t.kind == "pixel-class":
                m = int((label != data.ignore_label).sum())
            elif t.kind == "pixel-direction":
                m = int(mask.sum())
            else:
                m = hi - lo
            slot["loss_sum"] += loss.item() * m
            slot["count"] += m
            if t.kind == "pixel-class":
                pred = out.data.argmax(axis=3)
                slot["cm"] += metrics.confusion_matrix(pred, label, t.classes, data.ignore_label)
            elif t.kind == "pixel-direction":
                ang = metrics.angles_deg(out.data, label, mask)
                if ang.size:
                    slot["angles"].append(ang)
            else:
                logits = out.data.reshape(hi - lo, -1)
                pred = logits.argmax(axis=1)
                slot["correct"] += int((pred == label).sum())
                z = logits - logits.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                slot["expect_err"].append(np.abs(metrics.age_expectation(p) - label))

    results = []
    for slot in acc:
        count = slot["count"]
        out = {"loss": slot["loss_sum"] / count if count else 0.0}
        if slot["kind"] == "pixel-class":
            out.update(metrics.seg_metrics_from_confusion(slot["cm"]))
        elif slot["kind"] == "pixel-direction":
            ang = np.concatenate(slot["angles"]) if slot["angles"] else np.zeros(0)
            out.update(metrics.metrics_from_angles(ang))
        else:
            out["acc"] = slot["correct"] / n
            err = np.concatenate(slot["expect_err"])
            out.update(metrics.abs_error_stats(err, np.zeros_like(err)))
        results.append(out)
    return results


@dataclass
class TrainResult:
    log: MetricsLog
    final_train: list
    final_eval: list
    steps_run: int
    checkpoint_path: Optional[str] = None
    config: dict = field(default_factory=dict)


def _record_eval(log: MetricsLog, step: int, split: str, results: list,
                 weights: Sequence[float], idxs: Sequence[int]) -> None:
    total = 0.0
    for i, res in enumerate(results):
        for name, value in res.items():
            log.add(step, f"task{idxs[i]}", f"{split}/{name}", value)
        total += weights[i] * res["loss"]
    log.add(step, "all", f"{split}/loss", total)


def train(
    graph: TaskGraph,
    train_data: DatasetHandle,
    eval_data: Optional[DatasetHandle],
    cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Run cfg.steps batches of momentum SGD; log metrics at eval points.

    Both splits are evaluated every ``eval_every`` steps and at the end.
    With ``out_dir`` set, writes metrics.jsonl, summary.csv, and
    checkpoint.bin (parameters, buffers, step, and the full config echo).
    """
    cfg.validate()
    idxs = _graph_task_indices(graph, train_data, cfg.task)
    weights = list(cfg.loss_weights) if cfg.loss_weights is not None else [1.0] * len(idxs)
    if len(weights) != len(idxs):
        raise ValueError(f"{len(weights)} loss weights for {len(idxs)} trained tasks")

    opt = SGD(graph, cfg)
    log = MetricsLog()
    rng = np.random.default_rng(cfg.seed)
    n = train_data.n
    batch = min(cfg.batch_size, n)
    order = np.zeros(0, dtype=np.int64)
    cursor = 0

    def run_evals(step: int) -> tuple[list, list]:
        tr = evaluate(graph, train_data, cfg.eval_batch, cfg.task)
        _record_eval(log, step, "train", tr, weights, idxs)
        ev = tr
        if eval_data is not None:
            ev = evaluate(graph, eval_data, cfg.eval_batch, cfg.task)
            _record_eval(log, step, "eval", ev, weights, idxs)
        log.add(step, "all", "decay_loss", decay_penalty(graph, cfg.weight_decay))
        return tr, ev

    final_train, final_eval = run_evals(0)
    steps_run = 0
    stopped = False
    for step in range(1, cfg.steps + 1):
        if cursor + batch > order.size:
            order = rng.permutation(n)
            cursor = 0
        sel = order[cursor : cursor + batch]
        cursor += batch

        graph.zero_grad()
        x = Tensor(train_data.inputs[sel])
        with Tape() as tape:
            outs = graph.forward(x, train=True)
            total = None
            for out, t_idx, w in zip(outs, idxs, weights):
                t = train_data.tasks[t_idx]
                li = task_loss(t, out, train_data.labels[t_idx][sel], train_data.masks[t_idx][sel], train_data.ignore_label)
                li = ops.scale(li, w)
                total = li if total is None else ops.add(total, li)
            if not np.isfinite(total.data).all():
                raise TrainingDiverged(f"non-finite training loss at step {step}")
            tape.backward(total)
        opt.step()
        steps_run = step

        if step % cfg.eval_every == 0 or step == cfg.steps:
            final_train, final_eval = run_evals(step)
            if cfg.stop_metric is not None:
                stop_idx = cfg.stop_task if cfg.stop_task is not None else idxs[0]
                value = log.last(f"task{stop_idx}", f"train/{cfg.stop_metric}")
                if value is not None and value >= cfg.stop_at:
                    stopped = True
        if stopped:
            break

    config_echo = {"graph": graph.build_config, "train": asdict(cfg)}
    ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log.write_jsonl(out / "metrics.jsonl")
        log.write_csv(out / "summary.csv")
        ckpt_path = str(out / "checkpoint.bin")
        save_checkpoint(ckpt_path, graph.state_records(), step=steps_run, config=config_echo)
    return TrainResult(
        log=log,
        final_train=final_train,
        final_eval=final_eval,
        steps_run=steps_run,
        checkpoint_path=ckpt_path,
        config=config_echo,
    )


def load_pretrained(graph: TaskGraph, sources: Sequence) -> None:
    """Copy single-task checkpoints into the branches of a fusion graph.

    ``sources[i]`` (a Checkpoint or a records mapping) supplies branch i;
    its ``branch0/...`` names map onto ``branch{i}/...``. Fusion and
    shortcut parameters keep their initialization. All mismatches across
    all branches are reported in one error.
    """
    from .builder import FUSION_MODES, LoadError

    if graph.mode == "single":
        if len(sources) != 1:
            raise ValueError(f"single-mode graph takes 1 checkpoint, got {len(sources)}")
    elif graph.mode in FUSION_MODES:
        if len(sources) != graph.tasks:
            raise ValueError(f"{graph.mode} graph with {graph.tasks} tasks takes {graph.tasks} checkpoints, got {len(sources)}")
    else:
        raise ValueError(f"warm start is defined for single and fusion modes, not '{graph.mode}'")

    problems: list[str] = []
    targets = graph.state_records()
    for i, src in enumerate(sources):
        records = getattr(src, "records", src)
        prefix = f"branch{i}/"
        wanted = {name for name in targets if name.startswith(prefix)}
        for name in sorted(wanted):
            src_name = "branch0/" + name[len(prefix):]
            if src_name not in records:
                problems.append(f"branch {i}: checkpoint lacks {src_name}")
            elif tuple(records[src_name].shape) != tuple(targets[name].shape):
                problems.append(
                    f"branch {i}: {src_name} has shape {tuple(records[src_name].shape)}, graph wants {tuple(targets[name].shape)}"
                )
        for src_name in records:
            if not src_name.startswith("branch0/"):
                problems.append(f"branch {i}: unexpected record {src_name} (not a single-task checkpoint?)")
            elif prefix + src_name[len("branch0/"):] not in targets:
                problems.append(f"branch {i}: no home for {src_name} in this graph")
    if problems:
        raise LoadError("warm start does not fit graph:\n  " + "\n  ".join(problems))

    for i, src in enumerate(sources):
        records = getattr(src, "records", src)
        prefix = f"branch{i}/"
        for name, entry in graph.params.items():
            if name.startswith(prefix):
                entry.tensor.data[...] = records["branch0/" + name[len(prefix):]].astype(graph.dtype, copy=False)
        for name, arr in graph.buffers.items():
            if name.startswith(prefix):
                arr[...] = records["branch0/" + name[len(prefix):]].astype(arr.dtype, copy=False)
