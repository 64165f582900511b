"""Synthetic two-task datasets small enough to overfit on a laptop CPU.

``gen_shapes_tasks``: anti-aliased colored disks on a noisy background.
Task 0 is per-pixel classification (background 0, one color class per
disk, a ring of ignore labels around each rim). Task 1 is per-pixel
surface direction: unit 3-vectors pointing radially outward with a fixed
pre-normalization z component, supervised exactly on the rim band, so the
direction mask and the ignore band coincide by construction.

``gen_attr_tasks``: one elliptical blob per image. Task 0 bins the blob
radius into 100 classes, task 1 is a 2-way elongation orientation.

Datasets serialize as a directory: a ``manifest.txt`` of ``key = value``
lines plus one tensor file per sample and array in the flat binary record
format (integer labels ride as float32; values are small, so the round
trip is exact).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "TaskDescriptor",
    "DatasetHandle",
    "DatasetError",
    "gen_shapes_tasks",
    "gen_attr_tasks",
    "save_dataset",
    "load_dataset",
    "IGNORE_LABEL",
]

IGNORE_LABEL = 255

TASK_KINDS = ("pixel-class", "pixel-direction", "image-class")


class DatasetError(ValueError):
    """Unusable dataset directory; message lists everything found wrong."""


@dataclass(frozen=True)
class TaskDescriptor:
    kind: str
    classes: int  # class count, or vector dimension for pixel-direction

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind '{self.kind}'")


@dataclass
class DatasetHandle:
    inputs: np.ndarray          # (n, hw, hw, 3) float32 in [0, 1]
    labels: list                # per task: int32 (n,hw,hw) / f32 (n,hw,hw,3) / int32 (n,)
    masks: list                 # per task: bool (n,hw,hw) or bool (n,)
    tasks: tuple[TaskDescriptor, ...]
    seed: int
    split: str
    generator: str
    ignore_label: int = IGNORE_LABEL

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def hw(self) -> int:
        return self.inputs.shape[1]


def _class_color(cls: int) -> np.ndarray:
    # Golden-angle hue walk keeps any number of classes far apart.
    hue = (0.03 + cls * 0.61803398875) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85), dtype=np.float64)


def gen_shapes_tasks(
    n: int,
    hw: int,
    n_classes: int,
    seed: int,
    split: str = "train",
    band: float = 2.0,
    pool_divisor: int = 16,
    noise: float = 0.2,
    color_jitter: float = 0.25,
) -> DatasetHandle:
    """Disks with class colors; labels, rim ignore band, and rim normals.

    Samples are generated from independently spawned per-sample seeds, so
    any index range produces the same bits serially or in parallel.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    if n_classes < 2 or n_classes > 254:
        raise ValueError(f"n_classes must be in [2, 254], got {n_classes}")
    if hw % pool_divisor != 0:
        raise ValueError(f"hw={hw} is not divisible by the backbone pooling factor {pool_divisor}")
    if hw < 16:
        raise ValueError(f"hw={hw} is too small for disks with a +-{band} px rim band")

    inputs = np.zeros((n, hw, hw, 3), dtype=np.float32)
    seg = np.zeros((n, hw, hw), dtype=np.int32)
    normals = np.zeros((n, hw, hw, 3), dtype=np.float32)
    normals[..., 2] = 1.0
    rim = np.zeros((n, hw, hw), dtype=bool)

    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    children = np.random.SeedSequence(seed).spawn(n)
    for idx in range(n):
        rng = np.random.default_rng(children[idx])
        img = np.empty((hw, hw, 3), dtype=np.float64)
        img[:] = rng.uniform(0.08, 0.28, size=3)

        placed: list[tuple[float, float, float]] = []

        def place(radius: float) -> Optional[tuple[float, float]]:
            margin = radius + band + 1.5
            for _try in range(20):
                cx = rng.uniform(margin, hw - margin)
                cy = rng.uniform(margin, hw - margin)
                if all(
                    np.hypot(cx - px, cy - py) >= radius + pr + 2 * band + 2
                    for px, py, pr in placed
                ):
                    placed.append((cx, cy, radius))
                    return cx, cy
            return None

        def paint(cx: float, cy: float, radius: float, color: np.ndarray) -> np.ndarray:
            nonlocal img
            d = np.hypot(xx - cx, yy - cy)
            alpha = np.clip(0.5 - (d - radius), 0.0, 1.0)
            img = img * (1.0 - alpha[..., None]) + color * alpha[..., None]
            return d

        for _ in range(int(rng.integers(1, 4))):
            cls = int(rng.integers(1, n_classes))
            radius = rng.uniform(0.13, 0.22) * hw
            pos = place(radius)
            if pos is None:
                continue
            cx, cy = pos
            color = np.clip(_class_color(cls) + rng.uniform(-color_jitter, color_jitter, size=3), 0.0, 1.0)
            d = paint(cx, cy, radius, color)

            on_rim = np.abs(d - radius) <= band
            seg[idx][d < radius - band] = cls
            seg[idx][on_rim] = IGNORE_LABEL
            rim[idx] |= on_rim
            dd = np.maximum(d, 1e-6)
            vec = np.stack([(xx - cx) / dd, (yy - cy) / dd, np.full_like(d, 0.5)], axis=-1)
            vec /= np.linalg.norm(vec, axis=-1, keepdims=True)
            normals[idx][on_rim] = vec[on_rim].astype(np.float32)

        # Distractors: off-palette blobs labeled background, no rim labels.
        # They force both heads to reject lookalike shapes instead of firing
        # on any colored disk.
        class_hues = [(0.03 + c * 0.61803398875) % 1.0 for c in range(1, n_classes)]
        for _ in range(int(rng.integers(0, 3))):
            radius = rng.uniform(0.08, 0.14) * hw
            for _try in range(20):
                hue = rng.uniform(0.0, 1.0)
                if all(min(abs(hue - h), 1.0 - abs(hue - h)) >= 0.08 for h in class_hues):
                    break
            else:
                continue
            pos = place(radius)
            if pos is None:
                continue
            color = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85), dtype=np.float64)
            color = np.clip(color + rng.uniform(-color_jitter, color_jitter, size=3), 0.0, 1.0)
            paint(pos[0], pos[1], radius, color)

        img += rng.normal(0.0, noise, size=img.shape)
        inputs[idx] = np.clip(img, 0.0, 1.0).astype(np.float32)

    tasks = (TaskDescriptor("pixel-class", n_classes), TaskDescriptor("pixel-direction", 3))
    return DatasetHandle(
        inputs=inputs,
        labels=[seg, normals],
        masks=[seg != IGNORE_LABEL, rim],
        tasks=tasks,
        seed=seed,
        split=split,
        generator="shapes",
    )


def gen_attr_tasks(n: int, hw: int, seed: int, split: str = "train") -> DatasetHandle:
    """One elliptical blob; radius bins to 100 'age' classes, elongation
    axis gives a 2-way label. age = floor(100*(r - r_min)/(r_max - r_min)),
    clamped to 99."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    if hw < 16:
        raise ValueError(f"hw={hw} is too small for the blob generator")

    r_min, r_max = 0.12 * hw, 0.30 * hw
    aspect = 1.3
    inputs = np.zeros((n, hw, hw, 3), dtype=np.float32)
    age = np.zeros(n, dtype=np.int32)
    orient = np.zeros(n, dtype=np.int32)

    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    children = np.random.SeedSequence(seed).spawn(n)
    for idx in range(n):
        rng = np.random.default_rng(children[idx])
        r = rng.uniform(r_min, r_max)
        age[idx] = min(int(np.floor(100.0 * (r - r_min) / (r_max - r_min))), 99)
        orient[idx] = int(rng.integers(0, 2))
        a, b = (r * aspect, r / aspect) if orient[idx] == 0 else (r / aspect, r * aspect)
        cx = hw / 2 + rng.uniform(-0.05, 0.05) * hw
        cy = hw / 2 + rng.uniform(-0.05, 0.05) * hw

        q = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
        signed = (q - 1.0) * min(a, b)
        alpha = np.clip(0.5 - signed, 0.0, 1.0)
        color = np.clip(np.array([0.85, 0.75, 0.55]) + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
        img = np.empty((hw, hw, 3), dtype=np.float64)
        img[:] = rng.uniform(0.05, 0.2, size=3)
        img = img * (1.0 - alpha[..., None]) + color * alpha[..., None]
        img += rng.normal(0.0, 0.02, size=img.shape)
        inputs[idx] = np.clip(img, 0.0, 1.0).astype(np.float32)

    tasks = (TaskDescriptor("image-class", 100), TaskDescriptor("image-class", 2))
    ones = np.ones(n, dtype=bool)
    return DatasetHandle(
        inputs=inputs,
        labels=[age, orient],
        masks=[ones, ones.copy()],
        tasks=tasks,
        seed=seed,
        split=split,
        generator="attr",
    )


# -- directory serialization ------------------------------------------------


def _write_manifest(path: Path, data: DatasetHandle) -> None:
    lines = [
        "# dataset manifest",
        f"samples = {data.n}",
        f"hw = {data.hw}",
        f"channels = {data.inputs.shape[3]}",
        f"split = {data.split}",
        f"seed = {data.seed}",
        f"generator = {data.generator}",
        f"ignore_label = {data.ignore_label}",
        f"tasks = {len(data.tasks)}",
    ]
    for i, t in enumerate(data.tasks):
        lines.append(f"task{i}_kind = {t.kind}")
        lines.append(f"task{i}_classes = {t.classes}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_manifest(path: Path) -> dict:
    fields: dict[str, str] = {}
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{ln}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def _save_array(path: Path, arr: np.ndarray) -> None:
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        arr = arr.astype(np.float32)
    save_checkpoint(path, {"data": arr})


def save_dataset(data: DatasetHandle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out / "manifest.txt", data)
    for idx in range(data.n):
        _save_array(out / f"input_{idx:05d}", data.inputs[idx])
        for i in range(len(data.tasks)):
            _save_array(out / f"task{i}_label_{idx:05d}", np.asarray(data.labels[i][idx]))
            _save_array(out / f"task{i}_mask_{idx:05d}", np.asarray(data.masks[i][idx]))


def _expected_label_shape(task: TaskDescriptor, hw: int) -> tuple:
    if task.kind == "pixel-class":
        return (hw, hw)
    if task.kind == "pixel-direction":
        return (hw, hw, 3)
    return ()


def load_dataset(src_dir) -> DatasetHandle:
    src = Path(src_dir)
    manifest = src / "manifest.txt"
    if not manifest.is_file():
        raise DatasetError(f"no manifest.txt in '{src}'")
    fields = _parse_manifest(manifest)
    problems: list[str] = []

    def need_int(key: str) -> int:
        if key not in fields:
            problems.append(f"manifest missing '{key}'")
            return 0
        try:
            return int(fields[key])
        except ValueError:
            problems.append(f"manifest '{key}' is not an integer: '{fields[key]}'")
            return 0

    n = need_int("samples")
    hw = need_int("hw")
    seed = need_int("seed")
    ignore = need_int("ignore_label")
    n_tasks = need_int("tasks")
    split = fields.get("split", "train")
    generator = fields.get("generator", "unknown")
    tasks: list[TaskDescriptor] = []
    for i in range(n_tasks):
        kind = fields.get(f"task{i}_kind")
        classes = need_int(f"task{i}_classes")
        if kind not in TASK_KINDS:
            problems.append(f"manifest task{i}_kind '{kind}' is not one of {TASK_KINDS}")
            kind = "image-class"
        tasks.append(TaskDescriptor(kind, classes))
    if problems:
        raise DatasetError("bad dataset manifest:\n  " + "\n  ".join(problems))

    def read_array(name: str, want_shape: tuple) -> Optional[np.ndarray]:
        path = src / name
        if not path.is_file():
            problems.append(f"missing tensor file {name}")
            return None
        arr = load_checkpoint(path).records.get("data")
        if arr is None:
            problems.append(f"{name}: no 'data' record")
            return None
        if tuple(arr.shape) != want_shape:
            problems.append(f"{name}: shape {tuple(arr.shape)}, manifest implies {want_shape}")
            return None
        return arr

    inputs = np.zeros((n, hw, hw, 3), dtype=np.float32)
    labels: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    for i, t in enumerate(tasks):
        if t.kind == "pixel-class":
            labels.append(np.zeros((n, hw, hw), dtype=np.int32))
            masks.append(np.zeros((n, hw, hw), dtype=bool))
        elif t.kind == "pixel-direction":
            labels.append(np.zeros((n, hw, hw, 3), dtype=np.float32))
            masks.append(np.zeros((n, hw, hw), dtype=bool))
        else:
            labels.append(np.zeros(n, dtype=np.int32))
            masks.append(np.zeros(n, dtype=bool))

    for idx in range(n):
        arr = read_array(f"input_{idx:05d}", (hw, hw, 3))
        if arr is not None:
            inputs[idx] = arr
        for i, t in enumerate(tasks):
            lab = read_array(f"task{i}_label_{idx:05d}", _expected_label_shape(t, hw))
            if lab is not None:
                if t.kind == "pixel-direction":
                    labels[i][idx] = lab
                elif t.kind == "pixel-class":
                    labels[i][idx] = lab.astype(np.int32)
                else:
                    labels[i][idx] = int(lab)
            mshape = (hw, hw) if t.kind.startswith("pixel") else ()
            msk = read_array(f"task{i}_mask_{idx:05d}", mshape)
            if msk is not None:
                if t.kind.startswith("pixel"):
                    masks[i][idx] = msk.astype(bool)
                else:
                    masks[i][idx] = bool(msk)
    if problems:
        head = problems[:20]
        if len(problems) > len(head):
            head.append(f"... and {len(problems) - len(head)} more")
        raise DatasetError(f"unusable dataset in '{src}':\n  " + "\n  ".join(head))

    return DatasetHandle(
        inputs=inputs,
        labels=labels,
        masks=masks,
        tasks=tuple(tasks),
        seed=seed,
        split=split,
        generator=generator,
        ignore_label=ignore,
    )
