"""Command-line front end.

Commands: gen-data, train, eval, ablate, gradcheck, count-params, replay.
Every option can also come from a ``key = value`` config file (``--config``);
explicit flags beat the file, the file beats built-in defaults. Each command
that produces output writes a ``run.json`` echo of its fully resolved
config, and ``replay run.json`` re-runs a command from that echo alone.

Exit codes: 0 success, 2 bad flags or config, 1 runtime failure (I/O,
divergence, a gradient check over tolerance).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .builder import (
    FUSION_MODES,
    MODES,
    LoadError,
    build,
    build_from_config,
    toy_vgg,
)
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetError, gen_attr_tasks, gen_shapes_tasks, load_dataset, save_dataset
from .fusion import InitPolicy, count_fusion_params
from .gradcheck import CHECKS, run_suite
from .metrics import MetricsLog
from .train import TrainConfig, TrainingDiverged, evaluate, heads_for_tasks, load_pretrained, train

__all__ = ["main", "UsageError"]


class UsageError(ValueError):
    """Bad flag or config value; maps to exit code 2."""


class _Required:
    def __repr__(self):
        return "<required>"


REQUIRED = _Required()

_TRAIN_DEFAULTS = TrainConfig()

# command option tables: name -> (default, type tag)
_GEN_DATA_SPEC = {
    "generator": (REQUIRED, "str"),
    "n": (REQUIRED, "int"),
    "hw": (32, "int"),
    "classes": (3, "int"),
    "band": (2.0, "float"),
    "seed": (0, "int"),
    "split": ("train", "str"),
    "out": (REQUIRED, "str"),
}

_TRAIN_SPEC = {
    "data": (REQUIRED, "str"),
    "eval_data": (None, "str"),
    "mode": (REQUIRED, "str"),
    "task": (None, "int"),
    "shortcut": (False, "bool"),
    "init": ("diag:0.9,0.1", "str"),
    "nddr_lr_scale": (_TRAIN_DEFAULTS.nddr_lr_scale, "float"),
    "base_lr": (_TRAIN_DEFAULTS.base_lr, "float"),
    "weight_decay": (_TRAIN_DEFAULTS.weight_decay, "float"),
    "momentum": (_TRAIN_DEFAULTS.momentum, "float"),
    "steps": (_TRAIN_DEFAULTS.steps, "int"),
    "batch_size": (_TRAIN_DEFAULTS.batch_size, "int"),
    "seed": (0, "int"),
    "eval_every": (_TRAIN_DEFAULTS.eval_every, "int"),
    "loss_weights": (None, "str"),
    "pretrain": ([], "paths"),
    "channels": ("4,8,16,32", "str"),
    "convs_per_stage": (2, "int"),
    "pools": (None, "str"),
    "bn_mode": ("batch", "str"),
    "sluice_subspaces": (2, "int"),
    "out": (REQUIRED, "str"),
}

_EVAL_SPEC = {
    "checkpoint": (REQUIRED, "str"),
    "data": (REQUIRED, "str"),
    "task": (None, "int"),
    "batch_size": (16, "int"),
    "out": (None, "str"),
}

_ABLATE_SPEC = dict(_TRAIN_SPEC)
_ABLATE_SPEC.update(
    {
        "mode": ("nddr", "str"),
        "axis": (REQUIRED, "str"),
        "grid": (None, "str"),
        "repeats": (1, "int"),
        "workers": (1, "int"),
    }
)

_GRADCHECK_SPEC = {
    "ops": ("all", "str"),
    "trials": (5, "int"),
    "eps": (1e-5, "float"),
    "seed": (0, "int"),
    "tol": (1e-4, "float"),
    "out": (None, "str"),
}

_COUNT_PARAMS_SPEC = {
    "mode": ("nddr", "str"),
    "k": (2, "int"),
    "channels": ("64,128,256,512,512", "str"),
    "convs": (None, "str"),
    "in_channels": (3, "int"),
    "sluice_subspaces": (2, "int"),
    "out": (None, "str"),
}

_SPECS = {
    "gen-data": _GEN_DATA_SPEC,
    "train": _TRAIN_SPEC,
    "eval": _EVAL_SPEC,
    "ablate": _ABLATE_SPEC,
    "gradcheck": _GRADCHECK_SPEC,
    "count-params": _COUNT_PARAMS_SPEC,
}

_DEFAULT_INIT_GRID = ["diag:1,0", "diag:0.9,0.1", "diag:0.5,0.5", "diag:0.1,0.9", "diag:0,1", "xavier"]
_DEFAULT_SCALE_GRID = [1.0, 10.0, 100.0, 1000.0]


def _convert(key: str, text: str, tag: str):
    text = text.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tag == "paths":
            return [p for p in (s.strip() for s in text.split(";")) if p]
        return text
    except ValueError as exc:
        raise UsageError(f"bad value for '{key}': '{text}' is not a {tag}") from exc


def _parse_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for ln, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(command: str, cli_values: dict, config_path) -> dict:
    spec = _SPECS[command]
    resolved = {k: (d if not isinstance(d, _Required) else REQUIRED) for k, (d, _t) in spec.items()}
    if config_path:
        for key, text in _parse_config_file(config_path).items():
            if key not in spec:
                raise UsageError(f"unknown config key '{key}' for {command}")
            resolved[key] = _convert(key, text, spec[key][1])
    for key, value in cli_values.items():
        if key in spec and value is not None:
            resolved[key] = value
    missing = sorted(k for k, v in resolved.items() if isinstance(v, _Required))
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def _write_run_json(out_dir, command: str, resolved: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": resolved}
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_int_list(text: str, key: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad value for '{key}': '{text}' is not a comma list of integers") from exc


def _parse_float_list(text: str, key: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad value for '{key}': '{text}' is not a comma list of numbers") from exc


# -- commands ----------------------------------------------------------------


def cmd_gen_data(resolved: dict) -> int:
    gen = resolved["generator"]
    try:
        if gen == "shapes":
            data = gen_shapes_tasks(
                resolved["n"], resolved["hw"], resolved["classes"], resolved["seed"],
                split=resolved["split"], band=resolved["band"],
            )
        elif gen == "attr":
            data = gen_attr_tasks(resolved["n"], resolved["hw"], resolved["seed"], split=resolved["split"])
        else:
            raise UsageError(f"unknown generator '{gen}' (expected 'shapes' or 'attr')")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_dataset(data, resolved["out"])
    _write_run_json(resolved["out"], "gen-data", resolved)
    kinds = ", ".join(t.kind for t in data.tasks)
    print(f"wrote {data.n}-sample {gen} dataset ({kinds}) at {data.hw}x{data.hw} to {resolved['out']}")
    return 0


def _build_graph_for_train(resolved: dict, data) -> tuple:
    mode = resolved["mode"]
    if mode not in MODES:
        raise UsageError(f"unknown mode '{mode}' (expected one of {MODES})")
    task = resolved["task"]
    if mode == "single":
        if task is None:
            if len(data.tasks) > 1:
                raise UsageError("single mode on a multi-task dataset needs --task")
            task = 0
        if not 0 <= task < len(data.tasks):
            raise UsageError(f"--task {task} out of range for {len(data.tasks)} dataset tasks")
        heads = heads_for_tasks([data.tasks[task]])
    else:
        heads = heads_for_tasks(data.tasks)

    channels = _parse_int_list(resolved["channels"], "channels")
    pools = None
    if resolved["pools"] is not None:
        pools = [_convert("pools", s, "bool") for s in resolved["pools"].split(",")]
    try:
        init = InitPolicy.parse(resolved["init"])
        spec = toy_vgg(
            heads,
            hw=data.hw,
            in_channels=int(data.inputs.shape[3]),
            channels=channels,
            convs_per_stage=resolved["convs_per_stage"],
            pools=pools,
        )
        graph = build(
            spec,
            mode,
            init=init,
            seed=resolved["seed"],
            shortcut=resolved["shortcut"],
            bn_mode=resolved["bn_mode"],
            sluice_subspaces=resolved["sluice_subspaces"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return graph, task


def _train_config(resolved: dict, task) -> TrainConfig:
    weights = None
    if resolved["loss_weights"] is not None:
        weights = tuple(_parse_float_list(resolved["loss_weights"], "loss_weights"))
    cfg = TrainConfig(
        steps=resolved["steps"],
        batch_size=resolved["batch_size"],
        base_lr=resolved["base_lr"],
        momentum=resolved["momentum"],
        weight_decay=resolved["weight_decay"],
        nddr_lr_scale=resolved["nddr_lr_scale"],
        seed=resolved["seed"],
        task=task,
        loss_weights=weights,
        eval_every=resolved["eval_every"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _run_train(resolved: dict, quiet: bool = False):
    data = load_dataset(resolved["data"])
    eval_data = load_dataset(resolved["eval_data"]) if resolved["eval_data"] else None
    graph, task = _build_graph_for_train(resolved, data)
    if resolved["pretrain"]:
        if resolved["mode"] not in FUSION_MODES and resolved["mode"] != "single":
            raise UsageError(f"--pretrain applies to single or fusion modes, not '{resolved['mode']}'")
        sources = [load_checkpoint(p) for p in resolved["pretrain"]]
        try:
            load_pretrained(graph, sources)
        except LoadError:
            raise
        except ValueError as exc:  # checkpoint count / mode mismatch: a flag problem
            raise UsageError(str(exc)) from exc
    elif resolved["mode"] in FUSION_MODES and not quiet:
        print("note: fusion training from scratch; warm-starting from single-task "
              "checkpoints (--pretrain a.bin;b.bin) typically trains better")
    cfg = _train_config(resolved, task)
    if cfg.loss_weights is not None:
        want = 1 if resolved["mode"] == "single" else len(data.tasks)
        if len(cfg.loss_weights) != want:
            raise UsageError(f"{len(cfg.loss_weights)} loss weights for {want} trained task(s)")
    result = train(graph, data, eval_data, cfg, out_dir=resolved["out"])
    return result, data


def _print_final(result, data, split: str, task=None) -> None:
    results = result.final_eval if split == "eval" else result.final_train
    if len(results) == len(data.tasks):
        idxs = list(range(len(results)))
    else:
        idxs = [task if task is not None else 0]
    for i, res in zip(idxs, results):
        parts = ", ".join(f"{k}={v:.4f}" for k, v in res.items())
        print(f"  task{i} [{data.tasks[i].kind}] {split}: {parts}")


def cmd_train(resolved: dict) -> int:
    result, data = _run_train(resolved)
    _write_run_json(resolved["out"], "train", resolved)
    print(f"trained {resolved['mode']} for {result.steps_run} steps; checkpoint at {result.checkpoint_path}")
    _print_final(result, data, "train", resolved["task"])
    if resolved["eval_data"]:
        _print_final(result, data, "eval", resolved["task"])
    return 0


def cmd_eval(resolved: dict) -> int:
    ckpt = load_checkpoint(resolved["checkpoint"])
    if "graph" not in ckpt.config:
        raise CheckpointError(f"checkpoint '{resolved['checkpoint']}' has no graph config echo; cannot rebuild")
    graph = build_from_config(ckpt.config["graph"])
    graph.load_state(ckpt.records)
    data = load_dataset(resolved["data"])
    task = resolved["task"]
    if task is None and graph.mode == "single":
        task = ckpt.config.get("train", {}).get("task")
    try:
        results = evaluate(graph, data, batch_size=resolved["batch_size"], task=task)
    except ValueError as exc:  # --task out of range, or graph/dataset mismatch
        raise UsageError(str(exc)) from exc
    print(f"evaluated step-{ckpt.step} {graph.mode} checkpoint on {data.n} samples")
    for i, res in enumerate(results):
        parts = ", ".join(f"{k}={v:.4f}" for k, v in res.items())
        print(f"  task{i}: {parts}")
    if resolved["out"]:
        log = MetricsLog()
        idxs = range(len(results))
        for i, res in zip(idxs, results):
            for name, value in res.items():
                log.add(ckpt.step, f"task{i}", f"eval/{name}", value)
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        log.write_jsonl(out / "metrics.jsonl")
        log.write_csv(out / "summary.csv")
        _write_run_json(out, "eval", resolved)
    return 0


def _ablate_points(resolved: dict) -> list[tuple[str, dict]]:
    axis = resolved["axis"]
    if axis == "init":
        entries = (
            [e.strip() for e in resolved["grid"].split(";") if e.strip()]
            if resolved["grid"]
            else list(_DEFAULT_INIT_GRID)
        )
        points = []
        for entry in entries:
            try:
                InitPolicy.parse(entry)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            label = entry.replace("diag:", "diag_").replace(",", "_")
            points.append((label, {"init": entry}))
        return points
    if axis == "lr-scale":
        scales = (
            _parse_float_list(resolved["grid"], "grid") if resolved["grid"] else list(_DEFAULT_SCALE_GRID)
        )
        bad = [s for s in scales if s < 1]
        if bad:
            raise UsageError(f"lr-scale grid values must be >= 1, got {bad}")
        return [(f"scale_{s:g}", {"nddr_lr_scale": s}) for s in scales]
    raise UsageError(f"unknown ablation axis '{axis}' (expected 'init' or 'lr-scale')")


def _ablate_cell(payload: dict):
    resolved = payload["resolved"]
    result, data = _run_train(resolved, quiet=True)
    _write_run_json(resolved["out"], "train", resolved)
    split = "eval" if resolved["eval_data"] else "train"
    finals = result.final_eval if split == "eval" else result.final_train
    kinds = [t.kind for t in data.tasks]
    return payload["label"], payload["repeat"], kinds, finals


_KIND_PRIORITY = {"pixel-direction": 0, "pixel-class": 1, "image-class": 2}
_KIND_METRICS = {
    "pixel-direction": ["mean_angle", "median_angle", "within_11.25", "within_22.5", "within_30"],
    "pixel-class": ["miou", "pixel_acc"],
    "image-class": ["acc", "mean_ae", "median_ae"],
}


def _summary_columns(kinds: list[str]) -> list[tuple[int, str]]:
    """(task index, metric) pairs: direction metrics first, then class ones."""
    order = sorted(range(len(kinds)), key=lambda i: (_KIND_PRIORITY[kinds[i]], i))
    cols = []
    for i in order:
        for m in _KIND_METRICS[kinds[i]]:
            cols.append((i, m))
    for i in order:
        cols.append((i, "loss"))
    return cols


def cmd_ablate(resolved: dict) -> int:
    points = _ablate_points(resolved)
    out_root = Path(resolved["out"])
    payloads = []
    for label, overrides in points:
        for r in range(resolved["repeats"]):
            sub = dict(resolved)
            sub.update(overrides)
            sub["seed"] = resolved["seed"] + r
            sub["out"] = str(out_root / label / f"rep{r}")
            for key in ("axis", "grid", "repeats", "workers"):
                sub.pop(key, None)
            payloads.append({"label": label, "repeat": r, "resolved": sub})

    if resolved["workers"] > 1:
        with ProcessPoolExecutor(max_workers=resolved["workers"]) as pool:
            outcomes = list(pool.map(_ablate_cell, payloads))
    else:
        outcomes = [_ablate_cell(p) for p in payloads]

    by_label: dict[str, list] = {label: [] for label, _ in points}
    kinds: list[str] = []
    for label, _r, cell_kinds, finals in outcomes:
        kinds = cell_kinds
        by_label[label].append(finals)
    cols = _summary_columns(kinds)

    header = ["point", "repeats"]
    for i, m in cols:
        header.append(f"task{i}/{m}_mean")
        header.append(f"task{i}/{m}_std")
    lines = [",".join(header)]
    for label, _ in points:
        cells = by_label[label]
        row = [label, str(len(cells))]
        for i, m in cols:
            vals = np.array([c[i][m] for c in cells], dtype=np.float64)
            row.append(repr(float(vals.mean())))
            row.append(repr(float(vals.std())))
        lines.append(",".join(row))
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_run_json(out_root, "ablate", resolved)
    print(f"ablation over {resolved['axis']}: {len(points)} points x {resolved['repeats']} repeats")
    for line in lines:
        print("  " + line)
    return 0


def cmd_gradcheck(resolved: dict) -> int:
    names = None if resolved["ops"] == "all" else [s.strip() for s in resolved["ops"].split(",") if s.strip()]
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown op(s) {unknown}; available: {', '.join(CHECKS)}")
    results = run_suite(names, trials=resolved["trials"], eps=resolved["eps"], seed=resolved["seed"])
    tol = resolved["tol"]
    width = max(len(n) for n in results)
    failures = []
    for name, err in results.items():
        status = "ok" if err <= tol else "FAIL"
        print(f"  {name:<{width}}  {err:10.3e}  {status}")
        if err > tol:
            failures.append(name)
    if resolved["out"]:
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
        _write_run_json(out, "gradcheck", resolved)
    if failures:
        print(f"gradient check failed for: {', '.join(failures)} (tol {tol:g})", file=sys.stderr)
        return 1
    print(f"all {len(results)} ops within {tol:g}")
    return 0


def cmd_count_params(resolved: dict) -> int:
    k = resolved["k"]
    channels = _parse_int_list(resolved["channels"], "channels")
    convs = _parse_int_list(resolved["convs"], "convs") if resolved["convs"] else [2] * len(channels)
    if len(convs) != len(channels):
        raise UsageError(f"{len(channels)} channel widths but {len(convs)} conv counts")
    if k < 2:
        raise UsageError(f"--k must be >= 2 for fusion accounting, got {k}")
    mode = resolved["mode"]
    if mode not in FUSION_MODES:
        raise UsageError(f"count-params reports fusion overhead; --mode must be one of {FUSION_MODES}")

    report = count_fusion_params(k, channels)
    backbone = 0
    cin = resolved["in_channels"]
    for c, n_convs in zip(channels, convs):
        for _ in range(n_convs):
            backbone += c * 9 * cin + c
            cin = c
    if mode == "nddr":
        fusion_total = report.total_with_bias
        print(f"fusion 1x1 projections, K={k}, stages {channels}:")
        print(f"  per task (weights only)   {report.per_task:>12,}")
        print(f"  per task (with bias)      {report.per_task_with_bias:>12,}")
        print(f"  total (weights only)      {report.total:>12,}")
        print(f"  total (with bias)         {report.total_with_bias:>12,}")
        print(f"  batch-norm scale/shift    {report.bn_affine:>12,}")
    elif mode == "cross-stitch":
        fusion_total = len(channels) * k * k
        print(f"cross-stitch mixing, K={k}, {len(channels)} stages: {fusion_total:,} parameters")
    else:
        s = resolved["sluice_subspaces"]
        fusion_total = len(channels) * (k * s) ** 2
        print(f"sluice mixing, K={k}, S={s}, {len(channels)} stages: {fusion_total:,} parameters")
    print(f"  conv backbone, one branch {backbone:>12,}")
    print(f"  conv backbone, {k} branches{k * backbone:>12,}")
    print(f"  fusion overhead           {100.0 * fusion_total / (k * backbone):.2f}% of {k}-branch conv parameters")
    if resolved["out"]:
        _write_run_json(resolved["out"], "count-params", resolved)
    return 0


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "count-params": cmd_count_params,
}


def _add_options(sub: argparse.ArgumentParser, spec: dict) -> None:
    sub.add_argument("--config", default=None, help="key = value file; flags override it")
    for key, (default, tag) in spec.items():
        flag = "--" + key.replace("_", "-")
        if tag == "bool":
            sub.add_argument(flag, dest=key, action="store_const", const=True, default=None)
        elif tag == "paths":
            sub.add_argument(flag, dest=key, default=None,
                             help="';'-separated paths" + ("" if isinstance(default, _Required) else f" (default {default})"))
        else:
            helptext = "(required)" if isinstance(default, _Required) else f"(default {default})"
            sub.add_argument(flag, dest=key, type=str, default=None, help=helptext)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nddr", description="multi-task CNN fusion trainer")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, spec in _SPECS.items():
        _add_options(subs.add_parser(name), spec)
    replay = subs.add_parser("replay", help="re-run a command from its run.json echo")
    replay.add_argument("run_json")
    replay.add_argument("--out", default=None, help="redirect output directory")
    return parser


def _coerce_cli(command: str, args: argparse.Namespace) -> dict:
    spec = _SPECS[command]
    out = {}
    for key, (_default, tag) in spec.items():
        raw = getattr(args, key, None)
        if raw is None:
            continue
        out[key] = raw if tag == "bool" else _convert(key, raw, tag) if isinstance(raw, str) else raw
    return out


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if args.command == "replay":
            path = Path(args.run_json)
            if not path.is_file():
                raise UsageError(f"run.json not found: {args.run_json}")
            try:
                payload = json.loads(path.read_text(encoding="utf-8"))
                command = payload["command"]
                resolved = payload["config"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise UsageError(f"'{args.run_json}' is not a run.json echo") from exc
            if command not in _DISPATCH:
                raise UsageError(f"run.json names unknown command '{command}'")
            if args.out is not None:
                resolved["out"] = args.out
            return _DISPATCH[command](resolved)
        resolved = _resolve(args.command, _coerce_cli(args.command, args), args.config)
        return _DISPATCH[args.command](resolved)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, LoadError, TrainingDiverged, NonFiniteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
