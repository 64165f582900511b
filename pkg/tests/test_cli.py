"""End-to-end command-line flows on miniature datasets."""

import json

import numpy as np
import pytest

from nddr.cli import main
from nddr.data import load_dataset


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    """A 6-sample train / 4-sample eval shapes dataset pair."""
    root = tmp_path_factory.mktemp("data")
    train = root / "train"
    evald = root / "eval"
    assert main(["gen-data", "--generator", "shapes", "--n", "6", "--hw", "16",
                 "--seed", "0", "--out", str(train)]) == 0
    assert main(["gen-data", "--generator", "shapes", "--n", "4", "--hw", "16",
                 "--seed", "1", "--split", "eval", "--out", str(evald)]) == 0
    return train, evald


def train_args(data_dir, out, extra=()):
    return ["train", "--data", str(data_dir), "--mode", "nddr", "--steps", "2",
            "--batch-size", "4", "--channels", "4,4", "--seed", "0",
            "--out", str(out), *extra]


# -- gen-data -----------------------------------------------------------------


def test_gen_data_writes_dataset_and_echo(ds, capsys):
    train, _ = ds
    out = capsys.readouterr()
    assert (train / "manifest.txt").is_file()
    echo = json.loads((train / "run.json").read_text())
    assert echo["command"] == "gen-data"
    assert echo["config"]["n"] == 6 and echo["config"]["hw"] == 16
    loaded = load_dataset(train)
    assert loaded.n == 6 and loaded.hw == 16


def test_gen_data_attr(tmp_path, capsys):
    assert main(["gen-data", "--generator", "attr", "--n", "3", "--hw", "16",
                 "--out", str(tmp_path / "a")]) == 0
    assert "attr dataset" in capsys.readouterr().out
    assert load_dataset(tmp_path / "a").generator == "attr"


def test_gen_data_bad_generator(tmp_path, capsys):
    assert main(["gen-data", "--generator", "cubes", "--n", "2",
                 "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_gen_data_missing_required(tmp_path, capsys):
    assert main(["gen-data", "--generator", "shapes", "--out", str(tmp_path / "x")]) == 2
    assert "--n" in capsys.readouterr().err


def test_gen_data_invalid_geometry(tmp_path, capsys):
    # hw too small for the generator: flag value problem, not a crash
    assert main(["gen-data", "--generator", "shapes", "--n", "2", "--hw", "8",
                 "--out", str(tmp_path / "x")]) == 2


# -- argument plumbing -----------------------------------------------------------


def test_bare_and_bogus_commands():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_bad_int_flag(tmp_path):
    assert main(["gen-data", "--generator", "shapes", "--n", "lots",
                 "--out", str(tmp_path / "x")]) == 2


def test_config_file_precedence(ds, tmp_path, capsys):
    train, _ = ds
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "steps = 1\nbatch-size = 4\nchannels = 4,4\nmode = nddr\n"
        f"data = {train}\nout = {tmp_path / 'from_file'}\n"
    )
    # file fills everything; the explicit flag overrides the file's steps
    assert main(["train", "--config", str(cfg), "--steps", "2",
                 "--out", str(tmp_path / "run")]) == 0
    echo = json.loads((tmp_path / "run" / "run.json").read_text())
    assert echo["config"]["steps"] == 2          # flag beat file
    assert echo["config"]["batch_size"] == 4     # file beat default (8)
    assert echo["config"]["momentum"] == 0.9     # untouched default


def test_config_file_unknown_key(ds, tmp_path, capsys):
    train, _ = ds
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp_factor = 9\n")
    assert main(["train", "--config", str(cfg), "--data", str(train), "--mode",
                 "nddr", "--out", str(tmp_path / "x")]) == 2
    assert "warp_factor" in capsys.readouterr().err


def test_config_file_missing(ds, tmp_path):
    train, _ = ds
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--data", str(train),
                 "--mode", "nddr", "--out", str(tmp_path / "x")]) == 2


# -- train / eval -----------------------------------------------------------------


def test_train_writes_artifacts(ds, tmp_path, capsys):
    train, evald = ds
    out = tmp_path / "run"
    rc = main(train_args(train, out, ["--eval-data", str(evald)]))
    text = capsys.readouterr().out
    assert rc == 0
    assert "trained nddr for 2 steps" in text
    assert "task0 [pixel-class]" in text and "task1 [pixel-direction]" in text
    for name in ("checkpoint.bin", "metrics.jsonl", "summary.csv", "run.json"):
        assert (out / name).is_file(), name


def test_train_single_needs_task_flag(ds, tmp_path, capsys):
    train, _ = ds
    assert main(["train", "--data", str(train), "--mode", "single",
                 "--out", str(tmp_path / "x")]) == 2
    assert "--task" in capsys.readouterr().err


def test_train_single_task_prints_dataset_index(ds, tmp_path, capsys):
    train, _ = ds
    rc = main(["train", "--data", str(train), "--mode", "single", "--task", "1",
               "--steps", "1", "--batch-size", "4", "--channels", "4,4",
               "--out", str(tmp_path / "s1")])
    text = capsys.readouterr().out
    assert rc == 0
    assert "task1 [pixel-direction]" in text
    assert "task0" not in text


def test_train_missing_dataset(tmp_path, capsys):
    assert main(train_args(tmp_path / "absent", tmp_path / "x")) == 1


def test_train_wrong_loss_weight_count(ds, tmp_path, capsys):
    train, _ = ds
    assert main(train_args(train, tmp_path / "x", ["--loss-weights", "1.0"])) == 2
    assert "loss weights" in capsys.readouterr().err


def test_eval_matches_training_final(ds, tmp_path, capsys):
    train, evald = ds
    out = tmp_path / "run"
    assert main(train_args(train, out, ["--eval-data", str(evald)])) == 0
    train_text = capsys.readouterr().out
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
               "--data", str(evald), "--out", str(tmp_path / "ev")])
    eval_text = capsys.readouterr().out
    assert rc == 0
    # the eval line for task0 reproduces the training-time eval numbers
    final_line = [l for l in train_text.splitlines() if "task0" in l and "eval:" in l][0]
    eval_line = [l for l in eval_text.splitlines() if l.strip().startswith("task0")][0]
    for key in ("loss=", "pixel_acc=", "miou="):
        want = final_line.split(key)[1].split(",")[0].strip()
        got = eval_line.split(key)[1].split(",")[0].strip()
        assert want == got, key
    assert (tmp_path / "ev" / "metrics.jsonl").is_file()
    assert (tmp_path / "ev" / "run.json").is_file()


def test_eval_bad_checkpoint_path(ds, tmp_path):
    _, evald = ds
    assert main(["eval", "--checkpoint", str(tmp_path / "no.bin"), "--data", str(evald)]) == 1


def test_eval_rejects_garbage_file(ds, tmp_path):
    _, evald = ds
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk), "--data", str(evald)]) == 1


# -- pretrain ----------------------------------------------------------------------


def single_run(train, tmp_path, task):
    out = tmp_path / f"single{task}"
    rc = main(["train", "--data", str(train), "--mode", "single", "--task", str(task),
               "--steps", "1", "--batch-size", "4", "--channels", "4,4",
               "--out", str(out)])
    assert rc == 0
    return out / "checkpoint.bin"


def test_train_warm_start(ds, tmp_path, capsys):
    train, _ = ds
    c0 = single_run(train, tmp_path, 0)
    c1 = single_run(train, tmp_path, 1)
    capsys.readouterr()
    rc = main(train_args(train, tmp_path / "warm", ["--pretrain", f"{c0};{c1}"]))
    assert rc == 0
    # no from-scratch nag when warm-started
    assert "from scratch" not in capsys.readouterr().out


def test_train_warm_start_wrong_count(ds, tmp_path, capsys):
    train, _ = ds
    c0 = single_run(train, tmp_path, 0)
    capsys.readouterr()
    assert main(train_args(train, tmp_path / "warm2", ["--pretrain", str(c0)])) == 2


def test_train_warm_start_wrong_shape(ds, tmp_path, capsys):
    train, _ = ds
    c0 = single_run(train, tmp_path, 0)
    capsys.readouterr()
    # singles trained at channels 4,4; target graph at 4,8 cannot accept them
    rc = main(["train", "--data", str(train), "--mode", "nddr", "--steps", "1",
               "--batch-size", "4", "--channels", "4,8", "--pretrain", f"{c0};{c0}",
               "--out", str(tmp_path / "warm3")])
    assert rc == 1
    assert "shape" in capsys.readouterr().err


# -- replay ----------------------------------------------------------------------


def test_replay_is_bit_identical(ds, tmp_path, capsys):
    train, evald = ds
    out = tmp_path / "orig"
    assert main(train_args(train, out, ["--eval-data", str(evald)])) == 0
    redo = tmp_path / "redo"
    assert main(["replay", str(out / "run.json"), "--out", str(redo)]) == 0
    capsys.readouterr()
    a = (out / "metrics.jsonl").read_bytes()
    b = (redo / "metrics.jsonl").read_bytes()
    assert a == b
    assert (out / "checkpoint.bin").read_bytes() == (redo / "checkpoint.bin").read_bytes()


def test_replay_missing_and_malformed(tmp_path, capsys):
    assert main(["replay", str(tmp_path / "none.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{\"not\": \"a run echo\"}")
    assert main(["replay", str(bad)]) == 2
    weird = tmp_path / "weird.json"
    weird.write_text(json.dumps({"command": "launch", "config": {}}))
    assert main(["replay", str(weird)]) == 2


# -- count-params ------------------------------------------------------------------


def test_count_params_reference_network(capsys):
    assert main(["count-params"]) == 0
    text = capsys.readouterr().out
    assert "1,220,608" in text
    assert "overhead" in text


def test_count_params_validation(capsys):
    assert main(["count-params", "--mode", "single"]) == 2
    assert main(["count-params", "--k", "1"]) == 2
    assert main(["count-params", "--channels", "64,128", "--convs", "2"]) == 2


def test_count_params_scalar_modes(capsys):
    assert main(["count-params", "--mode", "cross-stitch", "--k", "2",
                 "--channels", "8,16"]) == 0
    out = capsys.readouterr().out
    assert "8" in out  # 2 stages x 2x2 mix
    assert main(["count-params", "--mode", "sluice", "--k", "2",
                 "--channels", "8,16", "--sluice-subspaces", "2"]) == 0


# -- gradcheck ----------------------------------------------------------------------


def test_gradcheck_selected_ops(capsys, tmp_path):
    rc = main(["gradcheck", "--ops", "conv1x1,softmax_cross_entropy", "--trials", "2",
               "--out", str(tmp_path / "gc")])
    text = capsys.readouterr().out
    assert rc == 0
    assert "conv1x1" in text and "ok" in text
    blob = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
    assert set(blob) == {"conv1x1", "softmax_cross_entropy"}
    assert all(v < 1e-4 for v in blob.values())


def test_gradcheck_unknown_op(capsys):
    assert main(["gradcheck", "--ops", "warp_core"]) == 2
    assert "warp_core" in capsys.readouterr().err


# -- ablate -------------------------------------------------------------------------


def test_ablate_init_axis(ds, tmp_path, capsys):
    train, _ = ds
    out = tmp_path / "ab"
    rc = main(["ablate", "--data", str(train), "--axis", "init",
               "--grid", "diag:1,0;xavier", "--steps", "1", "--batch-size", "4",
               "--channels", "4,4", "--repeats", "2", "--out", str(out)])
    text = capsys.readouterr().out
    assert rc == 0
    assert "2 points x 2 repeats" in text
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("point,repeats")
    assert "task0/miou_mean" in lines[0] and "task1/mean_angle_std" in lines[0]
    labels = [l.split(",")[0] for l in lines[1:]]
    assert labels == ["diag_1_0", "xavier"]
    assert all(l.split(",")[1] == "2" for l in lines[1:])
    assert (out / "diag_1_0" / "rep0" / "checkpoint.bin").is_file()
    assert (out / "xavier" / "rep1" / "metrics.jsonl").is_file()


def test_ablate_bad_axis(ds, tmp_path):
    train, _ = ds
    assert main(["ablate", "--data", str(train), "--axis", "phase",
                 "--out", str(tmp_path / "x")]) == 2


def test_ablate_lr_scale_guard(ds, tmp_path, capsys):
    train, _ = ds
    assert main(["ablate", "--data", str(train), "--axis", "lr-scale",
                 "--grid", "0.5,10", "--out", str(tmp_path / "x")]) == 2
    assert ">= 1" in capsys.readouterr().err
