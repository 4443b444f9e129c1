import json
import os
import struct

import numpy as np
import pytest

from weightgen import cli, factorfile


def _fake_fashion_root(tmp_path, n_train=48, n_test=24, seed=0):
    """Write a tiny FashionMNIST-shaped IDX file set and return its dir."""
    root = os.path.join(tmp_path, "data")
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", n_train),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", n_test),
    }
    for img_name, lbl_name, n in names.values():
        images = rng.integers(0, 256, (n, 28, 28)).astype(np.uint8)
        labels = (rng.integers(0, 10, n)).astype(np.uint8)
        with open(os.path.join(root, img_name), "wb") as fh:
            fh.write(struct.pack(">iiii", 2051, n, 28, 28))
            fh.write(images.tobytes())
        with open(os.path.join(root, lbl_name), "wb") as fh:
            fh.write(struct.pack(">ii", 2049, n))
            fh.write(labels.tobytes())
    return root


_TRAIN_FLAGS = [
    "--arch", "C4K3S2-AvgPool2-FC10",
    "--epochs", "1",
    "--batch-size", "16",
    "--init", "random",
]


def test_cost_reports_reference_numbers(tmp_path, capsys):
    out = os.path.join(tmp_path, "cost")
    assert cli.main(["cost", "--out", out]) == 0
    text = capsys.readouterr().out
    assert "545.2 ps" in text
    assert "7.9 us" in text
    report = json.load(open(os.path.join(out, "cost.json")))
    layer = report["layers"][0]
    assert abs(layer["gen_latency"] - 545.2e-12) < 0.5e-12
    assert abs(layer["load_saved"] - 7.9e-6) < 0.1e-6
    assert abs(layer["r_m"] - 0.0273) < 0.0002
    snapshot = json.load(open(os.path.join(out, "config.json")))
    assert snapshot["command"] == "cost"


def test_train_twice_gives_bitwise_identical_metrics(tmp_path):
    root = _fake_fashion_root(tmp_path)
    out_a = os.path.join(tmp_path, "a")
    out_b = os.path.join(tmp_path, "b")
    args = ["train", "--data", root, "--seed", "7", *_TRAIN_FLAGS]
    assert cli.main(args + ["--out", out_a]) == 0
    assert cli.main(args + ["--out", out_b]) == 0
    metrics_a = open(os.path.join(out_a, "metrics.csv"), "rb").read()
    metrics_b = open(os.path.join(out_b, "metrics.csv"), "rb").read()
    assert metrics_a == metrics_b
    header = metrics_a.decode().splitlines()[0]
    assert header == "epoch,lr,loss_kd,loss_ort,train_acc,test_acc"
    assert os.path.exists(os.path.join(out_a, "checkpoint.npz"))


def test_snapshot_round_trip_reproduces_outputs(tmp_path):
    root = _fake_fashion_root(tmp_path)
    out_a = os.path.join(tmp_path, "a")
    out_b = os.path.join(tmp_path, "b")
    assert cli.main([
        "train", "--data", root, "--seed", "3", "--generated", "0",
        "--bi", "1", "--bc", "2", "--init-iters", "50", *_TRAIN_FLAGS,
        "--out", out_a,
    ]) == 0
    snapshot_path = os.path.join(out_a, "config.json")
    snapshot = json.load(open(snapshot_path))
    assert snapshot["seed"] == 3
    assert snapshot["generated"] == [0]
    assert cli.main([
        "train", "--config", snapshot_path, "--out", out_b,
    ]) == 0
    assert (
        open(os.path.join(out_a, "metrics.csv"), "rb").read()
        == open(os.path.join(out_b, "metrics.csv"), "rb").read()
    )


def test_flags_override_config_file(tmp_path):
    root = _fake_fashion_root(tmp_path)
    cfg_path = os.path.join(tmp_path, "run.json")
    with open(cfg_path, "w") as fh:
        json.dump(
            {
                "arch": "C4K3S2-AvgPool2-FC10",
                "epochs": 1,
                "batch_size": 16,
                "init": "random",
                "seed": 1,
                "data": root,
            },
            fh,
        )
    out = os.path.join(tmp_path, "o")
    assert cli.main(["train", "--config", cfg_path, "--seed", "2", "--out", out]) == 0
    snapshot = json.load(open(os.path.join(out, "config.json")))
    assert snapshot["seed"] == 2
    assert snapshot["epochs"] == 1


def test_unknown_config_field_is_named(tmp_path, capsys):
    cfg_path = os.path.join(tmp_path, "bad.json")
    with open(cfg_path, "w") as fh:
        json.dump({"epoch_count": 3}, fh)
    code = cli.main(["train", "--config", cfg_path, "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "epoch_count" in err


def test_missing_out_and_missing_data_fail_typed(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(cli.DATA_ENV_VAR, raising=False)
    assert cli.main(["train"]) == 2
    assert "out" in capsys.readouterr().err
    assert cli.main(["train", "--out", str(tmp_path)]) == 2
    assert "WEIGHTGEN_DATA" in capsys.readouterr().err


def test_explore_one_by_one_grid_writes_single_row(tmp_path, capsys):
    root = _fake_fashion_root(tmp_path)
    out = os.path.join(tmp_path, "grid")
    assert cli.main([
        "explore", "--data", root, "--generated", "0", "--seed", "5",
        "--bi-list", "1", "--bc-list", "2", *_TRAIN_FLAGS, "--out", out,
    ]) == 0
    lines = open(os.path.join(out, "grid.csv")).read().splitlines()
    assert lines[0] == "B_i,B_c,q_b,q_u,q_v,r,r_m,acc"
    assert len(lines) == 2
    payload = json.load(open(os.path.join(out, "grid.json")))
    assert len(payload["points"]) == 1
    assert payload["pareto_front"]
    assert "pareto" in capsys.readouterr().out


def test_explore_requires_grid_lists(tmp_path, capsys):
    root = _fake_fashion_root(tmp_path)
    code = cli.main([
        "explore", "--data", root, "--generated", "0",
        *_TRAIN_FLAGS, "--out", os.path.join(tmp_path, "g"),
    ])
    assert code == 2
    assert "bi-list" in capsys.readouterr().err


def test_bad_bits_list_is_rejected(tmp_path, capsys):
    root = _fake_fashion_root(tmp_path)
    code = cli.main([
        "explore", "--data", root, "--generated", "0",
        "--bi-list", "1", "--bc-list", "2", "--bits-list", "4,4",
        *_TRAIN_FLAGS, "--out", os.path.join(tmp_path, "g"),
    ])
    assert code == 2
    assert "bit_settings" in capsys.readouterr().err


def _train_dense_checkpoint(tmp_path, root):
    out = os.path.join(tmp_path, "teacher")
    assert cli.main([
        "train", "--data", root, "--seed", "11", *_TRAIN_FLAGS, "--out", out,
    ]) == 0
    return os.path.join(out, "checkpoint.npz")


def test_init_writes_factors_and_residual_report(tmp_path, capsys):
    root = _fake_fashion_root(tmp_path)
    ckpt = _train_dense_checkpoint(tmp_path, root)
    out = os.path.join(tmp_path, "init")
    assert cli.main([
        "init", "--teacher", ckpt, "--layer", "0",
        "--bi", "1", "--bc", "2", "--init-iters", "120", "--out", out,
    ]) == 0
    report = json.load(open(os.path.join(out, "init_report.json")))
    assert report["l2_residual"] >= 0.0
    assert report["svd_residual"] >= 0.0
    assert report["chosen"] in ("l2", "svd")
    assert 0.0 < report["r"] <= 1.0
    factors = factorfile.load_factors(os.path.join(out, "factors.isgw"))
    assert factors.plan.c_out == 4 and factors.plan.n_cross == 2
    text = capsys.readouterr().out
    assert "l2 residual" in text


def test_init_layer_index_out_of_range(tmp_path, capsys):
    root = _fake_fashion_root(tmp_path)
    ckpt = _train_dense_checkpoint(tmp_path, root)
    code = cli.main([
        "init", "--teacher", ckpt, "--layer", "9",
        "--bi", "1", "--bc", "2", "--out", os.path.join(tmp_path, "x"),
    ])
    assert code == 2
    assert "layer" in capsys.readouterr().err


def test_analyze_prints_per_layer_metrics(tmp_path, capsys):
    root = _fake_fashion_root(tmp_path)
    ckpt = _train_dense_checkpoint(tmp_path, root)
    out = os.path.join(tmp_path, "an")
    assert cli.main(["analyze", "--checkpoint", ckpt, "--out", out]) == 0
    text = capsys.readouterr().out
    assert "layer 0" in text and "cross=" in text
    rows = json.load(open(os.path.join(out, "correlations.json")))
    assert rows[0]["c_out"] == 4
    assert 0.0 < rows[0]["cross"] <= 1.0


def test_analyze_requires_checkpoint(capsys):
    assert cli.main(["analyze"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_train_with_teacher_distills(tmp_path):
    root = _fake_fashion_root(tmp_path)
    ckpt = _train_dense_checkpoint(tmp_path, root)
    out = os.path.join(tmp_path, "student")
    assert cli.main([
        "train", "--data", root, "--seed", "13", "--generated", "0",
        "--bi", "1", "--bc", "2", "--init-iters", "50",
        "--teacher", ckpt, *_TRAIN_FLAGS[:-2], "--init", "l2", "--out", out,
    ]) == 0
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    snapshot = json.load(open(os.path.join(out, "config.json")))
    assert snapshot["teacher"] == ckpt
