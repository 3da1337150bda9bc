"""Command-line interface: argument handling, exit codes, and the
gen / train / eval pipeline run end to end through main()."""

import json
import logging
import math
import os
import subprocess
import sys

import numpy as np
import pytest

import mspt.balltree as bt
import mspt.data as da
from mspt.cli import main


def run_cli(argv, capsys):
    rc = main(argv)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


# ---------------------------------------------------------------------------
# Usage errors
# ---------------------------------------------------------------------------


def test_no_arguments_is_usage_error(capsys):
    rc, _out, err = run_cli([], capsys)
    assert rc == 1
    assert "usage:" in err


def test_unknown_subcommand_is_usage_error(capsys):
    rc, _out, _err = run_cli(["frobnicate"], capsys)
    assert rc == 1


def test_unknown_flag_is_usage_error(capsys):
    rc, _out, err = run_cli(["gradcheck", "--wat"], capsys)
    assert rc == 1
    assert "--wat" in err


def test_bad_precision_value_is_usage_error(capsys):
    rc, _out, _err = run_cli(["--precision", "f16", "gradcheck"], capsys)
    assert rc == 1


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "partition" in capsys.readouterr().out


def test_thread_flag_rejects_nonpositive(capsys):
    rc, _out, _err = run_cli(["--threads", "0", "gradcheck"], capsys)
    assert rc == 1


def test_thread_flag_sets_kernel_env(capsys, monkeypatch, tmp_path):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        monkeypatch.setenv(var, "sentinel")
    coords = tmp_path / "pts.npy"
    np.save(coords, np.random.default_rng(0).standard_normal((8, 2)))
    rc, _out, _err = run_cli(
        ["--threads", "3", "partition", "--coords", str(coords), "--patches", "2"],
        capsys,
    )
    assert rc == 0
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        assert os.environ[var] == "3"


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------


def test_partition_npy_emits_layout_json(capsys, tmp_path):
    rng = np.random.default_rng(7)
    coords = rng.standard_normal((37, 3))
    path = tmp_path / "pts.npy"
    np.save(path, coords)
    rc, out, _err = run_cli(
        ["partition", "--coords", str(path), "--patches", "4"], capsys
    )
    assert rc == 0
    doc = json.loads(out)
    assert set(doc) == {"n", "k", "l", "perm", "valid"}
    assert (doc["n"], doc["k"], doc["l"]) == (37, 4, 10)
    assert sorted(doc["perm"]) == list(range(37))
    assert len(doc["valid"]) == doc["k"] * doc["l"]
    assert sum(doc["valid"]) == doc["n"]
    # Matches the library partitioning of the same cloud.
    tree = bt.build_tree(coords, leaf_capacity=10)
    layout = bt.make_patches(bt.leaf_order(tree), 37, 4)
    assert doc["perm"] == layout.perm.tolist()


def test_partition_reads_csv(capsys, tmp_path):
    coords = np.random.default_rng(1).standard_normal((12, 2))
    path = tmp_path / "pts.csv"
    np.savetxt(path, coords, delimiter=",")
    rc, out, _err = run_cli(
        ["partition", "--coords", str(path), "--patches", "3"], capsys
    )
    assert rc == 0
    assert json.loads(out)["n"] == 12


def test_partition_missing_file_is_data_error(capsys, tmp_path):
    rc, _out, _err = run_cli(
        ["partition", "--coords", str(tmp_path / "nope.npy"), "--patches", "4"],
        capsys,
    )
    assert rc == 2


def test_partition_unparseable_file_is_data_error(capsys, tmp_path):
    path = tmp_path / "pts.csv"
    path.write_text("not,numbers\nat,all\n")
    rc, _out, _err = run_cli(
        ["partition", "--coords", str(path), "--patches", "1"], capsys
    )
    assert rc == 2


def test_partition_impossible_patch_count_is_usage_error(capsys, tmp_path):
    path = tmp_path / "pts.npy"
    np.save(path, np.random.default_rng(0).standard_normal((10, 2)))
    rc, _out, _err = run_cli(
        ["partition", "--coords", str(path), "--patches", "200"], capsys
    )
    assert rc == 1


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def test_gen_darcy_writes_readable_dataset(capsys, tmp_path):
    out_dir = tmp_path / "ds"
    rc, out, _err = run_cli(
        ["gen", "--task", "darcy", "--n-samples", "3", "--grid", "5x5",
         "--seed", "3", "--out", str(out_dir)],
        capsys,
    )
    assert rc == 0
    assert json.loads(out) == {"written": 3, "out": str(out_dir)}
    samples, manifest = da.read_dataset(out_dir)
    assert len(samples) == 3
    assert samples[0].grid_shape == (5, 5)
    assert manifest["generator"]["parameters"]["grid"] == [5, 5]


def test_gen_is_deterministic_per_seed(capsys, tmp_path):
    args = ["gen", "--task", "darcy", "--n-samples", "2", "--grid", "5x5",
            "--seed", "9"]
    rc1, _o, _e = run_cli(args + ["--out", str(tmp_path / "a")], capsys)
    rc2, _o, _e = run_cli(args + ["--out", str(tmp_path / "b")], capsys)
    assert rc1 == rc2 == 0
    assert (tmp_path / "a" / "data.bin").read_bytes() == (
        tmp_path / "b" / "data.bin"
    ).read_bytes()


def test_gen_pointcloud_writes_readable_dataset(capsys, tmp_path):
    out_dir = tmp_path / "pc"
    rc, _out, _err = run_cli(
        ["gen", "--task", "pointcloud", "--n-samples", "2", "--points", "16",
         "--seed", "1", "--out", str(out_dir)],
        capsys,
    )
    assert rc == 0
    samples, _manifest = da.read_dataset(out_dir)
    assert len(samples) == 2
    assert samples[0].coords.shape == (16, 2)


def test_gen_darcy_without_grid_is_usage_error(capsys, tmp_path):
    rc, _out, _err = run_cli(
        ["gen", "--task", "darcy", "--n-samples", "2", "--out", str(tmp_path / "x")],
        capsys,
    )
    assert rc == 1


def test_gen_pointcloud_without_points_is_usage_error(capsys, tmp_path):
    rc, _out, _err = run_cli(
        ["gen", "--task", "pointcloud", "--n-samples", "2",
         "--out", str(tmp_path / "x")],
        capsys,
    )
    assert rc == 1


def test_gen_malformed_grid_is_usage_error(capsys, tmp_path):
    rc, _out, _err = run_cli(
        ["gen", "--task", "darcy", "--n-samples", "2", "--grid", "5by5",
         "--out", str(tmp_path / "x")],
        capsys,
    )
    assert rc == 1


# ---------------------------------------------------------------------------
# train / eval pipeline
# ---------------------------------------------------------------------------


TRAIN_CONFIG = {
    "model": {"in_dim": 3, "out_dim": 1, "n_blocks": 1, "f_dim": 8, "n_heads": 2,
              "k_patches": 2, "partitioning": "grid"},
    "train": {"epochs": 2, "batch_size": 4, "peak_lr": 1e-3, "final_lr": 1e-5,
              "val_count": 2, "seed": 0},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One gen -> train run shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data_dir = root / "ds"
    rc = main(["gen", "--task", "darcy", "--n-samples", "6", "--grid", "5x5",
               "--seed", "3", "--out", str(data_dir)])
    assert rc == 0
    config = root / "cfg.json"
    config.write_text(json.dumps(TRAIN_CONFIG))
    run_dir = root / "run"
    rc = main(["train", "--config", str(config), "--data", str(data_dir),
               "--out", str(run_dir)])
    assert rc == 0
    return {"root": root, "data": data_dir, "config": config, "run": run_dir}


def test_train_writes_log_and_checkpoint(pipeline, capsys):
    capsys.readouterr()
    assert (pipeline["run"] / "model.ckpt").exists()
    log_lines = (pipeline["run"] / "train_log.csv").read_text().splitlines()
    assert log_lines[0] == "epoch,train_loss,val_rel_l2,lr,wall_seconds"
    assert len(log_lines) == 1 + TRAIN_CONFIG["train"]["epochs"]


def test_train_reports_best_val_on_stdout(pipeline, capsys):
    capsys.readouterr()
    config = pipeline["root"] / "cfg2.json"
    config.write_text(json.dumps(TRAIN_CONFIG))
    rc, out, _err = run_cli(
        ["train", "--config", str(config), "--data", str(pipeline["data"]),
         "--out", str(pipeline["root"] / "run2")],
        capsys,
    )
    assert rc == 0
    doc = json.loads(out)
    assert {"best_val_rel_l2", "best_epoch", "checkpoint", "log"} <= set(doc)
    assert math.isfinite(doc["best_val_rel_l2"])


def test_eval_writes_per_sample_report(pipeline, capsys):
    capsys.readouterr()
    report = pipeline["root"] / "report.csv"
    rc, out, _err = run_cli(
        ["eval", "--checkpoint", str(pipeline["run"] / "model.ckpt"),
         "--data", str(pipeline["data"]), "--report", str(report)],
        capsys,
    )
    assert rc == 0
    doc = json.loads(out)
    assert doc["n_samples"] == 6
    lines = report.read_text().splitlines()
    assert lines[0] == "sample,rel_l2"
    assert len(lines) == 7
    errors = [float(line.split(",")[1]) for line in lines[1:]]
    assert doc["mean_rel_l2"] == pytest.approx(np.mean(errors))


def test_eval_missing_checkpoint_is_data_error(pipeline, capsys):
    capsys.readouterr()
    rc, _out, _err = run_cli(
        ["eval", "--checkpoint", str(pipeline["root"] / "nope.ckpt"),
         "--data", str(pipeline["data"]),
         "--report", str(pipeline["root"] / "r.csv")],
        capsys,
    )
    assert rc == 2


def test_train_invalid_json_config_is_data_error(pipeline, capsys):
    capsys.readouterr()
    config = pipeline["root"] / "broken.json"
    config.write_text("{not json")
    rc, _out, _err = run_cli(
        ["train", "--config", str(config), "--data", str(pipeline["data"]),
         "--out", str(pipeline["root"] / "x1")],
        capsys,
    )
    assert rc == 2


def test_train_config_missing_section_is_data_error(pipeline, capsys):
    capsys.readouterr()
    config = pipeline["root"] / "partial.json"
    config.write_text(json.dumps({"model": TRAIN_CONFIG["model"]}))
    rc, _out, _err = run_cli(
        ["train", "--config", str(config), "--data", str(pipeline["data"]),
         "--out", str(pipeline["root"] / "x2")],
        capsys,
    )
    assert rc == 2


def test_train_unknown_config_key_is_data_error(pipeline, capsys):
    capsys.readouterr()
    bad = json.loads(json.dumps(TRAIN_CONFIG))
    bad["train"]["momentum"] = 0.9
    config = pipeline["root"] / "unknown.json"
    config.write_text(json.dumps(bad))
    rc, _out, _err = run_cli(
        ["train", "--config", str(config), "--data", str(pipeline["data"]),
         "--out", str(pipeline["root"] / "x3")],
        capsys,
    )
    assert rc == 2


def test_train_seed_flag_overrides_config(pipeline, capsys):
    capsys.readouterr()
    config = pipeline["root"] / "cfg_seed.json"
    config.write_text(json.dumps(TRAIN_CONFIG))
    rc, _out, _err = run_cli(
        ["train", "--config", str(config), "--data", str(pipeline["data"]),
         "--out", str(pipeline["root"] / "s5"), "--seed", "5"],
        capsys,
    )
    assert rc == 0
    import mspt.model as mdl

    _cfg, _params, extra = mdl.load_checkpoint(pipeline["root"] / "s5" / "model.ckpt")
    assert extra["seed"] == 5


def test_diverging_train_is_numeric_failure(pipeline, capsys):
    capsys.readouterr()
    cfg = json.loads(json.dumps(TRAIN_CONFIG))
    cfg["train"].update(optimizer="lion", peak_lr=1e30, epochs=3)
    config = pipeline["root"] / "diverge.json"
    config.write_text(json.dumps(cfg))
    with np.errstate(over="ignore", invalid="ignore"):
        rc, _out, _err = run_cli(
            ["train", "--config", str(config), "--data", str(pipeline["data"]),
             "--out", str(pipeline["root"] / "x4")],
            capsys,
        )
    assert rc == 3


# ---------------------------------------------------------------------------
# gradcheck / bench
# ---------------------------------------------------------------------------


def test_gradcheck_passes_on_default_model(capsys):
    rc, out, _err = run_cli(["gradcheck", "--seed", "0"], capsys)
    assert rc == 0
    doc = json.loads(out)
    assert doc["passed"] is True
    assert doc["max_rel_err"] < 1e-5


def test_bench_writes_sweep_csv(capsys, tmp_path):
    csv_path = tmp_path / "sweep.csv"
    rc, out, _err = run_cli(
        ["bench", "--n", "64,128", "--k", "4", "--q", "1", "--f", "16",
         "--heads", "2", "--reps", "3", "--csv", str(csv_path)],
        capsys,
    )
    assert rc == 0
    assert json.loads(out)["rows"] == 2
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1].startswith("n,k,l,")
    assert len(lines) == 4


def test_bench_malformed_list_is_usage_error(capsys, tmp_path):
    rc, _out, _err = run_cli(
        ["bench", "--n", "64;128", "--k", "4", "--csv", str(tmp_path / "s.csv")],
        capsys,
    )
    assert rc == 1


# ---------------------------------------------------------------------------
# Logging contract
# ---------------------------------------------------------------------------


def test_resolved_config_is_logged_with_seed(caplog, capsys, tmp_path):
    coords = tmp_path / "pts.npy"
    np.save(coords, np.random.default_rng(0).standard_normal((8, 2)))
    with caplog.at_level(logging.INFO, logger="mspt.cli"):
        rc = main(["--seed", "11", "partition", "--coords", str(coords),
                   "--patches", "2"])
    capsys.readouterr()
    assert rc == 0
    resolved = [r for r in caplog.records if "resolved config" in r.message]
    assert len(resolved) == 1
    doc = json.loads(resolved[0].message.split("resolved config: ", 1)[1])
    assert doc["command"] == "partition"
    assert doc["seed"] == 11


# ---------------------------------------------------------------------------
# Console entry point
# ---------------------------------------------------------------------------


def test_console_script_exit_codes():
    env = dict(os.environ, PYTHONPATH="")
    bare = subprocess.run([sys.executable, "-m", "mspt.cli"], env=env,
                          capture_output=True)
    assert bare.returncode == 1
    helped = subprocess.run([sys.executable, "-m", "mspt.cli", "--help"], env=env,
                            capture_output=True)
    assert helped.returncode == 0
