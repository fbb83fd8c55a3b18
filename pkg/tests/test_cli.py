import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from mcdenoise import volio
from mcdenoise.cli import read_manifest
from mcdenoise.model import ScaledConfig, build_proposed, save_checkpoint


def run_cli(*args, check=True):
    proc = subprocess.run(
        [sys.executable, "-m", "mcdenoise", *map(str, args)],
        capture_output=True,
        text=True,
    )
    if check and proc.returncode != 0:
        raise AssertionError(f"cli failed ({proc.returncode}): {proc.stderr}")
    return proc


def tree_digest(root, skip=("run_manifest.txt",)):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            if name in skip:
                continue
            h.update(name.encode())
            with open(os.path.join(dirpath, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# -- phantom ---------------------------------------------------------------------


def test_phantom_counts_and_manifest(tmp_path):
    out = tmp_path / "ds"
    run_cli("phantom", "--cases", 2, "--pairs", 2, "--extents", "32x32x16",
            "--seed", 7, "--out", out)
    files = sorted(os.listdir(out))
    assert "run_manifest.txt" in files
    case_files = sorted(os.listdir(out / "case_000"))
    assert case_files == ["body.dmsk", "clean.dvol", "manifest.txt",
                          "noisy_00.dvol", "noisy_01.dvol", "ptv.dmsk"]
    manifest = read_manifest(out / "run_manifest.txt")
    assert manifest["command"] == "phantom"
    assert manifest["seed"] == "7"
    assert "wall_time_s" in manifest


def test_phantom_deterministic(tmp_path):
    for name in ("a", "b"):
        run_cli("phantom", "--cases", 2, "--pairs", 2, "--extents", "16x16x8",
                "--seed", 3, "--out", tmp_path / name)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_phantom_divisibility_warning(tmp_path):
    proc = run_cli("phantom", "--cases", 1, "--pairs", 2, "--extents", "33x32x16",
                   "--seed", 0, "--out", tmp_path / "odd")
    assert "warning" in proc.stderr
    assert "num_down" in proc.stderr


def test_phantom_requires_out(tmp_path):
    proc = run_cli("phantom", "--cases", 1, check=False)
    assert proc.returncode == 2


def test_phantom_replay_from_manifest(tmp_path):
    first = tmp_path / "first"
    run_cli("phantom", "--cases", 2, "--pairs", 2, "--extents", "16x16x8",
            "--histories", 50, "--seed", 21, "--out", first)
    manifest = read_manifest(first / "run_manifest.txt")
    replay = tmp_path / "replay"
    run_cli(
        manifest["command"],
        "--cases", manifest["cases"],
        "--pairs", manifest["pairs"],
        "--extents", manifest["extents"],
        "--histories", manifest["histories"],
        "--seed", manifest["seed"],
        "--out", replay,
    )
    assert tree_digest(first) == tree_digest(replay)


# -- analyze -----------------------------------------------------------------------


def test_analyze_reference_totals(tmp_path):
    proc = run_cli("analyze", "--model", "proposed", "--extents", "256x256x64",
                   "--out", tmp_path / "rep")
    gflops = None
    for line in proc.stdout.splitlines():
        if "GFLOPs" in line:
            gflops = float(line.split(":")[1].split("GFLOPs")[0])
    assert gflops is not None
    assert 46.75 <= gflops <= 63.25
    csv = (tmp_path / "rep" / "flops.csv").read_text()
    assert csv.splitlines()[0].startswith("layer_id,")
    assert (tmp_path / "rep" / "flops.txt").exists()


def test_analyze_unet_default_depth():
    proc = run_cli("analyze", "--model", "unet-baseline", "--extents", "256x256x64")
    assert "unet-baseline" in proc.stdout
    gflops = [l for l in proc.stdout.splitlines() if "GFLOPs" in l][0]
    value = float(gflops.split(":")[1].split("GFLOPs")[0])
    assert 787.0 <= value <= 1065.0


def test_analyze_bad_extents_exit_code():
    proc = run_cli("analyze", "--extents", "100x100x17", check=False)
    assert proc.returncode == 3
    assert "error" in proc.stderr


# -- denoise ------------------------------------------------------------------------


def test_denoise_zero_checkpoint_zero_volume(tmp_path):
    net = build_proposed(ScaledConfig(4, 2, (16, 16, 8)), seed=0)
    for _, _, t in net.parameters():
        t.data[...] = 0.0
    ckpt = tmp_path / "zero.ddpk"
    save_checkpoint(net, ckpt)
    vol = tmp_path / "zero.dvol"
    volio.write_dvol(vol, np.zeros((16, 16, 8)), (2.34, 2.34, 3.0), 100, 1)
    out = tmp_path / "out"
    run_cli("denoise", "--checkpoint", ckpt, "--input", vol, "--out", out)
    values, _, _, _ = volio.read_dvol(out / "denoised.dvol")
    assert np.all(values == 0.0)
    for view in ("axial", "coronal", "sagittal"):
        assert (out / f"denoised_{view}.pgm").exists()
        assert (out / f"input_{view}.pgm").exists()


def test_denoise_missing_checkpoint_is_data_error(tmp_path):
    vol = tmp_path / "v.dvol"
    volio.write_dvol(vol, np.zeros((16, 16, 8)), (1, 1, 1), 0, 0)
    proc = run_cli("denoise", "--checkpoint", tmp_path / "nope.ddpk", "--input", vol,
                   "--out", tmp_path / "o", check=False)
    assert proc.returncode == 3


# -- bench ---------------------------------------------------------------------------


def test_bench_csv_output(tmp_path):
    proc = run_cli("bench", "--extents", "16x16x8", "--channels", 8, "--repeats", 12,
                   "--out", tmp_path / "bench")
    lines = (tmp_path / "bench" / "bench.csv").read_text().strip().splitlines()
    assert lines[0] == "module,median_ms,iqr_ms,repeats,workers"
    assert len(lines) == 3
    assert all(line.split(",")[3] == "12" for line in lines[1:])
    assert "regular3d" in proc.stdout and "decoupled" in proc.stdout


# -- help and usage -----------------------------------------------------------------------


@pytest.mark.parametrize("command", ["phantom", "train", "denoise", "eval", "analyze", "bench"])
def test_help_documents_flags(command):
    proc = run_cli(command, "--help")
    assert "--" in proc.stdout
    assert proc.returncode == 0


def test_unknown_command_usage_error():
    proc = run_cli("frobnicate", check=False)
    assert proc.returncode == 2


# -- train / eval wiring (tiny run) ---------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    train_ds = root / "train_ds"
    test_ds = root / "test_ds"
    run_cli("phantom", "--cases", 2, "--pairs", 2, "--extents", "16x16x8",
            "--histories", 100, "--seed", 1, "--out", train_ds)
    run_cli("phantom", "--cases", 1, "--pairs", 2, "--extents", "16x16x8",
            "--histories", 100, "--seed", 901, "--out", test_ds)
    run_dir = root / "run"
    run_cli("train", "--data", train_ds, "--out", run_dir, "--features", 4, "--down", 2,
            "--crop", "16x16x8", "--iterations", 60, "--seed", 2)
    return root, train_ds, test_ds, run_dir


def test_train_outputs(tiny_pipeline):
    root, train_ds, test_ds, run_dir = tiny_pipeline
    assert (run_dir / "checkpoint.ddpk").exists()
    loss = (run_dir / "loss.csv").read_text().splitlines()
    assert loss[0] == "step,loss"
    assert len(loss) == 1 + 60 // 50
    manifest = read_manifest(run_dir / "run_manifest.txt")
    assert manifest["command"] == "train"
    assert manifest["iterations"] == "60"


def test_train_does_not_mutate_inputs(tiny_pipeline, tmp_path):
    root, train_ds, _, _ = tiny_pipeline
    before = tree_digest(train_ds)
    run_cli("train", "--data", train_ds, "--out", tmp_path / "scratch", "--features", 4,
            "--down", 2, "--crop", "16x16x8", "--iterations", 10, "--seed", 0)
    assert tree_digest(train_ds) == before


def test_train_config_file_flag(tiny_pipeline, tmp_path):
    root, train_ds, _, _ = tiny_pipeline
    cfg_file = tmp_path / "train.cfg"
    cfg_file.write_text("iterations=50\nlr=2e-4\ncrop_extents=16x16x8\nseed=4\n")
    out = tmp_path / "out"
    run_cli("train", "--data", train_ds, "--out", out, "--features", 4, "--down", 2,
            "--config", cfg_file)
    manifest = read_manifest(out / "run_manifest.txt")
    assert manifest["iterations"] == "50"
    assert manifest["lr"] == "0.0002"
    # flags still win over the file
    out2 = tmp_path / "out2"
    run_cli("train", "--data", train_ds, "--out", out2, "--features", 4, "--down", 2,
            "--config", cfg_file, "--iterations", 20)
    assert read_manifest(out2 / "run_manifest.txt")["iterations"] == "20"


def test_train_rejects_unknown_config_key(tiny_pipeline, tmp_path):
    root, train_ds, _, _ = tiny_pipeline
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("warmup=100\n")
    proc = run_cli("train", "--data", train_ds, "--out", tmp_path / "o",
                   "--config", cfg_file, check=False)
    assert proc.returncode == 3
    assert "unknown key" in proc.stderr


def test_train_reproducible(tiny_pipeline, tmp_path):
    root, train_ds, _, run_dir = tiny_pipeline
    rerun = tmp_path / "rerun"
    run_cli("train", "--data", train_ds, "--out", rerun, "--features", 4, "--down", 2,
            "--crop", "16x16x8", "--iterations", 60, "--seed", 2)
    assert (rerun / "checkpoint.ddpk").read_bytes() == (run_dir / "checkpoint.ddpk").read_bytes()
    assert (rerun / "loss.csv").read_text() == (run_dir / "loss.csv").read_text()


def test_eval_csv_structure(tiny_pipeline, tmp_path):
    root, _, test_ds, run_dir = tiny_pipeline
    out = tmp_path / "eval"
    run_cli("eval", "--checkpoint", run_dir / "checkpoint.ddpk", "--data", test_ds,
            "--realizations", 2, "--histories", 100, "--seed", 5, "--out", out)
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["case", "realization", "source"]
    assert "mse" in header and "d95" in header and "dice_mean" in header
    # one noisy and one denoised row per realization per case
    assert len(lines) - 1 == 2 * 2
    assert (out / "summary.txt").exists()
    assert any(name.endswith(".pgm") for name in os.listdir(out))


def test_eval_reproducible(tiny_pipeline, tmp_path):
    root, _, test_ds, run_dir = tiny_pipeline
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        run_cli("eval", "--checkpoint", run_dir / "checkpoint.ddpk", "--data", test_ds,
                "--realizations", 2, "--histories", 100, "--seed", 5, "--out", out)
    assert (a / "metrics.csv").read_text() == (b / "metrics.csv").read_text()
    assert tree_digest(a) == tree_digest(b)
