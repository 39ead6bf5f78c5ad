import filecmp
import os

import numpy as np
import pytest

from relaynet import cli, data, model
from relaynet.tensor import read_rtn1


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph")
    assert run("phantom", "--out", out, "--count", 3, "--seed", 7, "--height", 64, "--width", 48,
               "--frames-per-subject", 3) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, phantom_dir):
    out = tmp_path_factory.mktemp("run")
    rc = run("train", "--data", phantom_dir, "--out", out, "--depth", 2, "--channels", 4,
             "--batch-size", 4, "--slice-width", 16, "--epochs", 2, "--checkpoint-every", 1,
             "--deterministic")
    assert rc == 0
    return out


def dirs_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors


def test_phantom_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("phantom", "--out", tmp_path / name, "--count", 4, "--seed", 7,
                   "--height", 64, "--width", 32) == 0
    assert dirs_identical(tmp_path / "a", tmp_path / "b")
    assert len(data.load_dataset(tmp_path / "a")) == 4


def test_phantom_defaults(tmp_path):
    assert run("phantom", "--out", tmp_path, "--count", 1) == 0
    (s,) = data.load_dataset(tmp_path)
    assert s.shape == (512, 256) and set(np.unique(s.labels)) == set(range(10))
    assert (tmp_path / cli.RUN_CONFIG).exists()


def test_phantom_fovea_flags(phantom_dir):
    scans = data.load_dataset(phantom_dir)
    assert [s.is_fovea for s in scans] == [False, True, False]
    assert {s.subject_id for s in scans} == {1}


def test_train_outputs(trained, phantom_dir):
    log = (trained / "train_log.tsv").read_text().strip().splitlines()
    per_epoch = data.count_batches(data.load_dataset(phantom_dir), 16, 4)
    assert len(log) - 1 == 2 * per_epoch
    assert (trained / "checkpoints" / "epoch_0001" / model.CHECKPOINT_MANIFEST).exists()
    assert (trained / "checkpoints" / "epoch_0002").is_dir()
    echo = (trained / cli.RUN_CONFIG).read_text()
    assert "depth=2" in echo and "lambda2=0.5" in echo and "deterministic=True" in echo
    assert len((trained / "epoch_log.tsv").read_text().strip().splitlines()) == 3


def test_one_epoch_log_length(tmp_path, phantom_dir):
    scans = data.load_dataset(phantom_dir)[:2]
    data.save_dataset(tmp_path / "two", scans)
    assert run("train", "--data", tmp_path / "two", "--out", tmp_path / "r", "--depth", 2,
               "--channels", 2, "--batch-size", 5, "--slice-width", 16, "--epochs", 1) == 0
    lines = (tmp_path / "r" / "train_log.tsv").read_text().strip().splitlines()
    assert len(lines) - 1 == -(-(2 * 3) // 5)


def test_segment_and_eval(tmp_path, trained, phantom_dir, capsys):
    seg = tmp_path / "seg"
    assert run("segment", "--checkpoint", trained / "checkpoint", "--data", phantom_dir,
               "--out", seg, "--save-probs") == 0
    out = capsys.readouterr().out
    assert out.count("palette") == 1 and out.count(" s\n") == 3
    labels = data.read_pgm(seg / "s001_f000_labels.pgm")
    assert labels.shape == (64, 48) and labels.max() <= 9
    assert (seg / "s001_f000_overlay.ppm").read_bytes().startswith(b"P6")
    assert (seg / "palette.tsv").read_text() == cli.palette_legend()
    probs = read_rtn1(seg / "s001_f001_probs.rtn")
    assert probs.shape == (1, 10, 64, 48)
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-5)

    ev = tmp_path / "ev"
    assert run("eval", "--pred", seg, "--truth", phantom_dir, "--out", ev, "--etdrs") == 0
    rows = (ev / "metrics.tsv").read_text().strip().splitlines()
    assert len(rows) == 1 + 24 + 9
    assert sum(r.startswith("etdrs_abs_diff") for r in rows) == 9
    assert (ev / "metrics.txt").exists() and (ev / cli.RUN_CONFIG).exists()


def test_eval_identity(tmp_path, phantom_dir):
    assert run("eval", "--pred", phantom_dir, "--truth", phantom_dir, "--out", tmp_path) == 0
    rows = [r.split("\t") for r in (tmp_path / "metrics.tsv").read_text().splitlines()[1:]]
    assert all(float(v) == 1.0 for m, _, v, _ in rows if m == "dice")
    assert all(float(v) == 0.0 for m, _, v, _ in rows if m != "dice")


def test_eval_missing_pair(tmp_path, phantom_dir, capsys):
    partial = tmp_path / "partial"
    data.save_dataset(partial, data.load_dataset(phantom_dir)[:2])
    assert run("eval", "--pred", partial, "--truth", phantom_dir, "--out", tmp_path / "e") == cli.EXIT_DATA
    assert "subject 1 frame 2" in capsys.readouterr().err


def test_exit_codes(tmp_path, phantom_dir):
    codes = {
        cli.EXIT_CONFIG: run("train", "--data", phantom_dir, "--out", tmp_path / "x", "--slice-width", 10),
        cli.EXIT_DATA: run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "y"),
    }
    assert codes == {cli.EXIT_CONFIG: cli.EXIT_CONFIG, cli.EXIT_DATA: cli.EXIT_DATA}
    assert len({cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_DATA, cli.EXIT_NUMERIC}) == 4
    bad = tmp_path / "bad.cfg"
    bad.write_text("depth=banana\n")
    assert run("train", "--config", bad, "--data", phantom_dir) == cli.EXIT_CONFIG
    assert run("segment", "--checkpoint", tmp_path, "--data", phantom_dir, "--out", tmp_path / "s") == cli.EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit(tmp_path, phantom_dir, monkeypatch):
    from relaynet import training

    real = training.train_step
    calls = {"n": 0}

    def flaky(params, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            params["classifier.bias"][0] = np.inf
        return real(params, *a, **kw)

    monkeypatch.setattr(training, "train_step", flaky)
    out = tmp_path / "r"
    rc = run("train", "--data", phantom_dir, "--out", out, "--depth", 2, "--channels", 2,
             "--batch-size", 2, "--slice-width", 16, "--epochs", 1)
    assert rc == cli.EXIT_NUMERIC
    assert "aborted=numeric" in (out / "checkpoint" / model.CHECKPOINT_MANIFEST).read_text()
    assert len((out / "train_log.tsv").read_text().strip().splitlines()) == 1 + 2


def test_seed_from_environment(tmp_path, phantom_dir, monkeypatch):
    monkeypatch.setenv("RELAYNET_SEED", "23")
    assert run("train", "--data", phantom_dir, "--out", tmp_path, "--depth", 2, "--channels", 2,
               "--slice-width", 16, "--max-steps", 1) == 0
    assert "seed=23" in (tmp_path / cli.RUN_CONFIG).read_text()


def test_config_file_and_flags(tmp_path, phantom_dir):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"data={phantom_dir}\nout={tmp_path / 'o'}\ndepth=2\nchannels=2\nslice_width=16\n"
                   "max_steps=1\nbatch_size=3\n")
    assert run("train", "--config", cfg, "--batch-size", 2) == 0
    echo = (tmp_path / "o" / cli.RUN_CONFIG).read_text()
    assert "batch_size=2" in echo and "channels=2" in echo


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--corrupt", "softmax") == cli.EXIT_NUMERIC
    out = capsys.readouterr().out
    assert "FAIL  softmax.input" in out
    assert sum(line.startswith(("PASS", "FAIL")) for line in out.splitlines()) >= 20


def test_overlay_palette():
    img = np.full((2, 3), 0.5)
    labels = np.array([[0, 1, 2], [9, 8, 7]])
    rgb = cli.overlay(img, labels, alpha=1.0)
    assert np.array_equal(rgb, cli.PALETTE[labels])
    assert len({tuple(c) for c in cli.PALETTE}) == 10


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "relaynet", "--help"], capture_output=True, text=True,
                          env={**os.environ})
    assert proc.returncode == 0
    for cmd in ("train", "segment", "eval", "gradcheck", "phantom"):
        assert cmd in proc.stdout
