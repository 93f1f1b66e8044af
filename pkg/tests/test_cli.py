import os
import subprocess
import sys
import time

import numpy as np
import pytest

from multistream3d import cli, pipeline, selftest
from multistream3d import sparse as sp


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", str(root / "data"), "--frames", "2", "--seed", "3"]) == 0
    return root


def args(root, *extra):
    return ["--preset", "toy-reduced", "--data-root", str(root / "data"), "--cache", str(root / "cache"), *extra]


def test_end_to_end_commands(data, capsys):
    assert cli.main(["preprocess", *args(data)]) == 0
    assert "built 2" in capsys.readouterr().out
    assert cli.main(["preprocess", *args(data)]) == 0
    assert "built 0, up to date 2" in capsys.readouterr().out
    assert cli.main(["train", *args(data, "--out", str(data / "run"), "--steps", "2")]) == 0
    ckpt = str(data / "run" / "checkpoint.tns")
    assert cli.main(["infer", *args(data, "--checkpoint", ckpt, "--out", str(data / "res"))]) == 0
    assert cli.main(["eval", *args(data, "--results", str(data / "res"), "--out", str(data / "ev"))]) == 0
    out = capsys.readouterr().out
    assert "Car (3D)" in out and "Moderate" in out
    assert cli.main(["plot", "--eval", str(data / "ev"), "--loss", str(data / "run" / "loss.csv")]) == 0
    paths = capsys.readouterr().out.split()
    assert paths and all(p.endswith(".svg") and os.path.isfile(p) for p in paths)


def test_ablation_flags_resolve(data):
    parser = cli.build_parser()
    cfg = cli.resolve_config(parser.parse_args(["preprocess", *args(data, "--no-pillar", "--no-rgb")]))
    s = cfg.streams
    assert (s.use_mm, s.use_hc, s.use_pillar, s.use_rgb) == (True, True, False, False)


def test_env_data_root(data, monkeypatch):
    monkeypatch.setenv(pipeline.DATA_ENV, str(data / "data"))
    cfg = cli.resolve_config(cli.build_parser().parse_args(["preprocess", "--preset", "toy-reduced"]))
    assert cfg.data.root == str(data / "data")


def test_user_errors_exit_1(data, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["preprocess", *args(data, "--set", "train.nope=1")]) == 1
    assert "train.nope" in capsys.readouterr().err
    assert cli.main(["preprocess", "--data-root", str(tmp_path / "missing")]) == 1
    assert cli.main(["infer", *args(data, "--checkpoint", str(tmp_path / "x.tns"), "--out", str(tmp_path))]) == 1
    assert cli.main(["plot"]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1


def test_internal_error_exit_2(data, monkeypatch):
    def boom(*a, **k):
        raise ValueError("bug")

    monkeypatch.setattr(pipeline, "preprocess", boom)
    assert cli.main(["preprocess", *args(data)]) == 2


def test_nan_loss_exit_2(data, monkeypatch):
    def diverge(*a, **k):
        raise pipeline.NaNLossError("non-finite loss at step 0")

    monkeypatch.setattr(pipeline, "train", diverge)
    assert cli.main(["train", *args(data, "--out", str(data / "nan"))]) == 2


def test_missing_files_listed_and_skippable(tmp_path, capsys):
    root = tmp_path
    assert cli.main(["synth", str(root / "data"), "--frames", "2"]) == 0
    os.remove(root / "data" / "training" / "velodyne_pseudo" / "000000.bin")
    assert cli.main(["preprocess", *args(root)]) == 1
    assert "000000" in capsys.readouterr().err
    assert cli.main(["preprocess", *args(root, "--skip-missing")]) == 0
    assert "skipped 000000" in capsys.readouterr().out
    assert cli.main(["preprocess", *args(root, "--allow-missing-pseudo")]) == 0


def transposed_kernel_conv(x, kernel):
    """Deliberately broken conv: kernel offsets applied in reverse order."""
    w = np.asarray(kernel.weights)[::-1]
    return sp.sparse_conv(x, sp.ConvKernel(w, kernel.bias, kernel.stride, kernel.mode))


def test_mutation_breaks_dense_conv_suite():
    ok, _ = selftest.suite_dense_conv(n=50, conv=transposed_kernel_conv)
    assert not ok
    rows = selftest.run(["dense-conv"], **{"dense-conv": {"n": 50, "conv": transposed_kernel_conv}})
    assert rows[0][1] is False
    assert "FAIL" in selftest.format_report(rows)


def test_selftest_green_and_fast():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "multistream3d", "selftest"], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stdout + proc.stderr
    for name in selftest.SUITES:
        assert any(line.startswith(name) and "PASS" in line for line in proc.stdout.splitlines()), name
    assert elapsed < 300


def test_selftest_failure_exit_code(monkeypatch):
    monkeypatch.setitem(selftest.SUITES, "dense-conv", lambda: (False, "forced"))
    assert cli.main(["selftest", "--suite", "dense-conv"]) == 1
