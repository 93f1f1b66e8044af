import os

import numpy as np
import pytest

from multistream3d import config as cfgmod
from multistream3d import evaluation as ev
from multistream3d import kitti_io as kio
from multistream3d import model, pipeline, synthetic, tensorfile


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    synthetic.write_dataset(str(root), n_frames=3, seed=5)
    return str(root)


def make_cfg(root, cache, *overrides):
    return cfgmod.load_config(None, [f"data.root={root}", f"data.cache_dir={cache}", *overrides],
                              cfgmod.toy_preset(True))


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_preprocess_idempotent(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path / "cache")
    first = pipeline.preprocess(cfg)
    assert sorted(first.built) == ["000000", "000001", "000002"]
    second = pipeline.preprocess(cfg)
    assert second.built == [] and len(second.skipped) == 3


def test_cache_key_tracks_inputs_only(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path)
    assert pipeline.cache_key(cfg) == pipeline.cache_key(make_cfg(dataset, tmp_path, "train.lr=0.5"))
    changed = make_cfg(dataset, tmp_path, "grid.max_points_per_voxel=4")
    assert pipeline.cache_key(changed) != pipeline.cache_key(cfg)
    pipeline.preprocess(cfg)
    assert len(pipeline.preprocess(changed).built) == 3


def test_cache_bytes_reproducible(dataset, tmp_path):
    a = make_cfg(dataset, tmp_path / "a")
    b = make_cfg(dataset, tmp_path / "b")
    pipeline.preprocess(a)
    pipeline.preprocess(b, jobs=2)
    pa = os.path.join(pipeline.cache_dir(a), "000000.tns")
    pb = os.path.join(pipeline.cache_dir(b), "000000.tns")
    assert read_bytes(pa) == read_bytes(pb)


def test_corrupt_cache_entry_rebuilt(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path)
    pipeline.preprocess(cfg)
    path = os.path.join(pipeline.cache_dir(cfg), "000001.tns")
    good = read_bytes(path)
    with open(path, "wb") as f:
        f.write(good[: len(good) // 2])
    assert pipeline.preprocess(cfg).built == ["000001"]
    assert read_bytes(path) == good


def test_missing_files_listed(tmp_path):
    root = tmp_path / "d"
    synthetic.write_dataset(str(root), n_frames=2, seed=1)
    os.remove(root / "training" / "calib" / "000001.txt")
    cfg = make_cfg(root, tmp_path / "c")
    with pytest.raises(pipeline.UserError, match="000001"):
        pipeline.preprocess(cfg)
    rep = pipeline.preprocess(cfg, skip_missing=True)
    assert rep.built == ["000000"] and list(rep.missing) == ["000001"]


def test_missing_root():
    cfg = cfgmod.toy_preset(True)
    cfg.data.root = "/nonexistent/dataset"
    with pytest.raises(pipeline.UserError):
        pipeline.frame_ids(cfg)


def test_cache_roundtrip_matches_fresh_prepare(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path)
    pipeline.preprocess(cfg)
    cached = pipeline.load_inputs(cfg, "000002")
    lidar, pseudo, calib = pipeline.read_frame(cfg, "000002")
    fresh = model.prepare_frame(lidar, pseudo, calib, cfg, "000002")
    for k, v in model.inputs_to_tensors(fresh).items():
        np.testing.assert_array_equal(model.inputs_to_tensors(cached)[k], v, err_msg=k)


def test_schedule_and_batches():
    cfg = cfgmod.toy_preset(True)
    cfg.train.epochs = 3
    assert pipeline.schedule(5, cfg) == (3, 9)
    cfg.train.max_steps = 4
    assert pipeline.schedule(5, cfg) == (3, 4)
    seen = np.concatenate([pipeline.batch_for_step(s, 5, cfg)[1] for s in range(3)])
    assert sorted(seen) == [0, 1, 2, 3, 4]


def test_cosine_schedule():
    cfg = cfgmod.toy_preset(True)
    cfg.train.lr = 1.0
    assert pipeline.lr_at(7, 10, cfg) == 1.0
    cfg.train.lr_schedule = "cosine"
    assert pipeline.lr_at(0, 10, cfg) == 1.0
    assert pipeline.lr_at(5, 10, cfg) == pytest.approx(0.5)
    assert pipeline.lr_at(10, 10, cfg) == pytest.approx(0.0)


def test_gradient_clipping():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    out, norm = pipeline.clip_gradients(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([out["a"][0], out["b"][0]], [0.6, 0.8])
    out, norm = pipeline.clip_gradients(grads, 0)
    assert out is grads and norm is None


def test_resume_matches_uninterrupted(dataset, tmp_path):
    cache = tmp_path / "cache"
    full = make_cfg(dataset, cache, "train.max_steps=6", "train.lr=0.001")
    pipeline.preprocess(full)
    pipeline.train(full, tmp_path / "full")
    part = make_cfg(dataset, cache, "train.max_steps=3", "train.lr=0.001")
    pipeline.train(part, tmp_path / "split")
    pipeline.train(full, tmp_path / "split", resume=True)
    assert read_bytes(tmp_path / "full" / "loss.csv") == read_bytes(tmp_path / "split" / "loss.csv")
    a, sa, na = pipeline.load_checkpoint(tmp_path / "full" / "checkpoint.tns", full)
    b, sb, nb = pipeline.load_checkpoint(tmp_path / "split" / "checkpoint.tns", full)
    assert na == nb == 6 and sa.t == sb.t
    for n in a:
        np.testing.assert_array_equal(a[n], b[n], err_msg=n)


def test_zero_lr_leaves_parameters(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path / "cache", "train.max_steps=3", "train.lr=0")
    pipeline.preprocess(cfg)
    rep = pipeline.train(cfg, tmp_path / "run")
    params, _, step = pipeline.load_checkpoint(rep.checkpoint, cfg)
    init = model.init_params(cfg)
    assert step == 3
    for n in init:
        np.testing.assert_array_equal(params[n], init[n], err_msg=n)


def test_checkpoint_each_epoch(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path / "cache", "train.epochs=2", "train.lr=0.001")
    pipeline.preprocess(cfg)
    steps = []
    rep = pipeline.train(cfg, tmp_path / "run", progress=lambda s, t, l: steps.append(s))
    assert rep.steps == 4 and steps == [0, 1, 2, 3]
    assert pipeline.load_checkpoint(rep.checkpoint, cfg)[2] == 4
    rows = read_bytes(tmp_path / "run" / "loss.csv").decode().splitlines()
    assert rows[0].startswith("step,epoch,loss") and len(rows) == 5


def test_nan_loss_dumps_batch(dataset, tmp_path, monkeypatch):
    cfg = make_cfg(dataset, tmp_path / "cache", "train.max_steps=2")
    pipeline.preprocess(cfg)
    real = model.loss_and_grads

    def poisoned(*a, **k):
        value, grads, res = real(*a, **k)
        return float("nan"), grads, res

    monkeypatch.setattr(model, "loss_and_grads", poisoned)
    with pytest.raises(pipeline.NaNLossError):
        pipeline.train(cfg, tmp_path / "run")
    assert (tmp_path / "run" / "nan_dump.json").is_file()
    dumped = tensorfile.load(str(tmp_path / "run" / "nan_batch.tns"), kind="diagnostic")
    assert any(k.endswith("lidar.coords") for k in dumped)


def test_checkpoint_layout_mismatch(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path / "cache", "train.max_steps=1")
    pipeline.preprocess(cfg)
    rep = pipeline.train(cfg, tmp_path / "run")
    other = make_cfg(dataset, tmp_path / "cache", "head.head_hidden=[16]")
    with pytest.raises(pipeline.UserError, match="layout"):
        pipeline.load_checkpoint(rep.checkpoint, other)


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    base = tmp_path_factory.mktemp("trained")
    cfg = make_cfg(dataset, base / "cache", "train.max_steps=4", "train.lr=0.002")
    pipeline.preprocess(cfg)
    return cfg, pipeline.train(cfg, base / "run").checkpoint


def test_infer_same_frame_twice_identical(trained, tmp_path):
    cfg, ckpt = trained
    pipeline.infer(cfg, ckpt, tmp_path / "a", frames=["000001"])
    pipeline.infer(cfg, ckpt, tmp_path / "b", frames=["000001"])
    assert read_bytes(tmp_path / "a" / "data" / "000001.txt") == read_bytes(tmp_path / "b" / "data" / "000001.txt")
    lat = read_bytes(tmp_path / "a" / "latency.csv").decode().splitlines()
    assert lat[0].split(",")[:3] == ["frame", "detections", "hc_ms"] and len(lat) == 2


def test_empty_scene_empty_result(tmp_path):
    root = tmp_path / "d"
    synthetic.write_dataset(str(root), n_frames=1)
    empty = np.zeros((0, 4), dtype=np.float32)
    kio.write_velodyne(str(root / "training" / "velodyne" / "000000.bin"), empty)
    kio.write_velodyne(str(root / "training" / "velodyne_pseudo" / "000000.bin"), empty)
    cfg = make_cfg(root, tmp_path / "cache")
    pipeline.preprocess(cfg)
    params = model.init_params(cfg)
    ckpt = tmp_path / "ckpt.tns"
    ckpt.write_bytes(tensorfile.dumps(pipeline.checkpoint_tensors(params, None, 0, cfg)))
    rows = pipeline.infer(cfg, str(ckpt), tmp_path / "res")
    assert rows[0][1] == 0
    assert read_bytes(tmp_path / "res" / "data" / "000000.txt") == b""


def labels_as_results(root, out):
    src = os.path.join(root, "training", "label_2")
    os.makedirs(out / "data")
    for name in sorted(os.listdir(src)):
        objs = kio.read_labels(os.path.join(src, name))
        for o in objs:
            o.score = 1.0
        (out / "data" / name).write_text("".join(kio.format_label(o) + "\n" for o in objs))


def test_eval_self_match_is_perfect(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path)
    labels_as_results(dataset, tmp_path / "res")
    res = pipeline.evaluate(cfg, tmp_path / "res", tmp_path / "ev")
    for bench in cfg.eval.benchmarks:
        for level in ev.LEVELS:
            assert res.get("Car", bench, level).value == pytest.approx(100.0)
    assert (tmp_path / "ev" / "table.txt").is_file()


def test_eval_empty_results_zero(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path)
    os.makedirs(tmp_path / "res" / "data")
    for fid in pipeline.frame_ids(cfg):
        (tmp_path / "res" / "data" / f"{fid}.txt").write_text("")
    res = pipeline.evaluate(cfg, tmp_path / "res", tmp_path / "ev")
    assert res.get("Car", "3d", "Moderate").value == 0.0
    assert res.get("Car", "bev", "Easy").value == 0.0


def test_eval_lists_orphans(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path)
    labels_as_results(dataset, tmp_path / "res")
    os.remove(tmp_path / "res" / "data" / "000001.txt")
    (tmp_path / "res" / "data" / "000099.txt").write_text("")
    with pytest.raises(pipeline.UserError, match="000099.*000001"):
        pipeline.evaluate(cfg, tmp_path / "res", tmp_path / "ev")


def test_ablation_config_rows():
    cfg = cfgmod.toy_preset(True)
    out = pipeline.ablation_config(cfg, (False, True, False, False))
    s = out.streams
    assert (s.use_mm, s.use_hc, s.use_pillar, s.use_rgb) == (False, True, False, False)
    assert cfg.streams.use_mm
    with pytest.raises(cfgmod.ConfigError):
        pipeline.ablation_config(cfg, (False, False, False, True))


def test_two_hundred_steps_cut_loss_below_ten_percent(tmp_path):
    synthetic.write_dataset(str(tmp_path / "data"), n_frames=8)
    cfg = make_cfg(tmp_path / "data", tmp_path / "cache", "train.max_steps=200", "train.epochs=50",
                   "train.lr=0.002", "train.lr_schedule=cosine")
    pipeline.preprocess(cfg)
    losses = pipeline.train(cfg, tmp_path / "run").losses
    assert len(losses) == 200
    assert losses[-1] < 0.1 * losses[0]
