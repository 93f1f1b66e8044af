import numpy as np
import pytest

from multistream3d.config import RunConfig


def tiny_config(**streams):
    """16x16x4 voxel grid with two-to-four channel layers, small enough for dense oracles."""
    cfg = RunConfig()
    cfg.grid.point_range = [0.0, 0.0, 0.0, 3.2, 3.2, 0.8]
    cfg.grid.voxel_size = [0.2, 0.2, 0.2]
    cfg.grid.pillar_size = [0.2, 0.2]
    s = cfg.streams
    s.mm_channels = [2, 3]
    s.mm_strides = [1, 2, 2]
    s.mm_out_channels = 3
    s.hc_channels = [2, 3, 3]
    s.hc_strides = [1, 2, 2]
    s.hc_layers_per_block = 2
    s.bev2d_channels = [3]
    s.pillar_mlp = [7, 4]
    s.pillar_channels = [3, 3]
    s.pillar_strides = [2, 2]
    s.fusion_layers = 1
    for k, v in streams.items():
        setattr(s, k, v)
    cfg.head.head_hidden = [8]
    return cfg.validate()


def random_points(rng, n, cfg):
    lo = np.asarray(cfg.grid.point_range[:3])
    hi = np.asarray(cfg.grid.point_range[3:])
    return np.c_[rng.uniform(lo, hi, (n, 3)), rng.uniform(0, 1, n)]


@pytest.fixture
def tiny_cfg():
    return tiny_config()


OVERFIT_FRAMES = 8
OVERFIT_STEPS = 500


def overfit_args(root):
    return ["--preset", "toy-reduced", "--data-root", str(root / "data"), "--cache", str(root / "cache"),
            "--set", "train.lr=0.002", "--set", "train.lr_schedule=cosine",
            "--set", "eval.iou_thresholds={Car: 0.5}"]


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Synthesize 8 scenes, then preprocess, train 500 steps, infer and
    evaluate on the training frames. Returns (root, seconds, eval result)."""
    import time

    from multistream3d import cli, config, pipeline

    root = tmp_path_factory.mktemp("overfit")
    t0 = time.perf_counter()
    assert cli.main(["synth", str(root / "data"), "--frames", str(OVERFIT_FRAMES)]) == 0
    common = overfit_args(root)
    epochs = -(-OVERFIT_STEPS * 2 // OVERFIT_FRAMES)
    assert cli.main(["preprocess", *common]) == 0
    assert cli.main(["train", *common, "--set", f"train.epochs={epochs}", "--steps", str(OVERFIT_STEPS),
                     "--out", str(root / "run")]) == 0
    assert cli.main(["infer", *common, "--checkpoint", str(root / "run" / "checkpoint.tns"),
                     "--out", str(root / "res")]) == 0
    cfg = config.load_config(None, [f"data.root={root / 'data'}", "eval.iou_thresholds={Car: 0.5}"],
                             config.toy_preset(True))
    res = pipeline.evaluate(cfg, root / "res", root / "ev")
    return root, time.perf_counter() - t0, res
