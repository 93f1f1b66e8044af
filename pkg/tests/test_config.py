import pytest

from multistream3d import config as cfgmod
from multistream3d.config import ConfigError, RunConfig, load_config


def test_training_defaults():
    t = RunConfig().train
    assert (t.epochs, t.batch_size, t.lr, t.optimizer) == (40, 2, 1e-4, "adam")
    assert t.lr_schedule == "constant"


def test_default_streams_all_on():
    s = RunConfig().validate().streams
    assert s.use_mm and s.use_hc and s.use_pillar and s.use_rgb


def test_grid_defaults():
    g = RunConfig().grid
    assert g.uv_extents == [1600, 600] and g.polar_extents == [1600, 600]
    assert g.uv_norm_range == [[-2.0, 2.0], [-2.0, 2.0]]


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  learning_rate: 0.1\n")
    with pytest.raises(ConfigError, match="train.learning_rate"):
        load_config(str(p))
    with pytest.raises(ConfigError, match="bogus"):
        load_config(overrides=["bogus=1"])


@pytest.mark.parametrize("item", ["train.epochs=2.5", "streams.use_mm=3", "train.lr=fast", "grid.voxel_size=1"])
def test_type_checked(item):
    with pytest.raises(ConfigError):
        load_config(overrides=[item])


def test_int_accepted_for_float():
    cfg = load_config(overrides=["train.lr=1"])
    assert cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  lr: 0.5\n  epochs: 3\n")
    cfg = load_config(str(p), ["train.lr=0.25"])
    assert (cfg.train.lr, cfg.train.epochs) == (0.25, 3)


def test_override_syntax():
    with pytest.raises(ConfigError, match="key=value"):
        load_config(overrides=["train.lr"])


@pytest.mark.parametrize(
    "items",
    [
        ["streams.use_mm=false", "streams.use_hc=false", "streams.use_pillar=false"],
        ["streams.kernel_size=4"],
        ["streams.hc_strides=[1,2,2,1,1]"],
        ["streams.pillar_mlp=[6,64]"],
        ["train.keep_fraction=1.5"],
        ["head.classes=[Truck]"],
        ["train.optimizer=rmsprop"],
        ["train.lr_schedule=step"],
    ],
)
def test_validation_errors(items):
    with pytest.raises(ConfigError):
        load_config(overrides=items)


def test_hash_stable_and_sensitive():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash()
    b.train.lr = 2e-4
    assert a.hash() != b.hash()
    assert a.hash("grid") == b.hash("grid")


def test_dump_roundtrip(tmp_path):
    cfg = cfgmod.toy_preset(True)
    p = tmp_path / "dump.yaml"
    p.write_text(cfg.dump())
    assert load_config(str(p)).hash() == cfg.hash()


def test_copy_is_deep():
    a = RunConfig()
    b = a.copy()
    b.grid.voxel_size[0] = 1.0
    assert a.grid.voxel_size[0] == 0.05


def test_reduced_preset_quarter_widths():
    full, red = cfgmod.toy_preset(False), cfgmod.toy_preset(True)
    assert [c // 4 for c in full.streams.hc_channels] == red.streams.hc_channels
    assert red.streams.pillar_mlp[0] == 7
    assert red.grid.point_range == full.grid.point_range


def test_presets_validate():
    for make in cfgmod.PRESETS.values():
        make().validate()
