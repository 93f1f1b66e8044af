"""Run configuration: nested dataclasses loaded from YAML with strict keys."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    split: str = "ImageSets/train.txt"
    velodyne_dir: str = "training/velodyne"
    calib_dir: str = "training/calib"
    label_dir: str = "training/label_2"
    pseudo_pattern: str = "training/velodyne_pseudo/{frame}.bin"
    allow_missing_pseudo: bool = False
    cache_dir: str = "cache"
    image_size: list = field(default_factory=lambda: [1242, 375])


@dataclass
class GridConfig:
    point_range: list = field(default_factory=lambda: [0.0, -40.0, -3.0, 70.4, 40.0, 1.0])
    voxel_size: list = field(default_factory=lambda: [0.05, 0.05, 0.1])
    pillar_size: list = field(default_factory=lambda: [0.16, 0.16])
    max_points_per_voxel: int = 32
    max_points_per_pillar: int = 32
    uv_extents: list = field(default_factory=lambda: [1600, 600])
    uv_pixel_range: list = field(default_factory=lambda: [[0.0, 1242.0], [0.0, 375.0]])
    uv_norm_range: list = field(default_factory=lambda: [[-2.0, 2.0], [-2.0, 2.0]])
    polar_extents: list = field(default_factory=lambda: [1600, 600])
    polar_theta_range: list = field(default_factory=lambda: [-math.pi / 2, math.pi / 2])
    polar_phi_range: list = field(default_factory=lambda: [-math.pi / 4, math.pi / 4])
    depth_eps: float = 1e-3


@dataclass
class StreamsConfig:
    use_mm: bool = True
    use_hc: bool = True
    use_pillar: bool = True
    use_rgb: bool = True
    kernel_size: int = 3
    mm_channels: list = field(default_factory=lambda: [16, 32, 64])
    mm_strides: list = field(default_factory=lambda: [1, 2, 2, 2])
    mm_out_channels: int = 64
    hc_channels: list = field(default_factory=lambda: [16, 32, 32, 64, 64])
    hc_strides: list = field(default_factory=lambda: [1, 2, 2, 2, 1])
    hc_layers_per_block: int = 3
    bev2d_channels: list = field(default_factory=lambda: [64, 64])
    pillar_mlp: list = field(default_factory=lambda: [7, 64, 64])
    pillar_channels: list = field(default_factory=lambda: [64, 64])
    pillar_strides: list = field(default_factory=lambda: [1, 2])
    fusion_layers: int = 2


@dataclass
class HeadConfig:
    classes: list = field(default_factory=lambda: ["Car"])
    anchor_sizes: dict = field(
        default_factory=lambda: {
            "Car": [3.9, 1.6, 1.56],
            "Pedestrian": [0.8, 0.6, 1.73],
            "Cyclist": [1.76, 0.6, 1.73],
        }
    )
    anchor_z: dict = field(default_factory=lambda: {"Car": -1.0, "Pedestrian": -0.6, "Cyclist": -0.6})
    anchor_yaws: list = field(default_factory=lambda: [0.0, math.pi / 2])
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    roi_grid: int = 7
    head_hidden: list = field(default_factory=lambda: [256, 256])
    pre_nms: int = 100
    post_nms: int = 32
    rpn_nms_iou: float = 0.7
    roi_pos_iou: float = 0.55
    roi_neg_iou: float = 0.45
    gt_proposals: bool = True
    final_nms_iou: float = 0.1
    score_threshold: float = 0.1
    max_detections: int = 50
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_delta: float = 1.0 / 9.0
    dir_offset: float = math.pi / 4
    w_cls: float = 1.0
    w_box: float = 2.0
    w_dir: float = 0.2
    w_roi_cls: float = 1.0
    w_roi_box: float = 2.0


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5})
    benchmarks: list = field(default_factory=lambda: ["2d", "bev", "3d", "aos"])
    r11: bool = False


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 40
    batch_size: int = 2
    lr: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    keep_fraction: float = 0.2
    max_steps: int = 0
    grad_clip: float = 10.0
    lr_schedule: str = "constant"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    streams: StreamsConfig = field(default_factory=StreamsConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def copy(self):
        return copy.deepcopy(self)

    def hash(self, *groups):
        d = self.to_dict()
        if groups:
            d = {g: d[g] for g in groups}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def validate(self):
        s = self.streams
        if not (s.use_mm or s.use_hc or s.use_pillar):
            raise ConfigError("at least one stream must be enabled")
        if s.kernel_size % 2 == 0:
            raise ConfigError("streams.kernel_size must be odd")
        if len(s.mm_strides) != len(s.mm_channels) + 1:
            raise ConfigError("streams.mm_strides needs one entry per block plus the output conv")
        if len(s.hc_strides) != len(s.hc_channels):
            raise ConfigError("streams.hc_strides and hc_channels differ in length")
        if len(s.pillar_strides) != len(s.pillar_channels):
            raise ConfigError("streams.pillar_strides and pillar_channels differ in length")
        if s.pillar_mlp[0] != 7:
            raise ConfigError("streams.pillar_mlp must start at 7 input features")
        for st in [*s.mm_strides, *s.hc_strides, *s.pillar_strides]:
            if st < 1:
                raise ConfigError("strides must be >= 1")
        if _prod(s.mm_strides) != _prod(s.hc_strides):
            raise ConfigError("MM and HC streams must downsample by the same total factor")
        if not 0.0 <= self.train.keep_fraction <= 1.0:
            raise ConfigError("train.keep_fraction must be in [0, 1]")
        for c in self.head.classes:
            if c not in self.head.anchor_sizes or c not in self.head.anchor_z:
                raise ConfigError(f"no anchor template for class {c!r}")
        if self.train.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer must be 'adam' or 'sgd'")
        if self.train.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("train.lr_schedule must be 'constant' or 'cosine'")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        return self


def _prod(xs):
    out = 1
    for x in xs:
        out *= x
    return out


def _coerce(default, value, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return value
    return value


def _apply(obj, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            raise ConfigError(f"unknown configuration key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, path)
        else:
            setattr(obj, key, _coerce(current, value, path))


def from_dict(data, base: RunConfig | None = None) -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    _apply(cfg, data or {}, "")
    return cfg.validate()


def load_config(path=None, overrides=(), base: RunConfig | None = None) -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    if path:
        with open(path) as f:
            _apply(cfg, yaml.safe_load(f) or {}, "")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        nested = yaml.safe_load(raw)
        for part in reversed(key.strip().split(".")):
            nested = {part: nested}
        _apply(cfg, nested, "")
    return cfg.validate()


def toy_preset(reduced=False) -> RunConfig:
    """Small-range grid matched to the synthetic scenes; ``reduced`` divides
    every channel width by four."""
    cfg = RunConfig()
    cfg.grid.point_range = [0.0, -12.8, -3.0, 25.6, 12.8, 1.0]
    cfg.grid.voxel_size = [0.1, 0.1, 0.2]
    cfg.grid.pillar_size = [0.2, 0.2]
    cfg.grid.max_points_per_voxel = 8
    cfg.grid.max_points_per_pillar = 16
    cfg.streams.pillar_strides = [2, 2]
    cfg.head.pre_nms = 64
    cfg.head.post_nms = 16
    if reduced:
        s = cfg.streams
        s.mm_channels = [c // 4 for c in s.mm_channels]
        s.mm_out_channels //= 4
        s.hc_channels = [c // 4 for c in s.hc_channels]
        s.bev2d_channels = [c // 4 for c in s.bev2d_channels]
        s.pillar_mlp = [7] + [c // 4 for c in s.pillar_mlp[1:]]
        s.pillar_channels = [c // 4 for c in s.pillar_channels]
        cfg.head.head_hidden = [c // 4 for c in cfg.head.head_hidden]
    return cfg.validate()


PRESETS = {
    "default": lambda: RunConfig().validate(),
    "toy": lambda: toy_preset(False),
    "toy-reduced": lambda: toy_preset(True),
}
