"""KITTI object-devkit file formats: velodyne scans, calibration, labels.

Also builds the hybrid LiDAR + pseudo point cloud consumed by the
multimodal stream.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LIDAR = 0
PSEUDO = 1

CLASSES = ("Car", "Pedestrian", "Cyclist", "DontCare")
_RECORD_BYTES = 16


class FormatError(ValueError):
    """Malformed input file. ``offset`` is a byte offset or a line number."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4) float64: x, y, z, reflectance
    source: np.ndarray  # (N,) uint8, LIDAR or PSEUDO
    rejected: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        self.source = np.asarray(self.source, dtype=np.uint8).reshape(-1)
        if len(self.source) != len(self.points):
            raise ValueError("source tags must match point count")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.uint8))

    @classmethod
    def from_array(cls, points, source=LIDAR):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
        return cls(points, np.full(len(points), source, dtype=np.uint8))

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(
            np.concatenate([self.points, other.points]),
            np.concatenate([self.source, other.source]),
            self.rejected + other.rejected,
        )


@dataclass
class Calibration:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray
    extra: dict = field(default_factory=dict)

    def lidar_to_rect(self, pts):
        """Map (N, 3) LiDAR points into the rectified camera frame."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.Tr_velo_to_cam[:, :3].T + self.Tr_velo_to_cam[:, 3]
        return cam @ self.R0_rect.T

    def rect_to_lidar(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        cam = np.linalg.solve(self.R0_rect, pts.T).T
        return np.linalg.solve(self.Tr_velo_to_cam[:, :3], (cam - self.Tr_velo_to_cam[:, 3]).T).T

    def rect_to_image(self, pts):
        """Project rectified-camera points to pixels. Returns (uv, depth)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        hom = pts @ self.P2[:, :3].T + self.P2[:, 3]
        depth = hom[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = hom[:, :2] / depth[:, None]
        return uv, depth

    def lidar_to_image(self, pts):
        return self.rect_to_image(self.lidar_to_rect(pts))


@dataclass
class GroundTruthObject:
    """One KITTI label line; geometry kept in the rectified camera frame."""

    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple  # (left, top, right, bottom) pixels
    dims_hwl: tuple  # (h, w, l) meters
    location: tuple  # bottom-center, camera frame
    ry: float
    score: float | None = None

    @property
    def height_px(self):
        return self.bbox2d[3] - self.bbox2d[1]

    def eval_box(self):
        """Box3D in an axis-permuted camera frame (forward, left, up).

        The permutation is an isometry, so IoUs computed on these boxes equal
        IoUs in the camera frame.
        """
        from .geometry import Box3D

        h, w, l = self.dims_hwl
        x, y, z = self.location
        return Box3D((z, -x, -y + h / 2.0), (l, w, h), -self.ry - math.pi / 2.0)

    def lidar_box(self, calib: Calibration):
        from .geometry import Box3D

        h, w, l = self.dims_hwl
        x, y, z = self.location
        center = calib.rect_to_lidar([[x, y - h / 2.0, z]])[0]
        heading_rect = np.array([math.cos(self.ry), 0.0, -math.sin(self.ry)])
        # directions transform without the translation part
        heading = calib.rect_to_lidar([heading_rect])[0] - calib.rect_to_lidar([[0.0, 0.0, 0.0]])[0]
        yaw = math.atan2(heading[1], heading[0])
        return Box3D(tuple(center), (l, w, h), yaw)


def label_from_lidar_box(box, calib: Calibration, cls="Car", image_size=(1242, 375), score=None,
                         truncation=0.0, occlusion=0) -> GroundTruthObject:
    """Camera-frame KITTI record for a LiDAR-frame Box3D.

    The 2D box is the image-clipped bounding rectangle of the projected
    corners.
    """
    from .geometry import box_corners_3d, normalize_angle

    arr = box.as_array() if hasattr(box, "as_array") else np.asarray(box, dtype=np.float64)
    x, y, z, l, w, h, yaw = arr
    bottom = calib.lidar_to_rect([[x, y, z - h / 2.0]])[0]
    origin = calib.lidar_to_rect([[0.0, 0.0, 0.0]])[0]
    heading = calib.lidar_to_rect([[math.cos(yaw), math.sin(yaw), 0.0]])[0] - origin
    ry = float(normalize_angle(math.atan2(-heading[2], heading[0])))
    alpha = float(normalize_angle(ry - math.atan2(bottom[0], bottom[2])))
    uv, depth = calib.lidar_to_image(box_corners_3d(arr))
    front = depth > 1e-3
    if front.any():
        pix = uv[front]
        left = float(np.clip(pix[:, 0].min(), 0, image_size[0] - 1))
        right = float(np.clip(pix[:, 0].max(), 0, image_size[0] - 1))
        top = float(np.clip(pix[:, 1].min(), 0, image_size[1] - 1))
        bottom_px = float(np.clip(pix[:, 1].max(), 0, image_size[1] - 1))
    else:
        left = top = 0.0
        right = bottom_px = 1.0
    if right <= left:
        right = left + 1e-3
    if bottom_px <= top:
        bottom_px = top + 1e-3
    return GroundTruthObject(
        cls=cls,
        truncation=truncation,
        occlusion=occlusion,
        alpha=alpha,
        bbox2d=(left, top, right, bottom_px),
        dims_hwl=(float(h), float(w), float(l)),
        location=tuple(float(v) for v in bottom),
        ry=ry,
        score=score,
    )


def _decode_bin(data: bytes, path, source) -> PointCloud:
    if len(data) % _RECORD_BYTES:
        offset = len(data) - len(data) % _RECORD_BYTES
        raise FormatError(f"{path}: truncated record at byte offset {offset}", offset)
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(raw).all(axis=1)
    rejected = int((~finite).sum())
    if rejected:
        log.warning("%s: rejected %d non-finite records", path, rejected)
    pts = raw[finite].astype(np.float64)
    return PointCloud(pts, np.full(len(pts), source, dtype=np.uint8), rejected)


def read_velodyne(path) -> PointCloud:
    with open(path, "rb") as f:
        return _decode_bin(f.read(), path, LIDAR)


def load_pseudo_points(path, allow_missing=False) -> PointCloud:
    if allow_missing and not os.path.exists(path):
        log.warning("%s: pseudo points missing, continuing LiDAR-only", path)
        return PointCloud.empty()
    with open(path, "rb") as f:
        return _decode_bin(f.read(), path, PSEUDO)


def write_velodyne(path, cloud: PointCloud | np.ndarray):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())


_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def read_calibration(path) -> Calibration:
    found = {}
    extra = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            key, sep, rest = line.partition(":")
            if not sep:
                raise FormatError(f"{path}:{lineno}: expected 'key: values'", lineno)
            try:
                values = [float(v) for v in rest.split()]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value in {key!r}", lineno) from None
            key = key.strip()
            if key in _CALIB_SHAPES:
                shape = _CALIB_SHAPES[key]
                if len(values) != shape[0] * shape[1]:
                    raise FormatError(
                        f"{path}:{lineno}: {key!r} needs {shape[0] * shape[1]} numbers, got {len(values)}",
                        lineno,
                    )
                found[key] = np.array(values).reshape(shape)
            else:
                extra[key] = np.array(values)
    for key in _CALIB_SHAPES:
        if key not in found:
            raise FormatError(f"{path}: missing calibration key {key!r}")
    calib = Calibration(found["P2"], found["R0_rect"], found["Tr_velo_to_cam"], extra)
    if abs(abs(np.linalg.det(calib.R0_rect)) - 1.0) >= 1e-3:
        log.warning("%s: R0_rect is not orthonormal", path)
    return calib


def _fmt(values):
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def write_calibration(path, calib: Calibration):
    lines = [f"{k}: {_fmt(v)}" for k, v in calib.extra.items()]
    lines += [
        f"P2: {_fmt(calib.P2)}",
        f"R0_rect: {_fmt(calib.R0_rect)}",
        f"Tr_velo_to_cam: {_fmt(calib.Tr_velo_to_cam)}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def parse_label_line(line, lineno=0, path="<labels>") -> GroundTruthObject:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise FormatError(f"{path}:{lineno}: expected 15 fields, got {len(parts)}", lineno)
    cls = parts[0]
    try:
        vals = [float(v) for v in parts[1:]]
    except ValueError:
        raise FormatError(f"{path}:{lineno}: non-numeric field", lineno) from None
    if cls not in CLASSES:
        log.warning("%s:%d: unknown class %r kept as DontCare", path, lineno, cls)
        cls = "DontCare"
    obj = GroundTruthObject(
        cls=cls,
        truncation=vals[0],
        occlusion=int(vals[1]),
        alpha=vals[2],
        bbox2d=tuple(vals[3:7]),
        dims_hwl=tuple(vals[7:10]),
        location=tuple(vals[10:13]),
        ry=vals[13],
        score=vals[14] if len(vals) == 15 else None,
    )
    if cls != "DontCare":
        left, top, right, bottom = obj.bbox2d
        if not (right > left and bottom > top):
            raise FormatError(f"{path}:{lineno}: degenerate 2D box", lineno)
        if min(obj.dims_hwl) <= 0:
            raise FormatError(f"{path}:{lineno}: non-positive box dimensions", lineno)
    return obj


def read_labels(path) -> list[GroundTruthObject]:
    objs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                objs.append(parse_label_line(line, lineno, path))
    return objs


def format_label(obj: GroundTruthObject) -> str:
    fields = [
        obj.cls,
        f"{obj.truncation:.2f}",
        str(int(obj.occlusion)),
        f"{obj.alpha:.6f}",
        *(f"{v:.4f}" for v in obj.bbox2d),
        *(f"{v:.4f}" for v in obj.dims_hwl),
        *(f"{v:.4f}" for v in obj.location),
        f"{obj.ry:.6f}",
    ]
    if obj.score is not None:
        fields.append(f"{obj.score:.6f}")
    return " ".join(fields)


def write_labels(path, objs):
    with open(path, "w") as f:
        for obj in objs:
            f.write(format_label(obj) + "\n")


@dataclass
class HybridCloud:
    cloud: PointCloud
    keep_fraction: float
    seed: int


def retained_count(n, keep_fraction):
    return int(math.floor(keep_fraction * n + 0.5))


def make_hybrid_cloud(lidar: PointCloud, pseudo: PointCloud, keep_fraction=0.2, seed=0) -> HybridCloud:
    """Merge LiDAR with a seeded uniform subsample of the pseudo points."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    rng = np.random.default_rng(seed)
    n = len(pseudo)
    k = retained_count(n, keep_fraction)
    keep = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
    kept = PointCloud(pseudo.points[keep], np.full(k, PSEUDO, dtype=np.uint8))
    return HybridCloud(lidar.concat(kept), keep_fraction, seed)
