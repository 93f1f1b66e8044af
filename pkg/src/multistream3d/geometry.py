"""Coordinate transforms, grid quantizers and box overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DEPTH_EPS = 1e-3


def normalize_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + math.pi, 2.0 * math.pi) - math.pi
    out = np.where(out <= -math.pi, out + 2.0 * math.pi, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class GridSpec3D:
    origin: tuple
    voxel_size: tuple
    extents: tuple

    def __post_init__(self):
        if min(self.voxel_size) <= 0 or min(self.extents) < 1:
            raise ValueError(f"bad grid: voxel {self.voxel_size}, extents {self.extents}")

    @classmethod
    def from_range(cls, point_range, voxel_size):
        lo = np.asarray(point_range[:3], dtype=np.float64)
        hi = np.asarray(point_range[3:], dtype=np.float64)
        size = np.asarray(voxel_size, dtype=np.float64)
        extents = tuple(int(e) for e in np.round((hi - lo) / size))
        return cls(tuple(float(v) for v in lo), tuple(float(v) for v in size), extents)

    def cell_of(self, xyz):
        """Half-open cell lookup. Returns (indices, inside mask)."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        origin = np.asarray(self.origin)
        size = np.asarray(self.voxel_size)
        ext = np.asarray(self.extents)
        idx = np.floor((xyz - origin) / size).astype(np.int64)
        upper = origin + ext * size
        inside = (
            np.all(idx >= 0, axis=1)
            & np.all(idx < ext, axis=1)
            & np.all(xyz >= origin, axis=1)
            & np.all(xyz < upper, axis=1)
        )
        return idx, inside

    def centers(self, coords, stride=1):
        """Metric centers of cells of this grid downsampled by ``stride``."""
        size = np.asarray(self.voxel_size) * np.asarray(stride)
        return np.asarray(self.origin) + (np.asarray(coords, dtype=np.float64) + 0.5) * size


@dataclass(frozen=True)
class GridSpec2D:
    ranges: tuple  # ((lo0, hi0), (lo1, hi1))
    extents: tuple = (1600, 600)

    def __post_init__(self):
        for lo, hi in self.ranges:
            if not hi > lo:
                raise ValueError(f"bad axis range ({lo}, {hi})")
        if min(self.extents) < 1:
            raise ValueError("extents must be >= 1")

    def quantize(self, a, b):
        """Linear binning of continuous coordinates; lower edge inclusive."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        cells = []
        valid = np.isfinite(a) & np.isfinite(b)
        for vals, (lo, hi), n in zip((a, b), self.ranges, self.extents):
            with np.errstate(invalid="ignore"):
                pos = np.where(np.isfinite(vals), (vals - lo) / (hi - lo) * n, -1.0)
            idx = np.floor(pos).astype(np.int64)
            valid &= (vals >= lo) & (vals < hi) & (idx >= 0) & (idx < n)
            cells.append(idx)
        return np.stack(cells, axis=-1), valid


DEFAULT_POLAR_GRID = GridSpec2D(((-math.pi / 2, math.pi / 2), (-math.pi / 4, math.pi / 4)))
DEFAULT_UV_GRID = GridSpec2D(((-2.0, 2.0), (-2.0, 2.0)))


def uv_coords(points, calib=None):
    """Continuous UV coordinates and depth for (N, 3) points.

    Without calibration this is the plain perspective division (x/z, y/z);
    with calibration the points are taken from LiDAR to pixels.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if calib is None:
        depth = pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = pts[:, :2] / depth[:, None]
        return uv, depth
    return calib.lidar_to_image(pts)


def uv_map(points, calib, grid: GridSpec2D, depth_eps=DEPTH_EPS):
    single = np.ndim(points) == 1
    uv, depth = uv_coords(points, calib)
    cells, valid = grid.quantize(uv[:, 0], uv[:, 1])
    valid &= depth > depth_eps
    if single:
        return tuple(int(c) for c in cells[0]), bool(valid[0])
    return cells, valid


class PolarCoord(NamedTuple):
    r: np.ndarray
    theta: np.ndarray
    phi: np.ndarray


def polar_transform(points) -> PolarCoord:
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.hypot(x, y)
    r = np.sqrt(x * x + y * y + z * z)
    if np.any(r == 0):
        raise ValueError("polar transform undefined at the origin")
    theta = np.arctan2(y, x)
    theta = np.where(theta <= -math.pi, math.pi, theta)
    phi = np.arctan2(z, rho)
    if single:
        return PolarCoord(float(r[0]), float(theta[0]), float(phi[0]))
    return PolarCoord(r, theta, phi)


def polar_to_cartesian(p: PolarCoord):
    r, t, f = (np.asarray(v, dtype=np.float64) for v in p)
    return np.stack([r * np.cos(f) * np.cos(t), r * np.cos(f) * np.sin(t), r * np.sin(f)], axis=-1)


def polar_grid_index(p: PolarCoord, grid: GridSpec2D = DEFAULT_POLAR_GRID):
    single = np.ndim(p.theta) == 0
    cells, valid = grid.quantize(np.atleast_1d(p.theta), np.atleast_1d(p.phi))
    if single:
        return tuple(int(c) for c in cells[0]), bool(valid[0])
    return cells, valid


# ---------------------------------------------------------------- voxels


def _group_first_k(keys, k):
    """For each row, whether it is among the first ``k`` rows of its key."""
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sk)) + 1]
    run = np.arange(len(sk)) - np.repeat(starts, np.diff(np.r_[starts, len(sk)]))
    keep = np.empty(len(keys), dtype=bool)
    keep[order] = run < k
    return keep


def voxelize(cloud, grid: GridSpec3D, max_points_per_voxel=32):
    """Mean-feature voxelization into a SparseTensor3D (4 channels)."""
    from .sparse import SparseTensor

    points = _points_of(cloud)
    idx, inside = grid.cell_of(points[:, :3])
    pts, idx = points[inside], idx[inside]
    if not len(pts):
        return SparseTensor(np.zeros((0, 3), dtype=np.int64), np.zeros((0, 4)), grid.extents, grid)
    keys = np.ravel_multi_index(idx.T, grid.extents)
    keep = _group_first_k(keys, max_points_per_voxel)
    pts, keys = pts[keep], keys[keep]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 4))
    np.add.at(sums, inverse, pts)
    coords = np.stack(np.unravel_index(uniq, grid.extents), axis=1).astype(np.int64)
    return SparseTensor(coords, sums / counts[:, None], grid.extents, grid)


def _points_of(cloud):
    if hasattr(cloud, "cloud"):
        cloud = cloud.cloud
    if hasattr(cloud, "points"):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 4)


@dataclass
class PillarGrid:
    coords: np.ndarray  # (P, 2) pillar indices, sorted
    point_feats: np.ndarray  # (M, 7) augmented point features
    point_pillar: np.ndarray  # (M,) row into coords
    extents: tuple
    origin: tuple
    pillar_size: tuple


def pillar_bin(cloud, dx=0.16, dy=0.16, max_points_per_pillar=32, origin=(0.0, 0.0), extents=None, z_range=None):
    """Bin points into vertical pillars and build 7-d augmented features.

    Pillar index is floor((x - x0) / dx), floor((y - y0) / dy). The pillar
    center used for the relative offsets is the mean of its retained points.
    """
    if dx <= 0 or dy <= 0:
        raise ValueError("pillar sizes must be positive")
    pts = _points_of(cloud)
    ox, oy = origin
    idx = np.stack([np.floor((pts[:, 0] - ox) / dx), np.floor((pts[:, 1] - oy) / dy)], axis=1).astype(np.int64)
    if extents is None:
        if len(pts) and idx.min() < 0:
            raise ValueError("negative pillar index; pass an origin below the data")
        extents = tuple(int(v) + 1 for v in idx.max(axis=0)) if len(pts) else (1, 1)
    inside = np.all(idx >= 0, axis=1) & (idx[:, 0] < extents[0]) & (idx[:, 1] < extents[1])
    if z_range is not None:
        inside &= (pts[:, 2] >= z_range[0]) & (pts[:, 2] < z_range[1])
    pts, idx = pts[inside], idx[inside]
    if not len(pts):
        return PillarGrid(np.zeros((0, 2), dtype=np.int64), np.zeros((0, 7)), np.zeros(0, dtype=np.int64),
                          tuple(extents), tuple(origin), (dx, dy))
    keys = np.ravel_multi_index(idx.T, extents)
    keep = _group_first_k(keys, max_points_per_pillar)
    pts, keys = pts[keep], keys[keep]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts[:, :3])
    centers = sums / counts[:, None]
    feats = np.concatenate([pts, pts[:, :3] - centers[inverse]], axis=1)
    coords = np.stack(np.unravel_index(uniq, extents), axis=1).astype(np.int64)
    return PillarGrid(coords, feats, inverse.astype(np.int64), tuple(extents), tuple(origin), (dx, dy))


# ----------------------------------------------------------------- boxes


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple  # (l, w, h)
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", float(normalize_angle(self.yaw)))

    def as_array(self):
        return np.array([*self.center, *self.size, self.yaw])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[:3]), tuple(a[3:6]), float(a[6]))

    def bev_corners(self):
        return bev_corners(self.as_array())


def bev_corners(box):
    """Counter-clockwise BEV footprint corners of a [x,y,z,l,w,h,yaw] box."""
    x, y, _, l, w, _, yaw = (float(v) for v in box[:7])
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    out = []
    for px, py in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((x + c * px - s * py, y + s * px + c * py))
    return out


def polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of one convex CCW polygon by another."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_intersection(a, b):
    a = _box_array(a)
    b = _box_array(b)
    ra = math.hypot(a[3], a[4]) / 2.0
    rb = math.hypot(b[3], b[4]) / 2.0
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    return polygon_area(clip_convex(bev_corners(a), bev_corners(b)))


def _box_array(box):
    return box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)


def rotated_iou_bev(a, b):
    a = _box_array(a)
    b = _box_array(b)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a, b):
    a = _box_array(a)
    b = _box_array(b)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    lo = max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    hi = min(a[2] + a[5] / 2, b[2] + b[5] / 2)
    if hi <= lo:
        return 0.0
    inter = bev_intersection(a, b) * (hi - lo)
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_matrix(boxes_a, boxes_b, fn=rotated_iou_bev):
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


def box2d_iou(a, b):
    """IoU of axis-aligned pixel boxes (left, top, right, bottom)."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def box_corners_3d(box):
    """(8, 3) corners of a [x,y,z,l,w,h,yaw] box."""
    box = _box_array(box)
    bev = np.array(bev_corners(box))
    z0, z1 = box[2] - box[5] / 2, box[2] + box[5] / 2
    return np.concatenate([np.c_[bev, np.full(4, z0)], np.c_[bev, np.full(4, z1)]])
