"""Synthetic KITTI-layout scenes with planted cars, for tests and overfitting."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import kitti_io as kio

GROUND_Z = -1.73


def kitti_like_calibration():
    p2 = np.array([[721.5377, 0.0, 609.5593, 44.85728], [0.0, 721.5377, 172.854, 0.2163791], [0.0, 0.0, 1.0, 0.002745884]])
    # LiDAR (forward, left, up) -> camera (right, down, forward)
    tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]])
    return kio.Calibration(p2, np.eye(3), tr)


@dataclass
class Scene:
    lidar: kio.PointCloud
    pseudo: kio.PointCloud
    calib: kio.Calibration
    boxes: np.ndarray  # (G, 7) LiDAR frame
    labels: list


def _surface_points(box, n, rng):
    """Uniform samples over the four sides and the roof of a box."""
    x, y, z, l, w, h, yaw = box
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.zeros((n, 3))
    side = np.where(face == 0, 0.5, -0.5)
    m = face < 2
    local[m] = np.c_[u[m] * l, side[m] * w, v[m] * h]
    side = np.where(face == 2, 0.5, -0.5)
    m = (face == 2) | (face == 3)
    local[m] = np.c_[side[m] * l, u[m] * w, v[m] * h]
    m = face == 4
    local[m] = np.c_[u[m] * l, v[m] * w, np.full(m.sum(), 0.5 * h)]
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.c_[c * local[:, 0] - s * local[:, 1] + x, s * local[:, 0] + c * local[:, 1] + y, local[:, 2] + z]
    return out


def _ground(n, point_range, rng):
    x = rng.uniform(point_range[0] + 0.5, point_range[3] - 0.5, size=n)
    y = rng.uniform(point_range[1] + 0.5, point_range[4] - 0.5, size=n)
    z = GROUND_Z + rng.normal(0, 0.02, size=n)
    return np.c_[x, y, z]


def plant_boxes(rng, n, point_range, size=(3.9, 1.6, 1.56), min_gap=1.0, max_tries=200):
    boxes = []
    for _ in range(max_tries):
        if len(boxes) == n:
            break
        x = rng.uniform(max(point_range[0] + 5.0, 5.0), point_range[3] - 3.0)
        y = rng.uniform(point_range[1] + 3.0, point_range[4] - 3.0)
        if abs(y) > 0.6 * x:
            continue
        l, w, h = (s * rng.uniform(0.95, 1.05) for s in size)
        box = np.array([x, y, GROUND_Z + h / 2, l, w, h, rng.uniform(-math.pi, math.pi)])
        if all(math.hypot(x - b[0], y - b[1]) > (math.hypot(l, w) + math.hypot(b[3], b[4])) / 2 + min_gap for b in boxes):
            boxes.append(box)
    return np.array(boxes).reshape(-1, 7)


def make_scene(seed, point_range=(0.0, -12.8, -3.0, 25.6, 12.8, 1.0), n_objects=(1, 3),
               car_points=150, ground_points=200, pseudo_factor=3.0) -> Scene:
    rng = np.random.default_rng(seed)
    calib = kitti_like_calibration()
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    boxes = plant_boxes(rng, n, point_range)
    parts = [_ground(ground_points, point_range, rng)]
    pseudo_parts = [_ground(int(ground_points * pseudo_factor), point_range, rng)]
    for b in boxes:
        parts.append(_surface_points(b, car_points, rng))
        pseudo_parts.append(_surface_points(b, int(car_points * pseudo_factor), rng))
    xyz = np.concatenate(parts)
    pxyz = np.concatenate(pseudo_parts)
    lidar = kio.PointCloud.from_array(np.c_[xyz, rng.uniform(0, 1, len(xyz))].astype(np.float32), kio.LIDAR)
    pseudo = kio.PointCloud.from_array(np.c_[pxyz, rng.uniform(0, 1, len(pxyz))].astype(np.float32), kio.PSEUDO)
    labels = [kio.label_from_lidar_box(geo.Box3D.from_array(b), calib, "Car") for b in boxes]
    return Scene(lidar, pseudo, calib, boxes, labels)


def write_dataset(root, n_frames=8, seed=0, **scene_kw):
    """Write a KITTI-layout dataset; returns the frame ids."""
    sub = {k: os.path.join(root, "training", k) for k in ("velodyne", "velodyne_pseudo", "calib", "label_2")}
    for d in sub.values():
        os.makedirs(d, exist_ok=True)
    os.makedirs(os.path.join(root, "ImageSets"), exist_ok=True)
    ids = [f"{i:06d}" for i in range(n_frames)]
    for i, fid in enumerate(ids):
        scene = make_scene(seed * 1000 + i, **scene_kw)
        kio.write_velodyne(os.path.join(sub["velodyne"], fid + ".bin"), scene.lidar)
        kio.write_velodyne(os.path.join(sub["velodyne_pseudo"], fid + ".bin"), scene.pseudo)
        kio.write_calibration(os.path.join(sub["calib"], fid + ".txt"), scene.calib)
        kio.write_labels(os.path.join(sub["label_2"], fid + ".txt"), scene.labels)
    with open(os.path.join(root, "ImageSets", "train.txt"), "w") as f:
        f.write("\n".join(ids) + "\n")
    return ids
