"""Whole-network assembly: frame preparation, parameters, loss, inference."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import head as hd
from . import kitti_io as kio
from . import sparse as sp
from . import streams as st
from .config import RunConfig


def frame_seed(seed, frame_id):
    digest = hashlib.sha256(f"{seed}:{frame_id}".encode()).hexdigest()
    return int(digest[:8], 16)


@dataclass
class FrameInputs:
    frame_id: str
    lidar_voxels: sp.SparseTensor
    hybrid_voxels: sp.SparseTensor
    pillars: geo.PillarGrid
    calib: kio.Calibration | None = None


def prepare_frame(lidar, pseudo, calib, cfg: RunConfig, frame_id="", seed=None) -> FrameInputs:
    seed = cfg.train.seed if seed is None else seed
    grid = st.voxel_grid(cfg)
    lidar_vox = geo.voxelize(lidar, grid, cfg.grid.max_points_per_voxel)
    if cfg.streams.use_rgb and pseudo is not None and len(pseudo):
        hybrid = kio.make_hybrid_cloud(lidar, pseudo, cfg.train.keep_fraction, frame_seed(seed, frame_id))
        hybrid_vox = geo.voxelize(hybrid, grid, cfg.grid.max_points_per_voxel)
    else:
        hybrid_vox = lidar_vox
    return FrameInputs(frame_id, lidar_vox, hybrid_vox, st.pillar_grid_of(lidar, cfg), calib)


def inputs_to_tensors(inp: FrameInputs) -> dict:
    out = {
        "lidar.coords": inp.lidar_voxels.coords,
        "lidar.feats": inp.lidar_voxels.feats,
        "hybrid.coords": inp.hybrid_voxels.coords,
        "hybrid.feats": inp.hybrid_voxels.feats,
        "pillar.coords": inp.pillars.coords,
        "pillar.point_feats": inp.pillars.point_feats,
        "pillar.point_pillar": inp.pillars.point_pillar,
    }
    if inp.calib is not None:
        out["calib.P2"] = inp.calib.P2
        out["calib.R0_rect"] = inp.calib.R0_rect
        out["calib.Tr_velo_to_cam"] = inp.calib.Tr_velo_to_cam
    return out


def inputs_from_tensors(frame_id, t: dict, cfg: RunConfig) -> FrameInputs:
    grid = st.voxel_grid(cfg)
    r = cfg.grid.point_range
    pillars = geo.PillarGrid(t["pillar.coords"], t["pillar.point_feats"], t["pillar.point_pillar"],
                             st.pillar_extents(cfg), (r[0], r[1]), tuple(cfg.grid.pillar_size))
    calib = None
    if "calib.P2" in t:
        calib = kio.Calibration(t["calib.P2"], t["calib.R0_rect"], t["calib.Tr_velo_to_cam"])
    return FrameInputs(
        frame_id,
        sp.SparseTensor(t["lidar.coords"], t["lidar.feats"], grid.extents, grid),
        sp.SparseTensor(t["hybrid.coords"], t["hybrid.feats"], grid.extents, grid),
        pillars,
        calib,
    )


def init_params(cfg: RunConfig, seed=None) -> ad.ParamStore:
    rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
    params = ad.ParamStore()
    st.init_stream_params(params, cfg, rng)
    hd.init_head_params(params, st.fused_channels(cfg), cfg.head, rng)
    return params


@dataclass
class Features:
    f_h: sp.SparseTensor
    parts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def forward_features(tape, inp: FrameInputs, cfg: RunConfig) -> Features:
    s = cfg.streams
    parts, timings = {}, {}
    t0 = time.perf_counter()
    if s.use_hc:
        parts["hc"] = st.height_stream_forward(None, tape.params, cfg, tape, voxels=inp.lidar_voxels)
        timings["hc"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if s.use_pillar:
        parts["pillar"] = st.pillarnet_forward(None, tape.params, cfg, tape, pillars=inp.pillars)
        timings["pillar"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if s.use_mm:
        parts["mm"] = st.mm_stream_forward(None, inp.calib, tape.params, cfg, tape, voxels=inp.hybrid_voxels)
        timings["mm"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    f_h = st.fuse_streams(parts.get("hc"), parts.get("pillar"), parts.get("mm"), tape.params, cfg, tape)
    timings["fusion"] = time.perf_counter() - t0
    return Features(f_h, parts, timings)


def gt_arrays(labels, calib, cfg: RunConfig):
    """LiDAR-frame boxes and class ids of the configured classes."""
    boxes, cls = [], []
    for obj in labels:
        if obj.cls in cfg.head.classes:
            boxes.append(obj.lidar_box(calib).as_array())
            cls.append(cfg.head.classes.index(obj.cls))
    return np.array(boxes, dtype=np.float64).reshape(-1, 7), np.array(cls, dtype=np.int64)


def propose(rpn: hd.RPNOutput, cfg: RunConfig, n_pre, n_post):
    """Top-scoring decoded anchors after NMS: (boxes, class ids)."""
    h = cfg.head
    scores = rpn.cls.value
    n = len(scores)
    if not n:
        return np.zeros((0, 7)), np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))[:n_pre]
    dirs = (rpn.dir.value[order] > 0).astype(np.int64)
    boxes, ok = hd.decode_boxes(rpn.anchors[order], rpn.box.value[order], dirs, h.dir_offset)
    boxes, order = boxes[ok], order[ok]
    kept = []
    for ci in range(len(h.classes)):
        m = np.flatnonzero(rpn.anchor_cls[order] == ci)
        if len(m):
            kept += [m[k] for k in hd.nms_indices(boxes[m], scores[order[m]], h.rpn_nms_iou, n_post)]
    kept = sorted(kept, key=lambda i: (-scores[order[i]], i))[:n_post]
    kept = np.array(kept, dtype=np.int64)
    return boxes[kept].reshape(-1, 7), rpn.anchor_cls[order[kept]].reshape(-1)


def jitter_gt(gt_boxes, rng, xy=0.2, yaw=0.1, size=0.05):
    out = np.array(gt_boxes, dtype=np.float64).reshape(-1, 7)
    if not len(out):
        return out
    out[:, :2] += rng.normal(0, xy, size=(len(out), 2))
    out[:, 3:6] *= np.exp(rng.normal(0, size, size=(len(out), 3)))
    out[:, 6] = geo.normalize_angle(out[:, 6] + rng.normal(0, yaw, size=len(out)))
    return out


@dataclass
class LossResult:
    loss: ad.Node
    terms: dict
    tape: ad.Tape
    proposals: tuple


def training_loss(params, inp: FrameInputs, gt_boxes, gt_cls, cfg: RunConfig, rng=None,
                  anchor_cache=None, proposals=None) -> LossResult:
    """Full forward and composite loss for one frame.

    ``proposals`` (boxes, class ids) freezes the discrete RoI selection,
    which gradient checks need.
    """
    tape = ad.Tape(params)
    feats = forward_features(tape, inp, cfg)
    bev = st.bev_geometry(cfg)
    rpn = hd.rpn_forward(feats.f_h, params, cfg.head, bev, tape)
    key = inp.frame_id
    if anchor_cache is not None and key in anchor_cache:
        a_t = anchor_cache[key]
    else:
        a_t = hd.assign_targets(rpn.anchors, rpn.anchor_cls, gt_boxes, gt_cls, cfg.head)
        if anchor_cache is not None:
            anchor_cache[key] = a_t
    if proposals is None:
        p_boxes, p_cls = propose(rpn, cfg, cfg.head.pre_nms, cfg.head.post_nms)
        if cfg.head.gt_proposals and len(gt_boxes):
            rng = rng if rng is not None else np.random.default_rng(0)
            p_boxes = np.concatenate([p_boxes, jitter_gt(gt_boxes, rng)])
            p_cls = np.concatenate([p_cls, gt_cls])
    else:
        p_boxes, p_cls = proposals
    head_out, roi_t = None, None
    if len(p_boxes):
        rois = hd.roi_pool(feats.f_h, p_boxes, bev, cfg.head.roi_grid)
        head_out = hd.det_head_forward(rois, params, cfg.head, tape)
        roi_t = hd.assign_targets(p_boxes, p_cls, gt_boxes, gt_cls, cfg.head,
                                  cfg.head.roi_pos_iou, cfg.head.roi_neg_iou, force_best=False)
    total, terms = hd.compute_loss(rpn, head_out, a_t, roi_t, cfg.head)
    return LossResult(total, terms, tape, (p_boxes, p_cls))


def loss_and_grads(params, inp, gt_boxes, gt_cls, cfg, rng=None, anchor_cache=None, proposals=None):
    res = training_loss(params, inp, gt_boxes, gt_cls, cfg, rng, anchor_cache, proposals)
    return float(res.loss.value), res.tape.backward(res.loss), res


def infer_frame(params, inp: FrameInputs, cfg: RunConfig):
    """Detections (LiDAR frame) and per-stage wall-clock seconds."""
    h = cfg.head
    tape = ad.Tape(params)
    t_all = time.perf_counter()
    feats = forward_features(tape, inp, cfg)
    timings = dict(feats.timings)
    t0 = time.perf_counter()
    bev = st.bev_geometry(cfg)
    dets = []
    if len(feats.f_h):
        rpn = hd.rpn_forward(feats.f_h, params, h, bev, tape)
        p_boxes, p_cls = propose(rpn, cfg, h.pre_nms, h.post_nms)
        if len(p_boxes):
            rois = hd.roi_pool(feats.f_h, p_boxes, bev, h.roi_grid)
            out = hd.det_head_forward(rois, params, h, tape)
            scores = ad._sigmoid(out.score.value)
            refined, ok = hd.decode_boxes(p_boxes, out.deltas.value)
            ok &= scores >= h.score_threshold
            for ci, name in enumerate(h.classes):
                idx = np.flatnonzero(ok & (p_cls == ci))
                if not len(idx):
                    continue
                keep = hd.nms_indices(refined[idx], scores[idx], h.final_nms_iou, h.max_detections)
                for k in keep:
                    i = idx[k]
                    box = geo.Box3D.from_array(refined[i])
                    dets.append(hd.Detection(name, float(scores[i]), box, int(hd.direction_bits(box.yaw, h.dir_offset))))
    dets.sort(key=lambda d: -d.score)
    dets = dets[: h.max_detections]
    timings["head"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_all
    return dets, timings
