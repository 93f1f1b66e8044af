"""Two-stage detection head over the fused BEV map.

Anchors sit at every active BEV cell (one template per class and yaw), a
1x1 RPN scores and regresses them, proposals are RoI-pooled into a fixed
7x7 grid and refined by fully connected layers, then NMS.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from . import autodiff as ad
from . import geometry as geo
from .config import HeadConfig

log = logging.getLogger(__name__)


@dataclass
class Detection:
    cls: str
    score: float
    box: geo.Box3D
    direction: int = 0


# ---------------------------------------------------------------- anchors


def anchors_per_cell(cfg: HeadConfig):
    return len(cfg.classes) * len(cfg.anchor_yaws)


def make_anchors(coords, bev, cfg: HeadConfig):
    """(N*A, 7) anchors ordered cell-major, then class, then yaw; plus class ids."""
    centers = bev.centers(coords)
    rows, cls_ids = [], []
    for c in centers:
        for ci, name in enumerate(cfg.classes):
            l, w, h = cfg.anchor_sizes[name]
            for yaw in cfg.anchor_yaws:
                rows.append((c[0], c[1], cfg.anchor_z[name], l, w, h, yaw))
                cls_ids.append(ci)
    return np.array(rows, dtype=np.float64).reshape(-1, 7), np.array(cls_ids, dtype=np.int64)


def init_head_params(params: ad.ParamStore, in_channels, cfg: HeadConfig, rng):
    a = anchors_per_cell(cfg)
    prior = -math.log((1 - 0.01) / 0.01)
    params.add("rpn.cls.W", rng.normal(0, 0.01, size=(in_channels, a)))
    params.add("rpn.cls.b", np.full(a, prior))
    params.add("rpn.box.W", rng.normal(0, 0.001, size=(in_channels, 7 * a)))
    params.add("rpn.box.b", np.zeros(7 * a))
    params.add("rpn.dir.W", rng.normal(0, 0.01, size=(in_channels, a)))
    params.add("rpn.dir.b", np.zeros(a))
    width = cfg.roi_grid**2 * in_channels
    for i, h in enumerate(cfg.head_hidden):
        params.add(f"head.fc{i}.W", rng.normal(0, math.sqrt(2.0 / width), size=(width, h)))
        params.add(f"head.fc{i}.b", np.zeros(h))
        width = h
    params.add("head.score.W", rng.normal(0, 0.01, size=(width, 1)))
    params.add("head.score.b", np.zeros(1))
    params.add("head.delta.W", rng.normal(0, 0.001, size=(width, 7)))
    params.add("head.delta.b", np.zeros(7))


# -------------------------------------------------------------------- RPN


@dataclass
class RPNOutput:
    cls: ad.Node  # (N*A,) objectness logits
    box: ad.Node  # (N*A, 7) deltas
    dir: ad.Node  # (N*A,) direction logits
    anchors: np.ndarray
    anchor_cls: np.ndarray


def rpn_forward(f_h, params, cfg: HeadConfig, bev, tape=None):
    tape = tape if tape is not None else ad.Tape(params)
    feats = f_h.feats if isinstance(f_h.feats, ad.Node) else tape.constant(f_h.feats)
    if feats.shape[1] != params["rpn.cls.W"].shape[0]:
        raise ad.ShapeError(f"RPN expects {params['rpn.cls.W'].shape[0]} channels, got {feats.shape[1]}")
    n = feats.shape[0]
    a = anchors_per_cell(cfg)
    cls = ad.linear(feats, tape.param("rpn.cls.W"), tape.param("rpn.cls.b"))
    box = ad.linear(feats, tape.param("rpn.box.W"), tape.param("rpn.box.b"))
    dirl = ad.linear(feats, tape.param("rpn.dir.W"), tape.param("rpn.dir.b"))
    anchors, anchor_cls = make_anchors(f_h.coords, bev, cfg)
    return RPNOutput(
        ad.reshape(cls, (n * a,)),
        ad.reshape(box, (n * a, 7)),
        ad.reshape(dirl, (n * a,)),
        anchors,
        anchor_cls,
    )


# --------------------------------------------------------------- box code


def encode_boxes(boxes, anchors):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    d = np.empty_like(boxes)
    d[:, 0] = (boxes[:, 0] - anchors[:, 0]) / diag
    d[:, 1] = (boxes[:, 1] - anchors[:, 1]) / diag
    d[:, 2] = (boxes[:, 2] - anchors[:, 2]) / anchors[:, 5]
    d[:, 3:6] = np.log(boxes[:, 3:6] / anchors[:, 3:6])
    d[:, 6] = geo.normalize_angle(boxes[:, 6] - anchors[:, 6])
    return d


def direction_bits(yaw, offset=math.pi / 4):
    return (np.mod(np.asarray(yaw) - offset, 2 * math.pi) >= math.pi).astype(np.int64)


def decode_boxes(anchors, deltas, dir_bits=None, dir_offset=math.pi / 4):
    """Inverse of :func:`encode_boxes`. Returns (boxes, finite mask);
    rows with non-finite deltas come back as NaN and are flagged False."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 7)
    ok = np.all(np.isfinite(deltas), axis=1)
    if (~ok).any():
        log.warning("decode: dropped %d proposals with non-finite deltas", int((~ok).sum()))
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.full_like(anchors, np.nan)
    a, d = anchors[ok], deltas[ok]
    with np.errstate(over="ignore"):
        out[ok, 0] = d[:, 0] * diag[ok] + a[:, 0]
        out[ok, 1] = d[:, 1] * diag[ok] + a[:, 1]
        out[ok, 2] = d[:, 2] * a[:, 5] + a[:, 2]
        out[ok, 3:6] = np.exp(d[:, 3:6]) * a[:, 3:6]
    yaw = a[:, 6] + d[:, 6]
    if dir_bits is not None:
        bits = np.asarray(dir_bits)[ok]
        yaw = np.mod(yaw - dir_offset, math.pi) + dir_offset + math.pi * bits
    out[ok, 6] = geo.normalize_angle(yaw)
    ok &= np.all(np.isfinite(out), axis=1)
    return out, ok


# ---------------------------------------------------------------- RoI pool


def pool_matrix(coords, bev, proposals, grid=7):
    """Sparse averaging matrix (R*grid*grid, N) over active cells.

    Each proposal's axis-aligned BEV footprint is split into grid x grid
    bins; a cell belongs to a bin when their rectangles overlap with
    positive area. Bin index is a * grid + b with a along x.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    keys = {tuple(c): r for r, c in enumerate(np.asarray(coords).tolist())}
    ox, oy = bev.origin
    cx, cy = bev.cell_size
    rows, cols, vals = [], [], []
    outside = np.zeros(len(proposals), dtype=bool)
    for p, box in enumerate(proposals):
        corners = np.array(geo.bev_corners(box))
        x0, y0 = corners.min(axis=0)
        x1, y1 = corners.max(axis=0)
        i0, i1 = int(math.floor((x0 - ox) / cx)), int(math.floor((x1 - ox) / cx))
        j0, j1 = int(math.floor((y0 - oy) / cy)), int(math.floor((y1 - oy) / cy))
        cand = [(i, j, keys[(i, j)]) for i in range(i0, i1 + 1) for j in range(j0, j1 + 1) if (i, j) in keys]
        if not cand:
            outside[p] = True
            continue
        ci = np.array([c[0] for c in cand])
        cj = np.array([c[1] for c in cand])
        cr = np.array([c[2] for c in cand])
        ex = np.linspace(x0, x1, grid + 1)
        ey = np.linspace(y0, y1, grid + 1)
        lo_x, hi_x = ox + ci * cx, ox + (ci + 1) * cx
        lo_y, hi_y = oy + cj * cy, oy + (cj + 1) * cy
        mx = (ex[:-1, None] < hi_x[None]) & (ex[1:, None] > lo_x[None])
        my = (ey[:-1, None] < hi_y[None]) & (ey[1:, None] > lo_y[None])
        member = mx[:, None, :] & my[None, :, :]
        counts = member.sum(axis=2)
        for a in range(grid):
            for b in range(grid):
                n = counts[a, b]
                if n:
                    sel = cr[member[a, b]]
                    rows.extend([(p * grid + a) * grid + b] * n)
                    cols.extend(sel.tolist())
                    vals.extend([1.0 / n] * n)
    m = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(len(proposals) * grid * grid, len(coords)))
    return m, outside


@dataclass
class RoIFeature:
    feats: object  # (R, grid*grid*C) Node or ndarray
    outside: np.ndarray
    grid: int


def roi_pool(f_h, proposals, bev, grid=7, tape=None):
    m, outside = pool_matrix(f_h.coords, bev, proposals, grid)
    r = len(np.asarray(proposals).reshape(-1, 7))
    if isinstance(f_h.feats, ad.Node):
        c = f_h.feats.shape[1]
        pooled = ad.reshape(ad.spmm(m, f_h.feats), (r, grid * grid * c))
    else:
        feats = np.asarray(f_h.feats)
        pooled = np.asarray(m @ feats).reshape(r, grid * grid * feats.shape[1])
    return RoIFeature(pooled, outside, grid)


@dataclass
class HeadOutput:
    score: ad.Node  # (R,) logits
    deltas: ad.Node  # (R, 7)


def det_head_forward(rois, params, cfg: HeadConfig, tape=None):
    feats = rois.feats if isinstance(rois, RoIFeature) else rois
    tape = tape if tape is not None else (feats.tape if isinstance(feats, ad.Node) else ad.Tape(params))
    x = feats if isinstance(feats, ad.Node) else tape.constant(feats)
    first = "head.fc0.W" if cfg.head_hidden else "head.score.W"
    if x.shape[1] != params[first].shape[0]:
        raise ad.ShapeError(f"head expects {params[first].shape[0]} features, got {x.shape[1]}")
    for i in range(len(cfg.head_hidden)):
        x = ad.relu(ad.linear(x, tape.param(f"head.fc{i}.W"), tape.param(f"head.fc{i}.b")))
    score = ad.linear(x, tape.param("head.score.W"), tape.param("head.score.b"))
    deltas = ad.linear(x, tape.param("head.delta.W"), tape.param("head.delta.b"))
    return HeadOutput(ad.reshape(score, (x.shape[0],)), deltas)


# -------------------------------------------------------------------- NMS


def nms_indices(boxes, scores, iou_threshold, max_out=None, iou_fn=geo.rotated_iou_bev):
    """Greedy NMS; ties broken by original index. Returns kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("NMS scores must be finite")
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept = []
    for i in order:
        if max_out is not None and len(kept) >= max_out:
            break
        if all(iou_fn(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(int(i))
    return kept


def nms(dets, iou_threshold, max_out=None):
    if not dets:
        return []
    boxes = np.array([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold, max_out)]


# ------------------------------------------------------------------ targets


@dataclass
class AnchorTargets:
    labels: np.ndarray  # 1 pos, 0 neg, -1 ignore
    matched: np.ndarray  # gt index per anchor, -1 if none
    box: np.ndarray  # (N, 7) encoded targets (rows valid where labels == 1)
    dir: np.ndarray  # (N,) direction bits


def class_iou(boxes, box_cls, gts, gt_cls):
    iou = np.zeros((len(boxes), len(gts)))
    for j, g in enumerate(gts):
        # skip pairs that cannot overlap
        reach = (np.hypot(boxes[:, 3], boxes[:, 4]) + math.hypot(g[3], g[4])) / 2
        near = np.flatnonzero((np.hypot(boxes[:, 0] - g[0], boxes[:, 1] - g[1]) < reach) & (box_cls == gt_cls[j]))
        for i in near:
            iou[i, j] = geo.rotated_iou_bev(boxes[i], g)
    return iou


def assign_targets(anchors, anchor_cls, gt_boxes, gt_cls, cfg: HeadConfig, pos_iou=None, neg_iou=None, force_best=True):
    pos_iou = cfg.pos_iou if pos_iou is None else pos_iou
    neg_iou = cfg.neg_iou if neg_iou is None else neg_iou
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    box = np.zeros((n, 7))
    dirs = np.zeros(n, dtype=np.int64)
    if not len(gt_boxes) or not n:
        return AnchorTargets(labels, matched, box, dirs)
    iou = class_iou(anchors, anchor_cls, gt_boxes, np.asarray(gt_cls))
    best = iou.max(axis=1)
    arg = iou.argmax(axis=1)
    labels[(best >= neg_iou) & (best < pos_iou)] = -1
    pos = best >= pos_iou
    if force_best:
        for j in range(len(gt_boxes)):
            col = iou[:, j]
            if col.max() > 0:
                top = np.flatnonzero(col == col.max())
                pos[top] = True
                arg[top] = j
    labels[pos] = 1
    matched[pos] = arg[pos]
    if pos.any():
        box[pos] = encode_boxes(gt_boxes[arg[pos]], anchors[pos])
        dirs[pos] = direction_bits(gt_boxes[arg[pos], 6], cfg.dir_offset)
    return AnchorTargets(labels, matched, box, dirs)


def _box_loss(pred: ad.Node, target, weights, delta):
    """Smooth-L1 on the first six deltas and on sin(pred_yaw - target_yaw)."""
    t6 = target[:, 6]
    p6 = ad.column(pred, 6, 7)
    lhs = ad.concat([ad.column(pred, 0, 6), ad.mul(ad.sin(p6), np.cos(t6)[:, None])])
    rhs = ad.concat([pred.tape.constant(target[:, :6]), ad.mul(ad.cos(p6), np.sin(t6)[:, None])])
    return ad.smooth_l1(lhs, rhs, delta, weights)


def compute_loss(rpn: RPNOutput, head: HeadOutput | None, anchor_t: AnchorTargets, roi_t: AnchorTargets | None, cfg: HeadConfig):
    """Weighted total and per-term breakdown (floats)."""
    pos = (anchor_t.labels == 1).astype(np.float64)
    care = (anchor_t.labels >= 0).astype(np.float64)
    terms = {
        "cls": ad.focal_binary(rpn.cls, pos, cfg.focal_alpha, cfg.focal_gamma, care),
        "box": _box_loss(rpn.box, anchor_t.box, pos, cfg.smooth_l1_delta),
        "dir": ad.bce_logits(rpn.dir, anchor_t.dir.astype(np.float64), pos),
    }
    weights = {"cls": cfg.w_cls, "box": cfg.w_box, "dir": cfg.w_dir}
    if head is not None and roi_t is not None:
        rpos = (roi_t.labels == 1).astype(np.float64)
        rcare = (roi_t.labels >= 0).astype(np.float64)
        terms["roi_cls"] = ad.focal_binary(head.score, rpos, cfg.focal_alpha, cfg.focal_gamma, rcare)
        terms["roi_box"] = _box_loss(head.deltas, roi_t.box, rpos, cfg.smooth_l1_delta)
        weights["roi_cls"], weights["roi_box"] = cfg.w_roi_cls, cfg.w_roi_box
    total = None
    for k, v in terms.items():
        part = ad.scale(v, weights[k])
        total = part if total is None else ad.add(total, part)
    return total, {k: float(v.value) for k, v in terms.items()}
