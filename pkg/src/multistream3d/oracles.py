"""Slow, independent reference implementations used by the self-test and
the test suite. None of these call into the code they check."""

from __future__ import annotations

import itertools
import math

import numpy as np


# ------------------------------------------------------------ convolution


def dense_correlation(dense, weights, bias, stride=1):
    """Direct per-output-cell correlation over a zero-padded grid.

    ``weights`` is (K^d, C_in, C_out) with offsets enumerated in C order
    over (0..K-1)^d, offset t reading input ``stride*o + t - K//2``.
    """
    dense = np.asarray(dense, dtype=np.float64)
    ndim = dense.ndim - 1
    k = round(weights.shape[0] ** (1.0 / ndim))
    pad = k // 2
    ext = dense.shape[:ndim]
    o_ext = tuple((e + stride - 1) // stride for e in ext)
    out = np.zeros(o_ext + (weights.shape[2],))
    offsets = list(itertools.product(range(k), repeat=ndim))
    for o in np.ndindex(*o_ext):
        acc = np.array(bias, dtype=np.float64, copy=True)
        for t, off in enumerate(offsets):
            src = tuple(stride * oi + ti - pad for oi, ti in zip(o, off))
            if all(0 <= s < e for s, e in zip(src, ext)):
                acc = acc + dense[src] @ weights[t]
        out[o] = acc
    return out


def strided_active_set(occupied, k, stride):
    """Output cells reached by at least one active input through the kernel."""
    occupied = np.asarray(occupied, dtype=bool)
    ndim = occupied.ndim
    pad = k // 2
    o_ext = tuple((e + stride - 1) // stride for e in occupied.shape)
    active = np.zeros(o_ext, dtype=bool)
    for o in np.ndindex(*o_ext):
        for off in itertools.product(range(k), repeat=ndim):
            src = tuple(stride * oi + ti - pad for oi, ti in zip(o, off))
            if all(0 <= s < e for s, e in zip(src, occupied.shape)) and occupied[src]:
                active[o] = True
                break
    return active


# ------------------------------------------------------------- reductions


def scatter_max_reference(values, cells, extents):
    """dict cell -> channel-wise max, skipping out-of-range rows."""
    out = {}
    for v, c in zip(np.asarray(values), np.asarray(cells)):
        c = tuple(int(x) for x in c)
        if not all(0 <= x < e for x, e in zip(c, extents)):
            continue
        out[c] = v.copy() if c not in out else np.maximum(out[c], v)
    return out


def height_max_reference(coords, feats):
    """dict (i, j) -> max over k of the active voxels in that column."""
    cols = {}
    for c, f in zip(np.asarray(coords), np.asarray(feats)):
        key = (int(c[0]), int(c[1]))
        cols.setdefault(key, []).append(f)
    return {key: np.max(np.stack(v), axis=0) for key, v in cols.items()}


# ----------------------------------------------------------------- boxes


def point_in_rotated_rect(px, py, box):
    x, y, _, l, w, _, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - x, py - y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)


def monte_carlo_bev_iou(a, b, n=400_000, seed=0):
    rng = np.random.default_rng(seed)
    ra = math.hypot(a[3], a[4]) / 2
    rb = math.hypot(b[3], b[4]) / 2
    lo_x, hi_x = min(a[0] - ra, b[0] - rb), max(a[0] + ra, b[0] + rb)
    lo_y, hi_y = min(a[1] - ra, b[1] - rb), max(a[1] + ra, b[1] + rb)
    px = rng.uniform(lo_x, hi_x, n)
    py = rng.uniform(lo_y, hi_y, n)
    ina = point_in_rotated_rect(px, py, a)
    inb = point_in_rotated_rect(px, py, b)
    area = (hi_x - lo_x) * (hi_y - lo_y)
    inter = np.count_nonzero(ina & inb) / n * area
    union = a[3] * a[4] + b[3] * b[4] - inter
    return inter / union


def nms_exhaustive(iou, scores, threshold):
    """Kept set of greedy NMS found by subset enumeration.

    Greedy NMS keeps exactly the unique set K where a box is in K iff no
    higher-priority member of K overlaps it above the threshold.
    """
    n = len(scores)
    rank = sorted(range(n), key=lambda i: (-scores[i], i))
    pos = {i: r for r, i in enumerate(rank)}
    for mask in range(1 << n):
        kept = {i for i in range(n) if mask >> i & 1}
        ok = True
        for i in range(n):
            blocked = any(iou[i][j] > threshold and pos[j] < pos[i] for j in kept if j != i)
            if (i in kept) == blocked:
                ok = False
                break
        if ok:
            return sorted(kept, key=lambda i: pos[i])
    raise AssertionError("no consistent kept set")


# ------------------------------------------------------------ evaluation


def greedy_match_reference(iou, scores, threshold):
    """Detections (score desc, index asc) claim the best free GT at >= threshold.

    Works on a precomputed IoU matrix; returns per-detection matched GT or -1.
    """
    iou = np.array(iou, dtype=np.float64)
    if iou.ndim != 2:
        iou = iou.reshape(len(scores), 0)
    taken = np.zeros(iou.shape[1], dtype=bool)
    out = [-1] * len(scores)
    for i in sorted(range(len(scores)), key=lambda i: (-scores[i], i)):
        row = np.where(taken | (iou[i] < threshold), -np.inf, iou[i])
        if row.size and np.isfinite(row.max()):
            j = int(np.argmax(row))
            out[i] = j
            taken[j] = True
    return out


def ap_by_rematching(frames, threshold, n_points=40, r11=False):
    """AP recomputed from scratch for every score cutoff.

    ``frames`` is a list of (iou matrix, det scores, n_gt). For each distinct
    score s the detections with score >= s are re-matched and counted; the
    interpolated value at recall r is the best precision over cutoffs whose
    recall is at least r.
    """
    all_scores = sorted({float(s) for _, sc, _ in frames for s in sc}, reverse=True)
    n_gt = sum(g for _, _, g in frames)
    if n_gt == 0:
        return float("nan")
    points = []
    for s in all_scores:
        tp = fp = 0
        for iou, sc, _ in frames:
            sc = list(sc)
            keep = [i for i in range(len(sc)) if sc[i] >= s]
            if not keep:
                continue
            sub = np.array(iou, dtype=np.float64)[keep]
            m = greedy_match_reference(sub, [sc[i] for i in keep], threshold)
            tp += sum(1 for v in m if v >= 0)
            fp += sum(1 for v in m if v < 0)
        points.append((tp / n_gt, tp / (tp + fp)))
    rs = [i / 10 for i in range(11)] if r11 else [i / n_points for i in range(1, n_points + 1)]
    total = 0.0
    for r in rs:
        cand = [p for rec, p in points if rec >= r - 1e-12]
        total += max(cand) if cand else 0.0
    return 100.0 * total / len(rs)
