"""Oracle suites behind ``multistream3d selftest``."""

from __future__ import annotations

import math
import time

import numpy as np

from . import geometry as geo
from . import gradcheck
from . import head as hd
from . import oracles
from . import sparse as sp
from . import evaluation as ev


def random_sparse_case(rng, max_extent=8):
    ndim = int(rng.choice([2, 3]))
    ext = tuple(int(v) for v in rng.integers(2, max_extent + 1, size=ndim))
    density = rng.uniform(0.05, 0.5)
    mask = rng.random(ext) < density
    if not mask.any():
        mask[tuple(rng.integers(0, e) for e in ext)] = True
    coords = np.argwhere(mask).astype(np.int64)
    c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    k = int(rng.choice([1, 3]))
    mode, stride = ("submanifold", 1) if rng.random() < 0.5 else ("strided", int(rng.choice([1, 2])))
    x = sp.SparseTensor(coords, rng.normal(size=(len(coords), c_in)), ext)
    kernel = sp.ConvKernel(rng.normal(size=(k**ndim, c_in, c_out)), rng.normal(size=c_out), stride, mode)
    return x, kernel


def conv_oracle_error(x: sp.SparseTensor, kernel: sp.ConvKernel, conv=sp.sparse_conv):
    """Max abs error of ``conv`` against densify -> dense conv -> re-sparsify.

    Active-set mismatches count as infinite error.
    """
    dense = sp.to_dense(x)
    w = np.asarray(kernel.weights)
    ref = oracles.dense_correlation(dense, w, kernel.bias, kernel.stride)
    k = round(w.shape[0] ** (1.0 / x.ndim))
    occupied = np.zeros(x.extents, dtype=bool)
    occupied[tuple(x.coords.T)] = True
    active = occupied if kernel.mode == "submanifold" else oracles.strided_active_set(occupied, k, kernel.stride)
    out = conv(x, kernel)
    want = np.argwhere(active)
    if out.coords.shape != want.shape or np.any(out.coords != want):
        return math.inf
    if not len(want):
        return 0.0
    return float(np.max(np.abs(np.asarray(out.feats) - ref[tuple(want.T)])))


def suite_dense_conv(n=200, seed=0, conv=sp.sparse_conv, tol=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        x, kernel = random_sparse_case(rng)
        worst = max(worst, conv_oracle_error(x, kernel, conv))
    return worst < tol, f"max abs error {worst:.2e} over {n} tensors"


def suite_gradients(seeds=range(3), e2e_seeds=range(2)):
    ok_ops, ops = gradcheck.op_suite(seeds)
    ok_e2e, e2e = gradcheck.end_to_end_suite(e2e_seeds)
    return ok_ops and ok_e2e, f"ops max rel {max(ops.values()):.1e}, end-to-end max rel {max(e2e.values()):.1e}"


def suite_reductions(n=50, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        ext = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        vals = rng.integers(-3, 4, size=(int(rng.integers(1, 20)), 3)).astype(float)
        cells = rng.integers(-1, 5, size=(len(vals), 2))
        got, _ = sp.scatter_max(vals, cells, ext)
        ref = oracles.scatter_max_reference(vals, cells, ext)
        if sorted(ref) != [tuple(c) for c in got.coords.tolist()]:
            return False, "scatter-max active set differs"
        if any(not np.array_equal(ref[tuple(c)], f) for c, f in zip(got.coords.tolist(), got.feats)):
            return False, "scatter-max values differ"
        ext3 = ext + (int(rng.integers(1, 5)),)
        mask = rng.random(ext3) < 0.5
        coords = np.argwhere(mask)
        feats = rng.integers(-3, 4, size=(len(coords), 2)).astype(float)
        hc = sp.height_compress(sp.SparseTensor(coords, feats, ext3))
        ref = oracles.height_max_reference(coords, feats)
        if sorted(ref) != [tuple(c) for c in hc.coords.tolist()]:
            return False, "height-compress active set differs"
        if any(not np.array_equal(ref[tuple(c)], f) for c, f in zip(hc.coords.tolist(), hc.feats)):
            return False, "height-compress values differ"
    return True, f"{n} scatter-max and height-compress fixtures"


def random_boxes(rng, n, spread=6.0):
    return np.c_[
        rng.uniform(0, spread, (n, 2)),
        rng.uniform(-1, 1, n),
        rng.uniform(1, 4, n),
        rng.uniform(0.5, 2, n),
        rng.uniform(1, 2, n),
        rng.uniform(-math.pi, math.pi, n),
    ]


def suite_nms_ap(n=30, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        m = int(rng.integers(1, 11))
        boxes = random_boxes(rng, m)
        scores = np.round(rng.random(m), 1)  # ties exercise the index tie-break
        iou = [[geo.rotated_iou_bev(a, b) for b in boxes] for a in boxes]
        thr = float(rng.uniform(0.1, 0.7))
        if hd.nms_indices(boxes, scores, thr) != oracles.nms_exhaustive(iou, scores, thr):
            return False, "NMS kept set differs"
    for _ in range(n):
        frames, matches = [], []
        for _f in range(int(rng.integers(1, 4))):
            nd, ng = int(rng.integers(0, 6)), int(rng.integers(0, 4))
            iou = rng.choice([0.0, 0.3, 0.6, 0.8, 0.95], size=(nd, ng))
            sc = np.round(rng.random(nd), 2)
            frames.append((iou, sc, ng))
            m = oracles.greedy_match_reference(iou, sc, 0.7)
            status = np.array([ev.TP if j >= 0 else ev.FP for j in m], dtype=np.int64)
            matches.append(ev.FrameMatch(status, sc, np.zeros(nd), np.zeros(ng, bool), ng))
        got = ev.average_precision(ev.pr_curve(matches))
        ref = oracles.ap_by_rematching(frames, 0.7)
        if not (math.isnan(got) and math.isnan(ref)) and not abs(got - ref) < 1e-9:
            return False, f"AP {got} vs brute force {ref}"
    return True, f"{n} NMS and {n} AP fixtures"


def suite_geometry(seed=0, n_points=10_000, n_pairs=100):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-50, 50, size=(n_points, 3))
    back = geo.polar_to_cartesian(geo.polar_transform(pts))
    rt = float(np.max(np.linalg.norm(back - pts, axis=1) / np.linalg.norm(pts, axis=1)))
    z = rng.uniform(1, 50, n_points)
    cam = np.c_[rng.uniform(-20, 20, n_points), rng.uniform(-5, 5, n_points), z]
    lam = rng.uniform(0.1, 10, n_points)[:, None]
    scale = float(np.max(np.abs(geo.uv_coords(cam * lam)[0] - geo.uv_coords(cam)[0])))
    mc = 0.0
    for _ in range(n_pairs):
        a, b = random_boxes(rng, 2, spread=2.5)
        mc = max(mc, abs(geo.rotated_iou_bev(a, b) - oracles.monte_carlo_bev_iou(a, b, 200_000, int(rng.integers(1 << 30)))))
    ok = rt < 1e-9 and scale < 1e-12 and mc < 1e-2
    return ok, f"polar round trip {rt:.1e}, uv scale {scale:.1e}, IoU vs MC {mc:.1e}"


SUITES = {
    "dense-conv": suite_dense_conv,
    "gradients": suite_gradients,
    "reductions": suite_reductions,
    "nms-ap": suite_nms_ap,
    "geometry": suite_geometry,
}


def run(names=None, **overrides):
    """Run suites; returns list of (name, ok, detail, seconds)."""
    rows = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        try:
            ok, detail = SUITES[name](**overrides.get(name, {}))
        except Exception as exc:  # a crash is a failed suite, not a crashed report
            ok, detail = False, f"error: {exc!r}"
        rows.append((name, ok, detail, time.perf_counter() - t0))
    return rows


def format_report(rows):
    lines = [f"{'suite':<12} {'result':<6} {'time':>7}  detail"]
    for name, ok, detail, secs in rows:
        lines.append(f"{name:<12} {'PASS' if ok else 'FAIL':<6} {secs:>6.1f}s  {detail}")
    return "\n".join(lines)
