"""KITTI-protocol evaluation: difficulty levels, matching, PR curves, AP and AOS."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

LEVELS = ("Easy", "Moderate", "Hard")
# min 2D height (px), max occlusion, max truncation
DIFFICULTY = {"Easy": (40.0, 0, 0.15), "Moderate": (25.0, 1, 0.30), "Hard": (25.0, 2, 0.50)}
BENCHMARKS = ("2d", "bev", "3d", "aos")
BENCH_TITLES = {"2d": "2D", "bev": "BEV", "3d": "3D", "aos": "Orientation"}

TP, FP, IGNORED = 1, 0, -1
# GT classes that neither count as misses nor make a detection a false positive
NEIGHBOURS = {"Car": ("Van",), "Pedestrian": ("Person_sitting",)}


def assign_difficulty(gt) -> frozenset:
    if gt.cls == "DontCare":
        return frozenset()
    out = set()
    for level, (min_h, max_occ, max_trunc) in DIFFICULTY.items():
        if gt.height_px >= min_h and gt.occlusion <= max_occ and gt.truncation <= max_trunc:
            out.add(level)
    return frozenset(out)


def _iou_2d(a, b):
    return geo.box2d_iou(a.bbox2d, b.bbox2d)


def _iou_bev(a, b):
    return geo.rotated_iou_bev(a.eval_box(), b.eval_box())


def _iou_3d(a, b):
    return geo.iou_3d(a.eval_box(), b.eval_box())


IOU_FNS = {"2d": _iou_2d, "bev": _iou_bev, "3d": _iou_3d, "aos": _iou_2d}


def _coverage(det, region):
    """Fraction of the detection's 2D box inside a DontCare rectangle."""
    a, b = det.bbox2d, region.bbox2d
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    area = (a[2] - a[0]) * (a[3] - a[1])
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


@dataclass
class FrameMatch:
    status: np.ndarray  # per detection: TP, FP or IGNORED
    scores: np.ndarray
    similarity: np.ndarray  # orientation similarity of TPs, 0 elsewhere
    gt_matched: np.ndarray  # per eligible GT
    n_gt: int


def match_frame(dets, gts, iou_fn, iou_threshold, level, cls="Car") -> FrameMatch:
    """Greedy one-to-one matching of one frame's detections of one class.

    Detections are visited in (score desc, index asc) order. Each takes the
    highest-IoU unmatched eligible GT at or above the threshold. A detection
    that instead overlaps an ineligible GT of the class or of a neighbouring
    class (Van for Car, Person_sitting for Pedestrian), or lies mostly in a
    DontCare region, is ignored; so are detections shorter than the level's
    minimum 2D height.
    """
    min_h = DIFFICULTY[level][0]
    dets = [d for d in dets if d.cls == cls]
    eligible = [g for g in gts if g.cls == cls and level in assign_difficulty(g)]
    ineligible = [g for g in gts if (g.cls == cls and level not in assign_difficulty(g))
                  or g.cls in NEIGHBOURS.get(cls, ())]
    dontcare = [g for g in gts if g.cls == "DontCare"]
    scores = np.array([d.score if d.score is not None else 1.0 for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(len(dets)), -scores)) if len(dets) else np.zeros(0, np.int64)
    status = np.full(len(dets), FP, dtype=np.int64)
    sim = np.zeros(len(dets))
    matched = np.zeros(len(eligible), dtype=bool)
    for i in order:
        d = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(eligible):
            if matched[j]:
                continue
            iou = iou_fn(d, g)
            if iou >= iou_threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            status[i] = TP
            sim[i] = (1.0 + math.cos(d.alpha - eligible[best_j].alpha)) / 2.0
        elif d.height_px < min_h:
            status[i] = IGNORED
        elif any(iou_fn(d, g) >= iou_threshold for g in ineligible):
            status[i] = IGNORED
        elif any(_coverage(d, g) >= 0.5 for g in dontcare):
            status[i] = IGNORED
    return FrameMatch(status, scores, sim, matched, len(eligible))


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    similarity: np.ndarray  # orientation-weighted precision
    thresholds: np.ndarray
    n_gt: int


def pr_curve(matches) -> PRCurve:
    """Pool frame matches and sweep distinct score thresholds."""
    n_gt = int(sum(m.n_gt for m in matches))
    if matches:
        status = np.concatenate([m.status for m in matches])
        scores = np.concatenate([m.scores for m in matches])
        sim = np.concatenate([m.similarity for m in matches])
    else:
        status, scores, sim = np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    keep = status != IGNORED
    status, scores, sim = status[keep], scores[keep], sim[keep]
    order = np.argsort(-scores, kind="stable")
    status, scores, sim = status[order], scores[order], sim[order]
    if not len(scores) or n_gt == 0:
        empty = np.zeros(0)
        return PRCurve(empty, empty, empty, empty, n_gt)
    tp = np.cumsum(status == TP)
    sim_sum = np.cumsum(sim)
    n = np.arange(1, len(scores) + 1)
    # one curve point per distinct threshold: the last detection of each tie group
    last = np.r_[scores[1:] != scores[:-1], True]
    return PRCurve(tp[last] / n_gt, tp[last] / n[last], sim_sum[last] / n[last], scores[last], n_gt)


def recall_points(r11=False):
    if r11:
        return np.linspace(0.0, 1.0, 11)
    return np.arange(1, 41) / 40.0


def interpolated(recall, values, n_gt, r11=False):
    """Mean over recall points of the max value at recall >= r, in percent."""
    if n_gt == 0:
        return float("nan")
    recall = np.asarray(recall, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    total = 0.0
    pts = recall_points(r11)
    for r in pts:
        m = recall >= r - 1e-12
        total += values[m].max() if m.any() else 0.0
    return 100.0 * total / len(pts)


def average_precision(curve: PRCurve, r11=False):
    return interpolated(curve.recall, curve.precision, curve.n_gt, r11)


def aos(curve: PRCurve, r11=False):
    return interpolated(curve.recall, curve.similarity, curve.n_gt, r11)


@dataclass
class BenchResult:
    cls: str
    bench: str
    level: str
    curve: PRCurve
    value: float


@dataclass
class EvalResult:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def get(self, cls, bench, level):
        for r in self.rows:
            if (r.cls, r.bench, r.level) == (cls, bench, level):
                return r
        raise KeyError((cls, bench, level))


def evaluate(dets_by_frame: dict, gts_by_frame: dict, classes=("Car",), iou_thresholds=None,
             benchmarks=BENCHMARKS, r11=False) -> EvalResult:
    """Evaluate pooled detections; frames missing from ``dets_by_frame`` count as empty."""
    thr = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
    thr.update(iou_thresholds or {})
    result = EvalResult()
    frames = sorted(gts_by_frame)
    for cls in classes:
        for bench in benchmarks:
            fn = IOU_FNS[bench]
            for level in LEVELS:
                matches = [match_frame(dets_by_frame.get(f, []), gts_by_frame[f], fn, thr[cls], level, cls) for f in frames]
                curve = pr_curve(matches)
                value = aos(curve, r11) if bench == "aos" else average_precision(curve, r11)
                if math.isnan(value):
                    result.notes.append(f"{cls} {BENCH_TITLES[bench]} {level}: no ground truth, reported as NaN")
                result.rows.append(BenchResult(cls, bench, level, curve, value))
    return result


# ------------------------------------------------------------------ output


def _fmt_num(v):
    return "nan" if math.isnan(v) else f"{v:.2f}"


def format_table(result: EvalResult) -> str:
    lines = [f"{'Benchmark':<24}" + "".join(f"{lv:>10}" for lv in LEVELS)]
    seen = []
    for r in result.rows:
        if (r.cls, r.bench) not in seen:
            seen.append((r.cls, r.bench))
    for cls, bench in seen:
        name = f"{cls} ({BENCH_TITLES[bench]})"
        vals = [result.get(cls, bench, lv).value for lv in LEVELS]
        lines.append(f"{name:<24}" + "".join(f"{_fmt_num(v):>10}" for v in vals))
    for note in result.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def summary_dict(result: EvalResult):
    out = {}
    for r in result.rows:
        out.setdefault(r.cls, {}).setdefault(r.bench, {})[r.level] = None if math.isnan(r.value) else r.value
    return {"results": out, "notes": list(result.notes)}


def curve_csv(curve: PRCurve, bench) -> str:
    col = "similarity" if bench == "aos" else "precision"
    vals = curve.similarity if bench == "aos" else curve.precision
    lines = [f"recall,{col}"]
    lines += [f"{float(r)!r},{float(p)!r}" for r, p in zip(curve.recall, vals)]
    return "\n".join(lines) + "\n"


def read_curve_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros(0), np.zeros(0)
    return data[:, 0], data[:, 1]


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def lines_svg(series, title, xlabel="recall", ylabel="precision", x_range=(0.0, 1.0), y_range=(0.0, 1.0),
              size=(360, 300)) -> str:
    """Deterministic SVG line plot of [(label, xs, ys), ...]."""
    w, h = size
    pad = 40
    pw, ph = w - 2 * pad, h - 2 * pad
    x0, x1 = x_range
    y0, y1 = y_range
    sx = pw / (x1 - x0) if x1 > x0 else 0.0
    sy = ph / (y1 - y0) if y1 > y0 else 0.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{w / 2}" y="{pad / 2}" text-anchor="middle" font-size="12">{title}</text>',
        f'<text x="{w / 2}" y="{h - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="12" y="{h / 2}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {h / 2})">{ylabel}</text>',
    ]
    for k, (label, xs, ys) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        if len(xs):
            pts = " ".join(f"{pad + (x - x0) * sx:.3f},{pad + ph - (y - y0) * sy:.3f}" for x, y in zip(xs, ys))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if label:
            parts.append(f'<text x="{pad + 6}" y="{pad + 14 + 13 * k}" font-size="10" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def curve_svg(recall, values, title) -> str:
    return lines_svg([("", recall, values)], title)


def emit_curves(result: EvalResult, out_dir):
    """Write <out>/<Class>/<benchmark>/<level>.csv|.svg and summary.json."""
    written = []
    for r in result.rows:
        d = os.path.join(out_dir, r.cls, r.bench)
        os.makedirs(d, exist_ok=True)
        vals = r.curve.similarity if r.bench == "aos" else r.curve.precision
        csv_path = os.path.join(d, f"{r.level}.csv")
        with open(csv_path, "w") as f:
            f.write(curve_csv(r.curve, r.bench))
        with open(os.path.join(d, f"{r.level}.svg"), "w") as f:
            f.write(curve_svg(r.curve.recall, vals, f"{r.cls} {BENCH_TITLES[r.bench]} {r.level}"))
        written.append(csv_path)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary_dict(result), f, indent=2, sort_keys=True)
        f.write("\n")
    return written


def plot_eval_dir(eval_dir):
    """One SVG per class and benchmark overlaying the three levels, from the CSVs."""
    written = []
    for cls in sorted(os.listdir(eval_dir)):
        cdir = os.path.join(eval_dir, cls)
        if not os.path.isdir(cdir):
            continue
        for bench in sorted(os.listdir(cdir)):
            bdir = os.path.join(cdir, bench)
            if not os.path.isdir(bdir):
                continue
            series = []
            for level in LEVELS:
                path = os.path.join(bdir, f"{level}.csv")
                if os.path.isfile(path):
                    r, p = read_curve_csv(path)
                    series.append((level, r, p))
            ylabel = "similarity" if bench == "aos" else "precision"
            out = os.path.join(cdir, f"{bench}.svg")
            with open(out, "w") as f:
                f.write(lines_svg(series, f"{cls} {BENCH_TITLES.get(bench, bench)}", ylabel=ylabel))
            written.append(out)
    return written
