import math

import numpy as np
import pytest

from multistream3d import autodiff as ad
from multistream3d import geometry as geo
from multistream3d import gradcheck
from multistream3d import head as hd
from multistream3d import oracles
from multistream3d import sparse as sp
from multistream3d.config import HeadConfig
from multistream3d.streams import BEVGeometry


def head_cfg(**kw):
    cfg = HeadConfig()
    cfg.head_hidden = [6]
    cfg.roi_grid = 3
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def bev_map(rng, extents=(20, 20), channels=4, density=0.5):
    coords = np.argwhere(rng.random(extents) < density)
    return sp.SparseTensor(coords, rng.normal(size=(len(coords), channels)), tuple(extents))


BEV = BEVGeometry((0.0, -4.0), (0.4, 0.4), (20, 20))


def params_for(cfg, channels, seed=0):
    p = ad.ParamStore()
    hd.init_head_params(p, channels, cfg, np.random.default_rng(seed))
    return p


# --------------------------------------------------------------------- RPN


def test_rpn_zero_weights_give_bias():
    cfg = head_cfg()
    f = bev_map(np.random.default_rng(0))
    p = params_for(cfg, 4)
    for k in ("rpn.cls", "rpn.box", "rpn.dir"):
        p[k + ".W"] = np.zeros_like(p[k + ".W"])
        p[k + ".b"] = np.random.default_rng(1).normal(size=p[k + ".b"].shape)
    out = hd.rpn_forward(f, p, cfg, BEV)
    a = hd.anchors_per_cell(cfg)
    np.testing.assert_array_equal(out.cls.value, np.tile(p["rpn.cls.b"], len(f)))
    np.testing.assert_array_equal(out.box.value, np.tile(p["rpn.box.b"].reshape(a, 7), (len(f), 1)))


def test_rpn_anchors_only_at_active_cells():
    cfg = head_cfg()
    f = bev_map(np.random.default_rng(2), density=0.1)
    out = hd.rpn_forward(f, params_for(cfg, 4), cfg, BEV)
    a = hd.anchors_per_cell(cfg)
    assert len(out.anchors) == len(f) * a
    active = {tuple(c) for c in f.coords}
    cells = np.floor((out.anchors[:, :2] - BEV.origin) / BEV.cell_size).astype(int)
    assert {tuple(c) for c in cells} == active


def test_rpn_matches_dense_one_by_one_conv():
    cfg = head_cfg()
    f = bev_map(np.random.default_rng(3))
    p = params_for(cfg, 4, seed=3)
    out = hd.rpn_forward(f, p, cfg, BEV)
    dense = sp.to_dense(f)
    ref = oracles.dense_correlation(dense, p["rpn.cls.W"][None], p["rpn.cls.b"], 1)
    assert np.max(np.abs(out.cls.value - ref[tuple(f.coords.T)].reshape(-1))) < 1e-6


def test_rpn_channel_mismatch():
    cfg = head_cfg()
    with pytest.raises(ad.ShapeError):
        hd.rpn_forward(bev_map(np.random.default_rng(0), channels=3), params_for(cfg, 4), cfg, BEV)


# ---------------------------------------------------------------- box code


def random_box_pairs(rng, n):
    anchors = np.c_[rng.uniform(-10, 10, (n, 3)), rng.uniform(0.5, 4, (n, 3)), rng.uniform(-math.pi, math.pi, n)]
    boxes = anchors + np.c_[rng.normal(0, 0.5, (n, 3)), np.zeros((n, 3)), rng.uniform(-1, 1, n)]
    boxes[:, 3:6] = anchors[:, 3:6] * rng.uniform(0.5, 2, (n, 3))
    boxes[:, 6] = geo.normalize_angle(boxes[:, 6])
    return boxes, anchors


def test_decode_zero_deltas_is_anchor():
    _, anchors = random_box_pairs(np.random.default_rng(0), 5)
    out, ok = hd.decode_boxes(anchors, np.zeros((5, 7)))
    assert ok.all()
    np.testing.assert_allclose(out, np.c_[anchors[:, :6], geo.normalize_angle(anchors[:, 6])], atol=1e-12)


def test_decode_log_two_doubles_length():
    anchor = np.array([[0, 0, 0, 3.9, 1.6, 1.56, 0.0]])
    d = np.zeros((1, 7))
    d[0, 3] = math.log(2)
    out, _ = hd.decode_boxes(anchor, d)
    assert out[0, 3] == pytest.approx(7.8)


def test_encode_decode_round_trip():
    boxes, anchors = random_box_pairs(np.random.default_rng(1), 200)
    out, ok = hd.decode_boxes(anchors, hd.encode_boxes(boxes, anchors))
    assert ok.all()
    err = np.abs(out - boxes)
    err[:, 6] = np.abs(geo.normalize_angle(out[:, 6] - boxes[:, 6]))
    assert err.max() < 1e-9


def test_decode_with_direction_bits_recovers_heading():
    boxes, anchors = random_box_pairs(np.random.default_rng(2), 200)
    d = hd.encode_boxes(boxes, anchors)
    d[:, 6] += math.pi * np.random.default_rng(3).integers(0, 2, 200)  # heading ambiguity
    out, _ = hd.decode_boxes(anchors, d, hd.direction_bits(boxes[:, 6]))
    assert np.abs(geo.normalize_angle(out[:, 6] - boxes[:, 6])).max() < 1e-9


def test_decode_drops_non_finite(caplog):
    _, anchors = random_box_pairs(np.random.default_rng(4), 3)
    d = np.zeros((3, 7))
    d[1, 2] = np.nan
    _, ok = hd.decode_boxes(anchors, d)
    np.testing.assert_array_equal(ok, [True, False, True])
    assert "non-finite" in caplog.text


# ---------------------------------------------------------------- RoI pool


def test_roi_pool_uniform_region():
    coords = np.argwhere(np.ones((20, 20), bool))
    f = sp.SparseTensor(coords, np.tile([1.5, -2.0], (len(coords), 1)), (20, 20))
    prop = np.array([[4.0, 0.0, 0.0, 2.0, 1.6, 1.5, 0.3]])
    r = hd.roi_pool(f, prop, BEV, grid=7)
    bins = r.feats.reshape(49, 2)
    np.testing.assert_allclose(bins, np.tile([1.5, -2.0], (49, 1)), rtol=1e-12)
    assert not r.outside[0]


def test_roi_pool_outside_is_zero_and_flagged():
    f = bev_map(np.random.default_rng(5))
    r = hd.roi_pool(f, np.array([[100.0, 100.0, 0, 2, 2, 1, 0]]), BEV, grid=7)
    assert r.outside[0] and not np.any(r.feats)


def test_roi_pool_bins_brute_force():
    rng = np.random.default_rng(6)
    f = bev_map(rng, density=0.6, channels=3)
    props = np.c_[rng.uniform(0.5, 7.5, 6), rng.uniform(-3.5, 3.5, 6), np.zeros(6),
                  rng.uniform(0.5, 3, (6, 2)), np.ones(6), rng.uniform(-math.pi, math.pi, 6)]
    g = 7
    r = hd.roi_pool(f, props, BEV, grid=g)
    got = r.feats.reshape(len(props), g, g, 3)
    cells = [(tuple(c), v) for c, v in zip(f.coords.tolist(), f.feats)]
    for p, box in enumerate(props):
        corners = np.array(geo.bev_corners(box))
        (x0, y0), (x1, y1) = corners.min(0), corners.max(0)
        for a in range(g):
            for b in range(g):
                bx0, bx1 = x0 + (x1 - x0) * a / g, x0 + (x1 - x0) * (a + 1) / g
                by0, by1 = y0 + (y1 - y0) * b / g, y0 + (y1 - y0) * (b + 1) / g
                members = []
                for (i, j), v in cells:
                    cx0, cy0 = BEV.origin[0] + i * 0.4, BEV.origin[1] + j * 0.4
                    if min(bx1, cx0 + 0.4) - max(bx0, cx0) > 0 and min(by1, cy0 + 0.4) - max(by0, cy0) > 0:
                        members.append(v)
                ref = np.mean(members, axis=0) if members else np.zeros(3)
                np.testing.assert_allclose(got[p, a, b], ref, rtol=1e-12, atol=1e-14)


# -------------------------------------------------------------- det head


def test_det_head_zero_weights_score_is_bias():
    cfg = head_cfg()
    p = params_for(cfg, 4)
    for name in p.trainable_names():
        if name.startswith("head.") and name.endswith(".W"):
            p[name] = np.zeros_like(p[name])
    p["head.score.b"] = np.array([0.7])
    rois = np.random.default_rng(7).normal(size=(5, 9 * 4))
    out = hd.det_head_forward(rois, p, cfg)
    np.testing.assert_allclose(1 / (1 + np.exp(-out.score.value)), 1 / (1 + math.exp(-0.7)))
    props = random_box_pairs(np.random.default_rng(8), 5)[1]
    refined, _ = hd.decode_boxes(props, out.deltas.value)
    np.testing.assert_allclose(refined, np.c_[props[:, :6], geo.normalize_angle(props[:, 6])], atol=1e-12)


def test_det_head_shape_mismatch():
    cfg = head_cfg()
    with pytest.raises(ad.ShapeError):
        hd.det_head_forward(np.zeros((2, 5)), params_for(cfg, 4), cfg)


def test_roi_pool_and_head_gradients():
    cfg = head_cfg()
    rng = np.random.default_rng(9)
    f = bev_map(rng, channels=4, density=0.6)
    p = params_for(cfg, 4, seed=9)
    for name in p.trainable_names():
        if name.endswith(".b"):
            p[name] = p[name] + rng.normal(0, 0.1, p[name].shape)
        if name.startswith("head.") and name.endswith(".W"):
            p[name] = rng.normal(0, 0.3, p[name].shape)
    p.add("feats", f.feats)
    props = np.c_[rng.uniform(1, 7, 4), rng.uniform(-3, 3, 4), np.zeros(4), rng.uniform(1, 3, (4, 2)),
                  np.ones(4), rng.uniform(-1, 1, 4)]
    proj = rng.normal(size=(4, 7))

    def build():
        t = ad.Tape(p)
        x = sp.SparseTensor(f.coords, t.param("feats"), f.extents)
        out = hd.det_head_forward(hd.roi_pool(x, props, BEV, cfg.roi_grid), p, cfg, t)
        loss = ad.add(ad.total(ad.sigmoid(out.score)), ad.total(ad.mul(out.deltas, proj)))
        return t, loss

    t, loss = build()
    grads = t.backward(loss)
    base = {k: p[k].copy() for k in p.trainable_names()}

    def loss_of(values):
        for k, v in values.items():
            p[k] = v
        try:
            return float(build()[1].value)
        finally:
            for k in values:
                p[k] = base[k]

    for name in base:
        err = gradcheck._directional_errors(loss_of, grads, {name: base[name]}, rng, 1e-6, 2)
        assert err < 1e-3, name


# -------------------------------------------------------------------- NMS


def det(x, score, y=0.0):
    return hd.Detection("Car", score, geo.Box3D((x, y, 0), (4, 2, 1.5), 0.0))


def test_nms_identical_boxes_keep_best():
    kept = hd.nms([det(0, 0.8), det(0, 0.9)], 0.5)
    assert [d.score for d in kept] == [0.9]


def test_nms_disjoint_kept():
    assert len(hd.nms([det(0, 0.5), det(10, 0.7), det(20, 0.6)], 0.5)) == 3


def test_nms_matches_exhaustive_reference():
    rng = np.random.default_rng(10)
    for trial in range(60):
        n = int(rng.integers(1, 11))
        boxes = np.c_[rng.uniform(0, 4, (n, 2)), np.zeros(n), rng.uniform(1, 4, (n, 2)), np.ones(n),
                      rng.uniform(-math.pi, math.pi, n)]
        scores = np.round(rng.uniform(0, 1, n), 1)  # ties
        iou = geo.iou_matrix(boxes, boxes)
        thr = float(rng.choice([0.1, 0.3, 0.5]))
        assert hd.nms_indices(boxes, scores, thr) == oracles.nms_exhaustive(iou, scores, thr), trial


def test_nms_max_out():
    dets = [det(10 * i, 0.1 * i) for i in range(5)]
    assert [d.score for d in hd.nms(dets, 0.5, max_out=2)] == [0.4, pytest.approx(0.3)]


# -------------------------------------------------------------------- loss


def loss_fixture(with_gt=True, perfect=False, seed=11):
    cfg = head_cfg(anchor_yaws=[0.0], pos_iou=0.6, neg_iou=0.45)
    rng = np.random.default_rng(seed)
    anchors = np.array([[0, 0, -1, 3.9, 1.6, 1.56, 0], [0.3, 0.1, -1, 3.9, 1.6, 1.56, 0],
                        [20, 5, -1, 3.9, 1.6, 1.56, 0]])
    acls = np.zeros(3, dtype=int)
    gts = np.array([[0.1, 0.0, -0.9, 4.0, 1.7, 1.5, 0.05]]) if with_gt else np.zeros((0, 7))
    targets = hd.assign_targets(anchors, acls, gts, np.zeros(len(gts), int), cfg)
    t = ad.Tape()
    box = targets.box.copy() if perfect else rng.normal(size=(3, 7))
    rpn = hd.RPNOutput(t.constant(rng.normal(size=3)), t.constant(box), t.constant(rng.normal(size=3)), anchors, acls)
    return cfg, rpn, targets


def test_loss_perfect_box_predictions():
    cfg, rpn, targets = loss_fixture(perfect=True)
    assert (targets.labels == 1).any()
    _, terms = hd.compute_loss(rpn, None, targets, None, cfg)
    assert terms["box"] == pytest.approx(0.0, abs=1e-15)


def test_loss_without_gt_is_negative_focal_only():
    cfg, rpn, targets = loss_fixture(with_gt=False)
    total, terms = hd.compute_loss(rpn, None, targets, None, cfg)
    assert terms["box"] == 0.0 and terms["dir"] == 0.0
    x = rpn.cls.value
    s = 1 / (1 + np.exp(-x))
    ref = np.mean(-(1 - cfg.focal_alpha) * s**cfg.focal_gamma * np.log(1 - s))
    assert float(total.value) == pytest.approx(cfg.w_cls * ref, abs=1e-12)


def test_loss_three_anchor_reference_formula():
    cfg, rpn, targets = loss_fixture()
    total, terms = hd.compute_loss(rpn, None, targets, None, cfg)
    lab = targets.labels
    x, b, d = rpn.cls.value, rpn.box.value, rpn.dir.value
    care = lab >= 0
    pos = lab == 1
    # focal
    s = 1 / (1 + np.exp(-x))
    a, g = cfg.focal_alpha, cfg.focal_gamma
    fl = np.where(pos, -a * (1 - s) ** g * np.log(s), -(1 - a) * s**g * np.log(1 - s))
    cls = fl[care].sum() / care.sum()
    # smooth-l1 over six deltas plus the sine-difference yaw residual
    delta = cfg.smooth_l1_delta
    res = np.c_[b[:, :6] - targets.box[:, :6], np.sin(b[:, 6] - targets.box[:, 6])]

    def huber(r):
        return np.where(np.abs(r) < delta, 0.5 * r * r / delta, np.abs(r) - 0.5 * delta)

    box = huber(res[pos]).sum() / (7 * pos.sum())
    t = targets.dir[pos]
    sd = 1 / (1 + np.exp(-d[pos]))
    dirl = -(t * np.log(sd) + (1 - t) * np.log(1 - sd)).sum() / pos.sum()
    assert terms["cls"] == pytest.approx(cls, abs=1e-9)
    assert terms["box"] == pytest.approx(box, abs=1e-9)
    assert terms["dir"] == pytest.approx(dirl, abs=1e-9)
    assert float(total.value) == pytest.approx(cfg.w_cls * cls + cfg.w_box * box + cfg.w_dir * dirl, abs=1e-9)


def test_assign_targets_force_best_and_ignore_band():
    cfg = head_cfg(anchor_yaws=[0.0])
    anchors = np.array([[0, 0, 0, 4, 2, 1.5, 0], [1.0, 0, 0, 4, 2, 1.5, 0], [30, 0, 0, 4, 2, 1.5, 0]])
    gts = np.array([[2.2, 0, 0, 4, 2, 1.5, 0]])
    t = hd.assign_targets(anchors, np.zeros(3, int), gts, np.zeros(1, int), cfg)
    # anchor 0: IoU 3.6/12.4 (negative); anchor 1: 5.6/10.4, inside the ignore
    # band but the best anchor for the GT, so forced positive
    np.testing.assert_array_equal(t.labels, [0, 1, 0])
    t = hd.assign_targets(anchors, np.zeros(3, int), gts, np.zeros(1, int), cfg, force_best=False)
    np.testing.assert_array_equal(t.labels, [0, -1, 0])
