"""Central finite-difference checks for the tape ops and the full loss."""

from __future__ import annotations

import numpy as np
import scipy.sparse

from . import autodiff as ad
from . import sparse as sp


def _random_sparse(rng, extents, density, channels):
    mask = rng.random(extents) < density
    if not mask.any():
        mask[(0,) * len(extents)] = True
    coords = np.argwhere(mask).astype(np.int64)
    return coords, rng.normal(size=(len(coords), channels))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + rng.random(shape)), x)


def op_cases(rng):
    """name -> (inputs dict, fn(tape, nodes) -> Node)."""
    cases = {}
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    cases["add"] = ({"a": a, "b": rng.normal(size=(1, 3))}, lambda t, n: ad.add(n["a"], n["b"]))
    cases["sub"] = ({"a": a, "b": b}, lambda t, n: ad.sub(n["a"], n["b"]))
    cases["mul"] = ({"a": a, "b": b}, lambda t, n: ad.mul(n["a"], n["b"]))
    cases["scale"] = ({"a": a}, lambda t, n: ad.scale(n["a"], -1.7))
    cases["relu"] = ({"a": _away_from_zero(rng, (5, 3))}, lambda t, n: ad.relu(n["a"]))
    cases["sigmoid"] = ({"a": a}, lambda t, n: ad.sigmoid(n["a"]))
    cases["exp"] = ({"a": a * 0.5}, lambda t, n: ad.exp(n["a"]))
    cases["sin"] = ({"a": a}, lambda t, n: ad.sin(n["a"]))
    cases["cos"] = ({"a": a}, lambda t, n: ad.cos(n["a"]))
    cases["reshape"] = ({"a": a}, lambda t, n: ad.reshape(n["a"], (3, 4)))
    cases["column"] = ({"a": a}, lambda t, n: ad.column(n["a"], 1, 3))
    cases["concat"] = ({"a": a, "b": rng.normal(size=(4, 2))}, lambda t, n: ad.concat([n["a"], n["b"]]))
    idx = np.array([2, -1, 0, 2, 3])
    cases["gather_rows"] = ({"a": a}, lambda t, n: ad.gather_rows(n["a"], idx))
    m = scipy.sparse.random(5, 4, density=0.5, random_state=int(rng.integers(1 << 30)), format="csr")
    cases["spmm"] = ({"a": a}, lambda t, n: ad.spmm(m, n["a"]))
    cases["sum"] = ({"a": a}, lambda t, n: ad.total(n["a"]))
    cases["mean"] = ({"a": a}, lambda t, n: ad.mean(n["a"]))
    cases["matmul"] = ({"a": a, "w": rng.normal(size=(3, 2))}, lambda t, n: ad.matmul(n["a"], n["w"]))
    cases["linear"] = ({"a": a, "w": rng.normal(size=(3, 2)), "b": rng.normal(size=(2,))},
                       lambda t, n: ad.linear(n["a"], n["w"], n["b"]))

    def mlp(t, n):
        h = ad.relu(ad.linear(n["a"], n["w0"], n["b0"]))
        return ad.relu(ad.linear(h, n["w1"], n["b1"]))

    cases["mlp"] = ({"a": a, "w0": rng.normal(size=(3, 5)), "b0": rng.normal(size=5) + 0.5,
                     "w1": rng.normal(size=(5, 4)), "b1": rng.normal(size=4) + 0.5}, mlp)
    for ndim, ext in ((2, (6, 5)), (3, (4, 5, 3))):
        for mode, stride in (("submanifold", 1), ("strided", 2)):
            coords, feats = _random_sparse(rng, ext, 0.4, 2)
            w = rng.normal(size=(3**ndim, 2, 3))
            bias = rng.normal(size=3)

            def conv(t, n, coords=coords, ext=ext, mode=mode, stride=stride):
                x = sp.SparseTensor(coords, n["x"], ext)
                return ad.sparse_conv(x, n["w"], n["b"], stride, mode).feats

            cases[f"sparse_conv{ndim}d_{mode}"] = ({"x": feats, "w": w, "b": bias}, conv)
    cells = rng.integers(0, 3, size=(12, 2))
    cells[0] = (7, 0)  # out of range, dropped
    cases["scatter_max"] = ({"v": rng.normal(size=(12, 3))},
                            lambda t, n: ad.scatter_max(n["v"], cells, (3, 3)).feats)
    coords3, feats3 = _random_sparse(rng, (3, 3, 4), 0.6, 3)
    cases["height_compress"] = ({"x": feats3},
                                lambda t, n: ad.height_compress(sp.SparseTensor(coords3, n["x"], (3, 3, 4))).feats)
    logits = rng.normal(size=8) * 2
    tgt = (rng.random(8) < 0.4).astype(float)
    wts = (rng.random(8) < 0.8).astype(float)
    cases["focal"] = ({"x": logits}, lambda t, n: ad.focal_binary(n["x"], tgt, 0.25, 2.0, wts))
    cases["bce"] = ({"x": logits}, lambda t, n: ad.bce_logits(n["x"], tgt, wts))
    pred = rng.normal(size=(5, 3))
    target = pred + np.where(rng.random((5, 3)) < 0.5, 0.3, 2.0) * rng.choice([-1, 1], size=(5, 3))
    cases["smooth_l1"] = ({"p": pred, "q": target},
                          lambda t, n: ad.smooth_l1(n["p"], n["q"], 1.0, np.array([1, 0, 1, 1, 1.0])))
    return cases


def _directional_errors(loss_of, grads, values, rng, h, n_dirs, max_redraws=8):
    """Relative error of analytic vs central-difference directional derivatives.

    A direction whose +-h segment straddles a kink (ReLU, max) is redrawn:
    there the central difference is off by exactly half the second
    difference over h, which a smooth gradient error cannot produce. The
    relative-error floor is the rounding noise of the difference quotient.
    """
    f0 = loss_of(values)
    floor = max(1e-8, 1e3 * np.finfo(float).eps * (1.0 + abs(f0)) / h)
    errs = []
    for _ in range(n_dirs):
        for _attempt in range(max_redraws):
            dirs = {k: rng.normal(size=v.shape) for k, v in values.items()}
            analytic = sum(float(np.sum(grads[k] * dirs[k])) for k in values)

            def f(s):
                return loss_of({k: values[k] + s * dirs[k] for k in values})

            fp, fm = f(h), f(-h)
            numeric = (fp - fm) / (2 * h)
            kink = abs(fp - 2 * f0 + fm) / (2 * h)
            err = ad.relative_error(analytic, numeric, floor)
            if kink <= 1e-5 * max(abs(numeric), floor):
                break
        errs.append(err)
    return max(errs)


def check_op(name, inputs, fn, rng, h=1e-6, n_dirs=3):
    """Max relative error over random directions for one op."""
    projection = None

    def build(values):
        nonlocal projection
        params = ad.ParamStore()
        for k, v in values.items():
            params.add(k, v)
        tape = ad.Tape(params)
        nodes = {k: tape.param(k) for k in values}
        out = fn(tape, nodes)
        if projection is None:
            projection = rng.normal(size=out.shape)
        return tape, ad.total(ad.mul(out, projection))

    tape, loss = build(inputs)
    grads = tape.backward(loss)

    def loss_of(values):
        return float(build(values)[1].value)

    return _directional_errors(loss_of, grads, inputs, rng, h, n_dirs)


def op_suite(seeds=range(10), tol=1e-4, h=1e-5):
    """{op name: worst error over seeds}; passes when all are below ``tol``."""
    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (inputs, fn) in op_cases(rng).items():
            err = check_op(name, inputs, fn, rng, h)
            worst[name] = max(worst.get(name, 0.0), err)
    return all(v < tol for v in worst.values()), worst


def tiny_scene(seed, n_points=30):
    """A one-car scene with exactly ``n_points`` LiDAR points."""
    from .synthetic import make_scene

    car = n_points * 2 // 3
    return make_scene(seed, n_objects=(1, 1), car_points=car, ground_points=n_points - car, pseudo_factor=1.0)


def end_to_end_check(seed, cfg=None, h=1e-6, n_dirs=1):
    """Per-parameter-tensor directional checks of the full composite loss.

    The RoI proposal set is frozen at its unperturbed value (selection is
    piecewise constant in the parameters).
    """
    from . import model
    from .config import toy_preset

    cfg = cfg or toy_preset(reduced=True)
    scene = tiny_scene(seed)
    inp = model.prepare_frame(scene.lidar, scene.pseudo, scene.calib, cfg, f"{seed:06d}", seed=seed)
    params = model.init_params(cfg, seed)
    # zero biases put dead units exactly on the ReLU kink; move to a generic point
    jitter = np.random.default_rng(seed + 999)
    for name in params.trainable_names():
        if name.endswith(".b"):
            params[name] = params[name] + jitter.normal(0, 0.05, params[name].shape)
    gb, gc = model.gt_arrays(scene.labels, scene.calib, cfg)
    cache = {}
    _, grads, res = model.loss_and_grads(params, inp, gb, gc, cfg, np.random.default_rng(seed), cache)
    base = {k: params[k].copy() for k in params.trainable_names()}
    rng = np.random.default_rng(seed + 12345)

    def loss_at(values):
        for k, v in values.items():
            params[k] = v
        try:
            out = model.training_loss(params, inp, gb, gc, cfg, None, cache, res.proposals)
            return float(out.loss.value)
        finally:
            for k in values:
                params[k] = base[k]

    errors = {}
    for name in base:
        errors[name] = _directional_errors(loss_at, grads, {name: base[name]}, rng, h, n_dirs)
    errors["<all>"] = _directional_errors(loss_at, grads, base, rng, h, n_dirs)
    return errors


def end_to_end_suite(seeds=range(10), tol=1e-3):
    worst = {}
    for seed in seeds:
        for k, v in end_to_end_check(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return all(v < tol for v in worst.values()), worst
