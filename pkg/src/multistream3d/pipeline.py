"""Dataset access, preprocessing cache, training loop, inference and evaluation
drivers. The CLI is a thin argparse layer over these functions."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import kitti_io as kio
from . import model
from . import tensorfile
from .config import RunConfig

log = logging.getLogger(__name__)

DATA_ENV = "MULTISTREAM3D_DATA"
CHECKPOINT_LAYOUT_VERSION = 1
# Table-V style stream combinations: (use_mm, use_hc, use_pillar, use_rgb)
ABLATION_ROWS = (
    (True, True, True, True),
    (True, True, False, True),
    (True, False, True, True),
    (False, True, False, False),
    (True, False, False, True),
    (False, True, True, False),
)


class UserError(Exception):
    """Bad input or configuration; the CLI exits with status 1."""


class NaNLossError(RuntimeError):
    pass


def ablation_config(cfg: RunConfig, row) -> RunConfig:
    out = cfg.copy()
    s = out.streams
    s.use_mm, s.use_hc, s.use_pillar, s.use_rgb = row
    return out.validate()


def _map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def atomic_write(path, data: bytes | str):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


# ------------------------------------------------------------------ data


def data_root(cfg: RunConfig):
    root = cfg.data.root or os.environ.get(DATA_ENV, "")
    if not root:
        raise UserError(f"no dataset root: set data.root or ${DATA_ENV}")
    if not os.path.isdir(root):
        raise UserError(f"dataset root {root!r} does not exist")
    return root


def frame_ids(cfg: RunConfig):
    path = os.path.join(data_root(cfg), cfg.data.split)
    if not os.path.isfile(path):
        raise UserError(f"split file {path!r} not found")
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def frame_paths(cfg: RunConfig, fid):
    root = data_root(cfg)
    d = cfg.data
    return {
        "velodyne": os.path.join(root, d.velodyne_dir, fid + ".bin"),
        "pseudo": os.path.join(root, d.pseudo_pattern.format(frame=fid)),
        "calib": os.path.join(root, d.calib_dir, fid + ".txt"),
        "label": os.path.join(root, d.label_dir, fid + ".txt"),
    }


def missing_files(cfg: RunConfig, fid, need_labels=False):
    p = frame_paths(cfg, fid)
    keys = ["velodyne", "calib"] + (["label"] if need_labels else [])
    if cfg.streams.use_rgb and cfg.streams.use_mm and not cfg.data.allow_missing_pseudo:
        keys.append("pseudo")
    return [p[k] for k in keys if not os.path.isfile(p[k])]


def read_frame(cfg: RunConfig, fid):
    p = frame_paths(cfg, fid)
    lidar = kio.read_velodyne(p["velodyne"])
    calib = kio.read_calibration(p["calib"])
    pseudo = None
    if cfg.streams.use_rgb and cfg.streams.use_mm:
        pseudo = kio.load_pseudo_points(p["pseudo"], allow_missing=cfg.data.allow_missing_pseudo)
    return lidar, pseudo, calib


def read_gt(cfg: RunConfig, fid):
    p = frame_paths(cfg, fid)
    return kio.read_labels(p["label"]), kio.read_calibration(p["calib"])


# ----------------------------------------------------------------- cache


def cache_key(cfg: RunConfig):
    """Hash of everything that determines the cached frame inputs."""
    d = cfg.to_dict()
    data = {k: v for k, v in d["data"].items() if k != "cache_dir"}
    streams = {k: d["streams"][k] for k in ("use_rgb", "use_mm")}
    blob = json.dumps({"data": data, "grid": d["grid"], "streams": streams, "seed": d["train"]["seed"],
                       "keep_fraction": d["train"]["keep_fraction"], "format": tensorfile.FORMAT_VERSION},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cache_dir(cfg: RunConfig, cache_root=None):
    return os.path.join(cache_root or cfg.data.cache_dir, cache_key(cfg))


@dataclass
class PreprocessReport:
    built: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    missing: dict = field(default_factory=dict)
    directory: str = ""


def _build_one(args):
    cfg, fid, path = args
    lidar, pseudo, calib = read_frame(cfg, fid)
    inp = model.prepare_frame(lidar, pseudo, calib, cfg, fid)
    atomic_write(path, tensorfile.dumps(model.inputs_to_tensors(inp), kind="cache"))
    return fid


def _cache_valid(path):
    try:
        tensorfile.load(path, kind="cache")
        return True
    except (OSError, tensorfile.TensorFileError):
        return False


def preprocess(cfg: RunConfig, cache_root=None, skip_missing=False, jobs=1) -> PreprocessReport:
    ids = frame_ids(cfg)
    out = cache_dir(cfg, cache_root)
    os.makedirs(out, exist_ok=True)
    atomic_write(os.path.join(out, "config.yaml"), cfg.dump())
    report = PreprocessReport(directory=out)
    todo = []
    for fid in ids:
        miss = missing_files(cfg, fid)
        if miss:
            report.missing[fid] = miss
            continue
        path = os.path.join(out, fid + ".tns")
        if os.path.isfile(path) and _cache_valid(path):
            report.skipped.append(fid)
        else:
            todo.append((cfg, fid, path))
    if report.missing and not skip_missing:
        lines = [f"  {fid}: {', '.join(m)}" for fid, m in sorted(report.missing.items())]
        raise UserError("missing frame files:\n" + "\n".join(lines))
    report.built = _map(_build_one, todo, jobs)
    return report


def load_inputs(cfg: RunConfig, fid, cache_root=None):
    path = os.path.join(cache_dir(cfg, cache_root), fid + ".tns")
    if os.path.isfile(path):
        return model.inputs_from_tensors(fid, tensorfile.load(path, kind="cache"), cfg)
    lidar, pseudo, calib = read_frame(cfg, fid)
    return model.prepare_frame(lidar, pseudo, calib, cfg, fid)


# ----------------------------------------------------------- checkpoints


def _layout(params: ad.ParamStore):
    return [[n, list(params[n].shape)] for n in params]


def _encode_text(s):
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def _decode_text(a):
    return bytes(np.asarray(a, dtype=np.uint8)).decode("utf-8")


def checkpoint_tensors(params, opt_state, step, cfg: RunConfig):
    meta = {"version": CHECKPOINT_LAYOUT_VERSION, "layout": _layout(params)}
    t = {"meta.layout": _encode_text(json.dumps(meta, sort_keys=True)), "meta.config": _encode_text(cfg.dump()),
         "state.step": np.array(step, dtype=np.int64)}
    for n in params:
        t[f"param.{n}"] = params[n]
    if isinstance(opt_state, ad.AdamState):
        t["adam.t"] = np.array(opt_state.t, dtype=np.int64)
        for n, v in opt_state.m.items():
            t[f"adam.m.{n}"] = v
        for n, v in opt_state.v.items():
            t[f"adam.v.{n}"] = v
    elif isinstance(opt_state, ad.SGDState):
        for n, v in opt_state.velocity.items():
            t[f"sgd.velocity.{n}"] = v
    return t


def load_checkpoint(path, cfg: RunConfig):
    """(params, optimizer state, step); layout mismatch raises UserError."""
    try:
        t = tensorfile.load(path, kind="checkpoint")
    except (OSError, tensorfile.TensorFileError) as exc:
        raise UserError(f"cannot read checkpoint {path!r}: {exc}") from None
    params = model.init_params(cfg)
    meta = json.loads(_decode_text(t["meta.layout"]))
    if meta.get("version") != CHECKPOINT_LAYOUT_VERSION:
        raise UserError(f"checkpoint layout version {meta.get('version')} is not supported "
                        f"(expected {CHECKPOINT_LAYOUT_VERSION})")
    if meta["layout"] != _layout(params):
        want = {n: s for n, s in _layout(params)}
        got = {n: s for n, s in meta["layout"]}
        diff = sorted(set(want) ^ set(got)) + sorted(n for n in set(want) & set(got) if want[n] != got[n])
        raise UserError(f"checkpoint layout v{meta['version']} does not match the configuration; "
                        f"differing parameters: {', '.join(diff[:8])}{' ...' if len(diff) > 8 else ''}")
    for n in params:
        params[n] = t[f"param.{n}"]
    if "adam.t" in t:
        state = ad.AdamState(t=int(t["adam.t"]))
        for n in params.trainable_names():
            if f"adam.m.{n}" in t:
                state.m[n] = t[f"adam.m.{n}"]
                state.v[n] = t[f"adam.v.{n}"]
    else:
        state = ad.SGDState({n[len("sgd.velocity."):]: v for n, v in t.items() if n.startswith("sgd.velocity.")})
    return params, state, int(t["state.step"])


# -------------------------------------------------------------- training

LOSS_TERMS = ("cls", "box", "dir", "roi_cls", "roi_box")


@dataclass
class TrainReport:
    steps: int
    losses: list
    checkpoint: str


def clip_gradients(grads, max_norm):
    if max_norm <= 0:
        return grads, None
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def schedule(n_frames, cfg: RunConfig):
    """(steps per epoch, total steps)."""
    per_epoch = max(1, -(-n_frames // cfg.train.batch_size))
    total = per_epoch * cfg.train.epochs
    if cfg.train.max_steps > 0:
        total = min(total, cfg.train.max_steps)
    return per_epoch, total


def lr_at(step, total, cfg: RunConfig):
    """Learning rate for ``step``; cosine decays to zero at ``total``."""
    t = cfg.train
    if t.lr_schedule == "cosine" and total > 0:
        return 0.5 * t.lr * (1.0 + math.cos(math.pi * step / total))
    return t.lr


def batch_for_step(step, n_frames, cfg: RunConfig):
    per_epoch = max(1, -(-n_frames // cfg.train.batch_size))
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([cfg.train.seed, epoch]).permutation(n_frames)
    b = cfg.train.batch_size
    return epoch, perm[pos * b : (pos + 1) * b]


def _csv_row(values):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(values)
    return buf.getvalue()


def _dump_nan(out_dir, step, batch, cfg, frames):
    diag = {"step": step, "frames": [], "config_hash": cfg.hash()}
    tensors = {}
    for fid, value, terms in batch:
        diag["frames"].append({"frame": fid, "loss": repr(value), "terms": {k: repr(v) for k, v in terms.items()}})
    for fid in [b[0] for b in batch]:
        for k, v in model.inputs_to_tensors(frames[fid]).items():
            tensors[f"{fid}.{k}"] = v
    atomic_write(os.path.join(out_dir, "nan_dump.json"), json.dumps(diag, indent=2, sort_keys=True) + "\n")
    atomic_write(os.path.join(out_dir, "nan_batch.tns"), tensorfile.dumps(tensors, kind="diagnostic"))


def train(cfg: RunConfig, out_dir, cache_root=None, resume=False, progress=None) -> TrainReport:
    """Seeded training loop with per-step loss CSV and per-epoch checkpoints.

    Batch order and all per-step randomness derive from (seed, step), so a
    resumed run retraces the uninterrupted trajectory exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "config.yaml"), cfg.dump())
    ids = frame_ids(cfg)
    if not ids:
        raise UserError("split is empty")
    for fid in ids:
        miss = missing_files(cfg, fid, need_labels=True)
        if miss:
            raise UserError(f"frame {fid}: missing {', '.join(miss)}")
    frames = {fid: load_inputs(cfg, fid, cache_root) for fid in ids}
    gts = {}
    for fid in ids:
        labels, calib = read_gt(cfg, fid)
        gts[fid] = model.gt_arrays(labels, calib, cfg)
    ckpt_path = os.path.join(out_dir, "checkpoint.tns")
    loss_path = os.path.join(out_dir, "loss.csv")
    t = cfg.train
    start = 0
    if resume and os.path.isfile(ckpt_path):
        params, state, start = load_checkpoint(ckpt_path, cfg)
        with open(loss_path) as f:
            kept = f.readlines()[: start + 1]
        atomic_write(loss_path, "".join(kept))
    else:
        params = model.init_params(cfg)
        state = ad.AdamState() if t.optimizer == "adam" else ad.SGDState()
        atomic_write(loss_path, _csv_row(["step", "epoch", "loss", *LOSS_TERMS, "grad_norm"]))
    per_epoch, total = schedule(len(ids), cfg)
    anchor_cache = {}
    losses = []
    with open(loss_path, "a") as log_file:
        for step in range(start, total):
            epoch, batch = batch_for_step(step, len(ids), cfg)
            acc, records, value_sum = None, [], 0.0
            for slot, k in enumerate(batch):
                fid = ids[k]
                rng = np.random.default_rng([t.seed, step, slot])
                value, grads, res = model.loss_and_grads(params, frames[fid], *gts[fid], cfg, rng, anchor_cache)
                records.append((fid, value, res.terms))
                value_sum += value
                acc = grads if acc is None else {n: acc[n] + grads[n] for n in acc}
            if not all(math.isfinite(r[1]) for r in records):
                _dump_nan(out_dir, step, records, cfg, frames)
                raise NaNLossError(f"non-finite loss at step {step}; diagnostics in {out_dir}/nan_dump.json")
            grads = {n: g / len(batch) for n, g in acc.items()}
            grads, norm = clip_gradients(grads, t.grad_clip)
            lr = lr_at(step, total, cfg)
            if t.optimizer == "adam":
                ad.adam_step(params, grads, lr, t.beta1, t.beta2, t.eps, state)
            else:
                ad.sgd_step(params, grads, lr, t.momentum, state)
            mean_loss = value_sum / len(batch)
            terms = [sum(r[2].get(k, 0.0) for r in records) / len(batch) for k in LOSS_TERMS]
            log_file.write(_csv_row([step, epoch, repr(mean_loss), *(repr(v) for v in terms),
                                     repr(norm) if norm is not None else ""]))
            log_file.flush()
            losses.append(mean_loss)
            if progress is not None:
                progress(step, total, mean_loss)
            if (step + 1) % per_epoch == 0 or step + 1 == total:
                atomic_write(ckpt_path, tensorfile.dumps(checkpoint_tensors(params, state, step + 1, cfg)))
    if start >= total and not os.path.isfile(ckpt_path):
        atomic_write(ckpt_path, tensorfile.dumps(checkpoint_tensors(params, state, start, cfg)))
    return TrainReport(total, losses, ckpt_path)


def read_loss_log(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [float(r["loss"]) for r in rows]


# ------------------------------------------------------------- inference


def detections_to_labels(dets, calib, cfg: RunConfig):
    size = tuple(cfg.data.image_size)
    return [kio.label_from_lidar_box(d.box, calib, d.cls, size, score=d.score) for d in dets]


def _infer_one(args):
    cfg, params, fid, cache_root, out_dir = args
    inp = load_inputs(cfg, fid, cache_root)
    calib = inp.calib if inp.calib is not None else read_frame(cfg, fid)[2]
    dets, timings = model.infer_frame(params, inp, cfg)
    text = "".join(kio.format_label(o) + "\n" for o in detections_to_labels(dets, calib, cfg))
    atomic_write(os.path.join(out_dir, "data", fid + ".txt"), text)
    return fid, len(dets), timings


STAGES = ("hc", "pillar", "mm", "fusion", "head", "total")


def infer(cfg: RunConfig, checkpoint, out_dir, frames=None, cache_root=None, jobs=1):
    """Write KITTI result files and a per-frame, per-stage latency log (ms)."""
    params, _, _ = load_checkpoint(checkpoint, cfg)
    ids = list(frames) if frames else frame_ids(cfg)
    os.makedirs(os.path.join(out_dir, "data"), exist_ok=True)
    atomic_write(os.path.join(out_dir, "config.yaml"), cfg.dump())
    missing = {fid: m for fid in ids if (m := missing_files(cfg, fid))}
    if missing:
        raise UserError("missing frame files: " + ", ".join(sorted(missing)))
    rows = _map(_infer_one, [(cfg, params, fid, cache_root, out_dir) for fid in ids], jobs)
    lines = [_csv_row(["frame", "detections", *(f"{s}_ms" for s in STAGES)])]
    for fid, n, timings in rows:
        lines.append(_csv_row([fid, n, *(f"{1000 * timings[s]:.3f}" if s in timings else "" for s in STAGES)]))
    atomic_write(os.path.join(out_dir, "latency.csv"), "".join(lines))
    return rows


# ------------------------------------------------------------ evaluation


def read_results(results_dir):
    d = os.path.join(results_dir, "data") if os.path.isdir(os.path.join(results_dir, "data")) else results_dir
    out = {}
    for name in sorted(os.listdir(d)):
        if name.endswith(".txt"):
            out[name[:-4]] = kio.read_labels(os.path.join(d, name))
    return out


def evaluate(cfg: RunConfig, results_dir, out_dir, label_dir=None, r11=None):
    results = read_results(results_dir)
    if label_dir is None:
        ids = frame_ids(cfg)
        labels = {fid: read_gt(cfg, fid)[0] for fid in ids}
    else:
        labels = {n[:-4]: kio.read_labels(os.path.join(label_dir, n)) for n in sorted(os.listdir(label_dir))
                  if n.endswith(".txt")}
    orphans_r = sorted(set(results) - set(labels))
    orphans_l = sorted(set(labels) - set(results))
    if orphans_r or orphans_l:
        msg = []
        if orphans_r:
            msg.append("results without labels: " + ", ".join(orphans_r))
        if orphans_l:
            msg.append("labels without results: " + ", ".join(orphans_l))
        raise UserError("frame id mismatch; " + "; ".join(msg))
    r11 = cfg.eval.r11 if r11 is None else r11
    res = ev.evaluate(results, labels, tuple(cfg.head.classes), cfg.eval.iou_thresholds,
                      tuple(cfg.eval.benchmarks), r11)
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "config.yaml"), cfg.dump())
    ev.emit_curves(res, out_dir)
    atomic_write(os.path.join(out_dir, "table.txt"), ev.format_table(res) + "\n")
    return res
