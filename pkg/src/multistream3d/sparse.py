"""Coordinate-list sparse tensors and their kernels.

Active coordinates are kept lexicographically sorted, which fixes every
iteration order and makes all outputs bit-deterministic. Features may be a
plain ndarray or an autodiff node; the kernels here work on ndarrays and
the tape ops in :mod:`autodiff` reuse them.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class SparseTensor:
    coords: np.ndarray  # (N, d) int64, unique, sorted
    feats: Any  # (N, C)
    extents: tuple
    grid: Any = None

    @property
    def ndim(self):
        return len(self.extents)

    @property
    def channels(self):
        return _shape(self.feats)[1]

    def __len__(self):
        return len(self.coords)

    def keys(self):
        return encode(self.coords, self.extents)

    def with_feats(self, feats):
        return replace(self, feats=feats)


def _shape(feats):
    return feats.shape if isinstance(feats, np.ndarray) else feats.value.shape


def make_sparse(coords, feats, extents, grid=None, check=True) -> SparseTensor:
    """Build a tensor from unsorted coords; rejects duplicates and out-of-range cells."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(extents))
    feats = np.asarray(feats, dtype=np.float64)
    feats = feats.reshape(len(coords), feats.shape[-1] if feats.ndim > 1 else -1)
    if check:
        if len(coords) and (coords.min() < 0 or np.any(coords >= np.asarray(extents))):
            raise ValueError("coordinates outside extents")
    keys = encode(coords, extents)
    order = np.argsort(keys, kind="stable")
    if check and len(keys) and np.any(np.diff(keys[order]) == 0):
        raise ValueError("duplicate coordinates")
    return SparseTensor(coords[order], feats[order], tuple(extents), grid)


def encode(coords, extents):
    coords = np.asarray(coords, dtype=np.int64)
    if not len(coords):
        return np.zeros(0, dtype=np.int64)
    return np.ravel_multi_index(tuple(coords.T), tuple(extents))


def lookup(sorted_keys, query):
    """Rows of ``query`` keys in ``sorted_keys``; -1 where absent."""
    if not len(sorted_keys):
        return np.full(np.shape(query), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return np.where(sorted_keys[pos] == query, pos, -1).astype(np.int64)


# ------------------------------------------------------------ convolution


@dataclass
class ConvKernel:
    weights: np.ndarray  # (K**d, C_in, C_out), offsets in C order
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    mode: str = "submanifold"

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.stride > 1 and self.mode != "strided":
            raise ValueError("stride > 1 requires strided mode")


def kernel_size(n_offsets, ndim):
    k = int(round(n_offsets ** (1.0 / ndim)))
    if k**ndim != n_offsets:
        raise ValueError(f"{n_offsets} offsets is not a K^{ndim} kernel")
    return k


def kernel_offsets(k, ndim):
    return np.array(list(itertools.product(range(k), repeat=ndim)), dtype=np.int64)


def out_extents(extents, stride):
    return tuple(-(-e // stride) for e in extents)


@dataclass
class ConvPlan:
    """Gather table of a sparse conv: ``table[o, t]`` is the input row feeding
    output ``o`` through kernel offset ``t``, or -1."""

    out_coords: np.ndarray
    out_extents: tuple
    table: np.ndarray
    n_in: int


def plan_conv(coords, extents, k=3, stride=1, mode="submanifold") -> ConvPlan:
    coords = np.asarray(coords, dtype=np.int64)
    ndim = len(extents)
    pad = k // 2
    offs = kernel_offsets(k, ndim)
    in_keys = encode(coords, extents)
    if mode == "submanifold":
        if stride != 1:
            raise ValueError("submanifold convolution requires stride 1")
        o_coords, o_ext = coords, tuple(extents)
    elif mode == "strided":
        o_ext = out_extents(extents, stride)
        # input i feeds output o when i = stride*o + t - pad
        cand = coords[:, None, :] + pad - offs[None, :, :]
        cand = cand.reshape(-1, ndim)
        ok = np.all(cand % stride == 0, axis=1)
        cand = cand[ok] // stride
        ok = np.all((cand >= 0) & (cand < np.asarray(o_ext)), axis=1)
        cand = cand[ok]
        if len(cand):
            uk = np.unique(encode(cand, o_ext))
            o_coords = np.stack(np.unravel_index(uk, o_ext), axis=1).astype(np.int64)
        else:
            o_coords = np.zeros((0, ndim), dtype=np.int64)
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    src = o_coords[:, None, :] * stride + offs[None, :, :] - pad
    inside = np.all((src >= 0) & (src < np.asarray(extents)), axis=2)
    table = np.full(src.shape[:2], -1, dtype=np.int64)
    if inside.any():
        table[inside] = lookup(in_keys, encode(src[inside], extents))
    return ConvPlan(o_coords, o_ext, table, len(coords))


def conv_forward(feats, table, weights, bias):
    """im2col product: gather per offset then one matmul."""
    n_out, n_off = table.shape
    c_in = feats.shape[1]
    padded = np.concatenate([feats, np.zeros((1, c_in))])
    cols = padded[table].reshape(n_out, n_off * c_in)
    return cols @ weights.reshape(n_off * c_in, -1) + bias


def conv_backward(feats, table, weights, grad_out):
    n_out, n_off = table.shape
    c_in = feats.shape[1]
    padded = np.concatenate([feats, np.zeros((1, c_in))])
    cols = padded[table].reshape(n_out, n_off * c_in)
    gw = (cols.T @ grad_out).reshape(weights.shape)
    gb = grad_out.sum(axis=0)
    gcols = (grad_out @ weights.reshape(n_off * c_in, -1).T).reshape(n_out, n_off, c_in)
    gpad = np.zeros_like(padded)
    for t in range(n_off):
        # rows are unique per offset apart from the -1 sentinel
        gpad[table[:, t]] += gcols[:, t]
    return gpad[:-1], gw, gb


def sparse_conv(x: SparseTensor, kernel: ConvKernel) -> SparseTensor:
    w = np.asarray(kernel.weights, dtype=np.float64)
    if w.shape[1] != x.channels:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, tensor has {x.channels}")
    k = kernel_size(w.shape[0], x.ndim)
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    plan = plan_conv(x.coords, x.extents, k, kernel.stride, kernel.mode)
    feats = conv_forward(np.asarray(x.feats), plan.table, w, np.asarray(kernel.bias, dtype=np.float64))
    return SparseTensor(plan.out_coords, feats, plan.out_extents, None)


def sparse_conv3d(x: SparseTensor, kernel: ConvKernel) -> SparseTensor:
    if x.ndim != 3:
        raise ValueError("expected a 3D sparse tensor")
    return sparse_conv(x, kernel)


def sparse_conv2d(x: SparseTensor, kernel: ConvKernel) -> SparseTensor:
    if x.ndim != 2:
        raise ValueError("expected a 2D sparse tensor")
    return sparse_conv(x, kernel)


# ------------------------------------------------------------ reductions


@dataclass
class ScatterPlan:
    out_coords: np.ndarray
    rows: np.ndarray  # contributing input rows, grouped by output cell
    starts: np.ndarray  # group starts into rows
    dropped: int


def plan_scatter(cells, extents) -> ScatterPlan:
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, len(extents))
    inside = np.all((cells >= 0) & (cells < np.asarray(extents)), axis=1)
    dropped = int((~inside).sum())
    if dropped:
        log.debug("scatter: dropped %d out-of-range rows", dropped)
    rows = np.flatnonzero(inside)
    keys = encode(cells[rows], extents)
    order = np.argsort(keys, kind="stable")
    rows, keys = rows[order], keys[order]
    if len(keys):
        starts = np.r_[0, np.flatnonzero(np.diff(keys)) + 1]
        out = np.stack(np.unravel_index(keys[starts], extents), axis=1).astype(np.int64)
    else:
        starts = np.zeros(0, dtype=np.int64)
        out = np.zeros((0, len(extents)), dtype=np.int64)
    return ScatterPlan(out, rows, starts, dropped)


def segment_max(values, rows, starts):
    """Channel-wise max per group and the lowest-row argmax."""
    if not len(starts):
        return np.zeros((0, values.shape[1])), np.zeros((0, values.shape[1]), dtype=np.int64)
    vals = values[rows]
    mx = np.maximum.reduceat(vals, starts, axis=0)
    group = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(rows)]))
    big = np.iinfo(np.int64).max
    cand = np.where(vals == mx[group], rows[:, None], big)
    arg = np.minimum.reduceat(cand, starts, axis=0)
    return mx, arg


def scatter_max(values, cells, extents, grid=None):
    """Returns (SparseTensor, argmax rows (P, C)); out-of-range rows are dropped."""
    values = np.asarray(values, dtype=np.float64)
    plan = plan_scatter(cells, extents)
    mx, arg = segment_max(values, plan.rows, plan.starts)
    out = SparseTensor(plan.out_coords, mx, tuple(extents), grid)
    out.dropped = plan.dropped
    return out, arg


def column_groups(coords):
    """Runs of equal (i, j) in lexicographically sorted (i, j, k) coords."""
    ij = coords[:, :2]
    if not len(ij):
        return np.zeros(0, dtype=np.int64), ij
    change = np.any(np.diff(ij, axis=0) != 0, axis=1)
    starts = np.r_[0, np.flatnonzero(change) + 1]
    return starts, ij[starts]


def height_compress(x: SparseTensor, with_argmax=False):
    """Max over the vertical axis, active voxels only."""
    starts, ij = column_groups(x.coords)
    rows = np.arange(len(x.coords))
    mx, arg = segment_max(np.asarray(x.feats, dtype=np.float64), rows, starts)
    out = SparseTensor(ij.astype(np.int64), mx, tuple(x.extents[:2]), None)
    return (out, arg) if with_argmax else out


# --------------------------------------------------------------- dense io


def to_dense(x: SparseTensor):
    feats = np.asarray(x.feats)
    dense = np.zeros(tuple(x.extents) + (feats.shape[1],))
    if len(x.coords):
        dense[tuple(x.coords.T)] = feats
    return dense


def from_dense(a, zero_threshold=0.0, extents=None):
    a = np.asarray(a, dtype=np.float64)
    if extents is not None and tuple(a.shape[:-1]) != tuple(extents):
        raise ValueError(f"dense shape {a.shape[:-1]} does not match extents {tuple(extents)}")
    mask = np.abs(a).max(axis=-1) > zero_threshold if a.shape[-1] else np.zeros(a.shape[:-1], bool)
    coords = np.argwhere(mask).astype(np.int64)
    return SparseTensor(coords, a[mask], tuple(a.shape[:-1]))


def dense_conv(dense, weights, bias, stride=1):
    """Zero-padded dense correlation, the oracle for :func:`sparse_conv`."""
    ndim = dense.ndim - 1
    k = kernel_size(weights.shape[0], ndim)
    pad = k // 2
    ext = dense.shape[:ndim]
    o_ext = out_extents(ext, stride)
    padded = np.pad(dense, [(pad, pad)] * ndim + [(0, 0)])
    out = np.zeros(o_ext + (weights.shape[2],))
    for t, off in enumerate(kernel_offsets(k, ndim)):
        sl = tuple(slice(int(o), int(o) + stride * (n - 1) + 1, stride) for o, n in zip(off, o_ext))
        out += padded[sl] @ weights[t]
    return out + bias


def dump_csv(x: SparseTensor, path):
    feats = np.asarray(x.feats)
    axes = "ijk"[: x.ndim]
    with open(path, "w") as f:
        f.write(",".join([*axes, *(f"c{c}" for c in range(feats.shape[1]))]) + "\n")
        for c, v in zip(x.coords, feats):
            f.write(",".join([*(str(int(i)) for i in c), *(repr(float(z)) for z in v)]) + "\n")
