"""Feature streams and their fusion into the BEV map F_H.

* multimodal (MM): UV-Polar blocks over voxelized hybrid points
* height compression (HC): 3D sparse blocks, max over height, 2D conv stack
* pillar: pillar MLP, scatter-max, 2D sparse conv stack

All functions take a :class:`~multistream3d.autodiff.Tape` and return
sparse tensors whose feats are tape nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import sparse as sp
from .config import RunConfig


@dataclass
class BEVGeometry:
    origin: tuple  # metric (x, y) of cell (0, 0) corner
    cell_size: tuple
    extents: tuple

    def centers(self, coords):
        return np.asarray(self.origin) + (np.asarray(coords, dtype=np.float64) + 0.5) * np.asarray(self.cell_size)


def voxel_grid(cfg: RunConfig) -> geo.GridSpec3D:
    return geo.GridSpec3D.from_range(cfg.grid.point_range, cfg.grid.voxel_size)


def total_stride(strides):
    return int(np.prod(strides))


def bev_geometry(cfg: RunConfig) -> BEVGeometry:
    grid = voxel_grid(cfg)
    ext = grid.extents[:2]
    for s in cfg.streams.hc_strides:
        ext = sp.out_extents(ext, s)
    stride = total_stride(cfg.streams.hc_strides)
    return BEVGeometry(grid.origin[:2], tuple(v * stride for v in grid.voxel_size[:2]), tuple(ext))


def pillar_extents(cfg: RunConfig):
    r = cfg.grid.point_range
    dx, dy = cfg.grid.pillar_size
    return (int(round((r[3] - r[0]) / dx)), int(round((r[4] - r[1]) / dy)))


def uv_grid(cfg: RunConfig, calibrated: bool) -> geo.GridSpec2D:
    ranges = cfg.grid.uv_pixel_range if calibrated else cfg.grid.uv_norm_range
    return geo.GridSpec2D(tuple(tuple(r) for r in ranges), tuple(cfg.grid.uv_extents))


def polar_grid(cfg: RunConfig) -> geo.GridSpec2D:
    return geo.GridSpec2D((tuple(cfg.grid.polar_theta_range), tuple(cfg.grid.polar_phi_range)), tuple(cfg.grid.polar_extents))


# ------------------------------------------------------------- parameters


def _he(rng, k_off, c_in, c_out):
    return rng.normal(0.0, math.sqrt(2.0 / (k_off * c_in)), size=(k_off, c_in, c_out))


def _conv_params(params, prefix, rng, ndim, k, c_in, c_out):
    params.add(f"{prefix}.W", _he(rng, k**ndim, c_in, c_out))
    params.add(f"{prefix}.b", np.zeros(c_out))


def mm_output_channels(cfg):
    return cfg.streams.mm_out_channels


def hc_output_channels(cfg):
    s = cfg.streams
    return s.bev2d_channels[-1] if s.bev2d_channels else s.hc_channels[-1]


def pillar_output_channels(cfg):
    s = cfg.streams
    return s.pillar_channels[-1] if s.pillar_channels else s.pillar_mlp[-1]


def lidar_fusion_channels(cfg):
    s = cfg.streams
    return (hc_output_channels(cfg) if s.use_hc else 0) + (pillar_output_channels(cfg) if s.use_pillar else 0)


def fused_channels(cfg):
    """Declared width of F_H for the enabled streams."""
    return lidar_fusion_channels(cfg) + (mm_output_channels(cfg) if cfg.streams.use_mm else 0)


def init_stream_params(params: ad.ParamStore, cfg: RunConfig, rng):
    s = cfg.streams
    k = s.kernel_size
    if s.use_mm:
        c_in = 4
        for b, c in enumerate(s.mm_channels):
            _conv_params(params, f"mm.block{b}.conv3d", rng, 3, k, c_in, c)
            _conv_params(params, f"mm.block{b}.uv", rng, 2, k, c, c)
            _conv_params(params, f"mm.block{b}.polar", rng, 2, k, c, c)
            c_in = 3 * c
        _conv_params(params, "mm.out", rng, 3, k, c_in, s.mm_out_channels)
    if s.use_hc:
        c_in = 4
        for b, c in enumerate(s.hc_channels):
            for layer in range(s.hc_layers_per_block):
                _conv_params(params, f"hc.block{b}.conv{layer}", rng, 3, k, c_in, c)
                c_in = c
        for layer, c in enumerate(s.bev2d_channels):
            _conv_params(params, f"hc.bev2d.{layer}", rng, 2, k, c_in, c)
            c_in = c
    if s.use_pillar:
        ad.init_mlp(params, ad.MLPSpec(tuple(s.pillar_mlp)), "pillar.mlp", rng)
        c_in = s.pillar_mlp[-1]
        for layer, c in enumerate(s.pillar_channels):
            _conv_params(params, f"pillar.conv{layer}", rng, 2, k, c_in, c)
            c_in = c
    width = lidar_fusion_channels(cfg)
    if width:
        for layer in range(s.fusion_layers):
            _conv_params(params, f"fusion.{layer}", rng, 2, k, width, width)


# ----------------------------------------------------------------- layers


def conv(tape, x, prefix, stride=1, activation=True):
    mode = "strided" if stride > 1 else "submanifold"
    out = ad.sparse_conv(x, tape.param(f"{prefix}.W"), tape.param(f"{prefix}.b"), stride, mode)
    if activation:
        out = out.with_feats(ad.relu(out.feats))
    return out


def as_node_tensor(tape, x: sp.SparseTensor):
    if isinstance(x.feats, ad.Node):
        return x
    return x.with_feats(tape.constant(np.asarray(x.feats, dtype=np.float64)))


def _ensure_tape(tape, params):
    return tape if tape is not None else ad.Tape(params)


def _empty2d(tape, extents, channels):
    return sp.SparseTensor(np.zeros((0, 2), dtype=np.int64), tape.constant(np.zeros((0, channels))), tuple(extents))


# ------------------------------------------------------------- MM stream


@dataclass
class MMLayerOutput:
    f_mm: sp.SparseTensor
    f_uv: sp.SparseTensor
    f_polar: sp.SparseTensor
    uv_rows: np.ndarray  # per voxel row into f_uv, -1 when invalid
    polar_rows: np.ndarray


def project_centers(centers, calib, cfg: RunConfig):
    """UV and polar grid cells of voxel centers, with validity masks."""
    uv_cells, uv_ok = geo.uv_map(centers, calib, uv_grid(cfg, calib is not None), cfg.grid.depth_eps)
    nonzero = np.linalg.norm(centers, axis=1) > 0
    polar_cells = np.zeros((len(centers), 2), dtype=np.int64)
    polar_ok = np.zeros(len(centers), dtype=bool)
    if nonzero.any():
        p = geo.polar_transform(centers[nonzero])
        cells, ok = geo.polar_grid_index(p, polar_grid(cfg))
        polar_cells[nonzero], polar_ok[nonzero] = cells, ok
    return uv_cells, uv_ok, polar_cells, polar_ok


def _branch(tape, feats, cells, ok, extents, prefix):
    rows = np.flatnonzero(ok)
    picked = ad.gather_rows(feats, rows)
    grid = ad.scatter_max(picked, cells[rows], extents)
    processed = conv(tape, grid, prefix, 1, activation=False)
    # rows of each voxel's cell in the processed grid
    voxel_rows = np.full(len(ok), -1, dtype=np.int64)
    if len(rows):
        voxel_rows[rows] = sp.lookup(grid.keys(), sp.encode(cells[rows], extents))
    gathered = ad.gather_rows(processed.feats, voxel_rows)
    return grid, processed, voxel_rows, gathered


def uv_polar_block(x: sp.SparseTensor, voxel_centers, calib, params, cfg: RunConfig, prefix, stride=1, tape=None):
    """One UV-Polar block.

    ``voxel_centers`` gives metric centers for x's grid; after a strided 3D
    conv the centers are recomputed at the coarser resolution via
    ``x.grid`` (a GridSpec3D at the input resolution) when provided,
    otherwise the supplied centers are used with stride 1.
    """
    tape = _ensure_tape(tape, params)
    x = as_node_tensor(tape, x)
    c = params[f"{prefix}.conv3d.W"].shape[2]
    if not len(x):
        empty = sp.SparseTensor(np.zeros((0, 3), dtype=np.int64), tape.constant(np.zeros((0, 3 * c))), x.extents, x.grid)
        e2 = _empty2d(tape, cfg.grid.uv_extents, c)
        return MMLayerOutput(empty, e2, e2, np.zeros(0, np.int64), np.zeros(0, np.int64))
    xp = conv(tape, x, f"{prefix}.conv3d", stride)
    if stride == 1:
        centers = np.asarray(voxel_centers, dtype=np.float64)
        grid = x.grid
    else:
        grid = _coarser(x.grid, stride)
        centers = grid.centers(xp.coords)
    xp.grid = grid
    uv_cells, uv_ok, polar_cells, polar_ok = project_centers(centers, calib, cfg)
    f_uv, uv_proc, uv_rows, g_uv = _branch(tape, xp.feats, uv_cells, uv_ok, tuple(cfg.grid.uv_extents), f"{prefix}.uv")
    f_p, p_proc, p_rows, g_p = _branch(tape, xp.feats, polar_cells, polar_ok, tuple(cfg.grid.polar_extents), f"{prefix}.polar")
    f_mm = sp.SparseTensor(xp.coords, ad.concat([xp.feats, g_uv, g_p]), xp.extents, grid)
    out = MMLayerOutput(f_mm, f_uv, f_p, uv_rows, p_rows)
    out.uv_processed, out.polar_processed = uv_proc, p_proc
    return out


def _coarser(grid: geo.GridSpec3D, stride):
    ext = sp.out_extents(grid.extents, stride)
    return geo.GridSpec3D(grid.origin, tuple(v * stride for v in grid.voxel_size), ext)


def mm_blocks(tape, voxels: sp.SparseTensor, calib, params, cfg: RunConfig):
    """Run the UV-Polar block chain; returns the per-block outputs."""
    s = cfg.streams
    x = as_node_tensor(tape, voxels)
    if x.grid is None:
        x.grid = voxel_grid(cfg)
    outputs = []
    for b in range(len(s.mm_channels)):
        centers = x.grid.centers(x.coords)
        out = uv_polar_block(x, centers, calib, params, cfg, f"mm.block{b}", s.mm_strides[b], tape)
        outputs.append(out)
        x = out.f_mm
    return outputs


def mm_stream_forward(hybrid, calib, params, cfg: RunConfig, tape=None, voxels=None):
    """Hybrid cloud -> UV-Polar blocks -> strided output conv -> BEV max."""
    tape = _ensure_tape(tape, params)
    if voxels is None:
        voxels = geo.voxelize(hybrid, voxel_grid(cfg), cfg.grid.max_points_per_voxel)
    bev_ext = bev_geometry(cfg).extents
    if not len(voxels):
        return _empty2d(tape, bev_ext, cfg.streams.mm_out_channels)
    outputs = mm_blocks(tape, voxels, calib, params, cfg)
    x = outputs[-1].f_mm
    final = conv(tape, x, "mm.out", cfg.streams.mm_strides[-1])
    return ad.height_compress(final)


# ------------------------------------------------------------- HC stream


def hc_voxels_forward(tape, voxels, cfg: RunConfig):
    s = cfg.streams
    x = as_node_tensor(tape, voxels)
    for b, stride in enumerate(s.hc_strides):
        for layer in range(s.hc_layers_per_block):
            x = conv(tape, x, f"hc.block{b}.conv{layer}", stride if layer == 0 else 1)
    return x


def height_stream_forward(lidar, params, cfg: RunConfig, tape=None, voxels=None):
    tape = _ensure_tape(tape, params)
    if voxels is None:
        voxels = geo.voxelize(lidar, voxel_grid(cfg), cfg.grid.max_points_per_voxel)
    bev_ext = bev_geometry(cfg).extents
    if not len(voxels):
        return _empty2d(tape, bev_ext, hc_output_channels(cfg))
    x = hc_voxels_forward(tape, voxels, cfg)
    bev = ad.height_compress(x)
    for layer in range(len(cfg.streams.bev2d_channels)):
        bev = conv(tape, bev, f"hc.bev2d.{layer}")
    return bev


# --------------------------------------------------------- pillar stream


def pillar_grid_of(lidar, cfg: RunConfig):
    r = cfg.grid.point_range
    dx, dy = cfg.grid.pillar_size
    return geo.pillar_bin(lidar, dx, dy, cfg.grid.max_points_per_pillar, origin=(r[0], r[1]),
                          extents=pillar_extents(cfg), z_range=(r[2], r[5]))


def pillar_max_features(tape, pillars: geo.PillarGrid, cfg: RunConfig):
    """F_max: per-point MLP then scatter-max into the pillar grid."""
    spec = ad.MLPSpec(tuple(cfg.streams.pillar_mlp))
    h = ad.mlp_forward(tape.constant(pillars.point_feats), spec, tape.params, "pillar.mlp", tape)
    return ad.scatter_max(h, pillars.coords[pillars.point_pillar], pillars.extents)


def rebin(tape, x: sp.SparseTensor, src_origin, src_cell, bev: BEVGeometry):
    """Move a 2D map onto the BEV grid by cell center, max-pooling collisions."""
    same = tuple(x.extents) == tuple(bev.extents) and np.allclose(src_cell, bev.cell_size, rtol=0, atol=1e-9) \
        and np.allclose(src_origin, bev.origin, rtol=0, atol=1e-9)
    if same:
        return x
    centers = np.asarray(src_origin) + (x.coords + 0.5) * np.asarray(src_cell)
    cells = np.floor((centers - np.asarray(bev.origin)) / np.asarray(bev.cell_size)).astype(np.int64)
    return ad.scatter_max(x.feats, cells, bev.extents)


def pillarnet_forward(lidar, params, cfg: RunConfig, tape=None, pillars=None):
    tape = _ensure_tape(tape, params)
    if pillars is None:
        pillars = pillar_grid_of(lidar, cfg)
    bev = bev_geometry(cfg)
    if not len(pillars.coords):
        return _empty2d(tape, bev.extents, pillar_output_channels(cfg))
    x = pillar_max_features(tape, pillars, cfg)
    stride = 1
    for layer, st in enumerate(cfg.streams.pillar_strides):
        x = conv(tape, x, f"pillar.conv{layer}", st)
        stride *= st
    cell = tuple(v * stride for v in pillars.pillar_size)
    return rebin(tape, x, pillars.origin, cell, bev)


# ----------------------------------------------------------------- fusion


def align(tensors, extents):
    """Union of active sets; gathers each tensor's feats with zero fill."""
    present = [t for t in tensors if t is not None]
    for t in present:
        if tuple(t.extents) != tuple(extents):
            raise ad.ShapeError(f"extent mismatch: {tuple(t.extents)} vs {tuple(extents)}")
    keys = np.unique(np.concatenate([t.keys() for t in present])) if present else np.zeros(0, np.int64)
    coords = np.stack(np.unravel_index(keys, extents), axis=1).astype(np.int64) if len(keys) else np.zeros((0, 2), np.int64)
    gathered = []
    for t in tensors:
        if t is None:
            gathered.append(None)
        else:
            rows = sp.lookup(t.keys(), keys)
            gathered.append(ad.gather_rows(t.feats, rows))
    return coords, gathered


def fuse_streams(f_bev2d, f_s2d, f_mm_bev, params, cfg: RunConfig, tape=None):
    """F_H = ReLU-conv-stack(F_BEV,2D (+) F_S,2D) (+) F_MM on the union of active cells."""
    tape = _ensure_tape(tape, params)
    bev = bev_geometry(cfg)
    lidar = [t for t in (f_bev2d, f_s2d) if t is not None]
    stack = None
    if lidar:
        coords, feats = align(lidar, bev.extents)
        x = sp.SparseTensor(coords, ad.concat(feats) if len(feats) > 1 else feats[0], tuple(bev.extents))
        for layer in range(cfg.streams.fusion_layers):
            x = conv(tape, x, f"fusion.{layer}")
        stack = x
    if f_mm_bev is None:
        if stack is None:
            raise ValueError("no stream outputs to fuse")
        return stack
    if stack is None:
        return f_mm_bev
    coords, (a, b) = align([stack, f_mm_bev], bev.extents)
    return sp.SparseTensor(coords, ad.concat([a, b]), tuple(bev.extents))
