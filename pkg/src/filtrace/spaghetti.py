"""Spaghetti tracer: filaments that share one dominant direction.

Stages: normalize -> bidirectional path-density enhancement -> seeds (one
per ``l``-cube) -> forward CFS tracing -> NPD binning and threshold-bin
search -> backward screening -> collinear fusion -> isolation removal ->
forward extension -> directional traversal of filament voxels ->
redundancy pruning.

All internal geometry is in voxel indices.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dpcore import BlendMode, PyramidSpec, axis_index, enhance_map, trace_paths
from .phantom import FilamentTrace, trace_voxels
from .segments import (
    Cfs,
    angle_between,
    canonical_order,
    select_seeds,
    smooth_centerline,
    trace_cfs_axis,
)
from .volgrid import VoxelGrid, normalize_unit

__all__ = [
    "SpaghettiConfig",
    "BinPartition",
    "SpaghettiResult",
    "trace_cfs",
    "trace_cfs_line",
    "bin_index",
    "bin_cfs",
    "occupancy_localized",
    "find_threshold_bin",
    "refine_backward",
    "fuse_collinear",
    "remove_isolated",
    "extend_cfs",
    "fuse_directional",
    "prune_redundant",
    "trace_spaghetti",
    "CONNECTION_OFFSETS",
]

N_BINS = 10

# Traversal pattern for +Y (x, dy, z): one straight step, else two steps
# with at most one voxel of lateral movement per lateral axis.
CONNECTION_OFFSETS = (
    (0, 1, 0),
    (0, 2, 0), (0, 2, 1), (0, 2, -1), (1, 2, 1), (1, 2, -1), (-1, 2, -1), (1, 2, 0), (-1, 2, 0),
    (-1, 2, 1),
)


@dataclass
class SpaghettiConfig:
    l: int = 5
    axis: str = "y"
    blend: str = "multiply"
    enhance: bool = True
    collinear_angle: float = 6.0
    collinear_gap: float = 10.0
    isolation_radius: float = 20.0
    isolation_min_neighbors: int = 3
    backward_angle: float = 30.0
    extension_cap: int = 5
    overlap_fraction: float = 0.9
    occupancy_cube: int = 100
    occupancy_min_cfs: int = 10
    occupancy_fraction: float = 0.15
    threads: int = 1

    def __post_init__(self):
        self.axis = "xyz"[axis_index(self.axis)]
        self.blend = BlendMode.parse(self.blend).value
        if self.l < 1 or self.extension_cap < 1 or self.occupancy_cube < 1:
            raise ValueError("lengths must be positive")
        for name in ("collinear_angle", "backward_angle"):
            if not 0 < getattr(self, name) < 90:
                raise ValueError(f"{name} must be in (0, 90)")
        if not 0 < self.overlap_fraction <= 1 or not 0 < self.occupancy_fraction <= 1:
            raise ValueError("fractions must be in (0, 1]")


@dataclass
class BinPartition:
    bins: Dict[int, List[Cfs]]
    threshold_bin: Optional[int] = None

    def cumulative(self, b: int) -> List[Cfs]:
        out = []
        for k in range(b, N_BINS + 1):
            out.extend(self.bins[k])
        return out

    def counts(self) -> Dict[int, int]:
        return {b: len(v) for b, v in self.bins.items()}


@dataclass
class SpaghettiResult:
    traces: List[FilamentTrace]
    cfss: List[Cfs]
    threshold_bin: Optional[int]
    diagnostics: dict = field(default_factory=dict)
    enhanced: Optional[VoxelGrid] = None


# --------------------------------------------------------------------------
# CFS generation


def _data(grid):
    return grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)


def trace_cfs(grid, seeds, config: SpaghettiConfig, report: Optional[dict] = None) -> List[Cfs]:
    """One forward length-``l`` DP segment per seed; boundary seeds skipped."""
    ax = axis_index(config.axis)
    l = config.l
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 3)
    vals, ends, paths, valid = trace_cfs_axis(_data(grid), seeds, ax, l)
    out = []
    for i in np.flatnonzero(valid):
        out.append(Cfs(seeds[i], ends[i], vals[i] / (l + 1), ax, paths[i].astype(np.float64)))
    if report is not None:
        report["skipped"] = int((~valid).sum())
    return out


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def trace_cfs_line(grid, seeds, config: SpaghettiConfig) -> List[Cfs]:
    """Best straight line from each seed to its pyramid base.

    Every base voxel at lateral offsets ``(du, dv)`` in ``[-l, l]^2`` is
    joined to the seed by a line whose lateral coordinates are linear in
    the axial step and rounded to the nearest voxel.  Lines leaving the
    grid are ignored; ties go to the lexicographically smallest endpoint.
    """
    data = _data(grid)
    ax = axis_index(config.axis)
    lat = [a for a in range(3) if a != ax]
    l = config.l
    shape = data.shape
    steps = np.arange(l + 1)
    offs = np.arange(-l, l + 1)
    # lateral displacement at step s for base offset d: round(d * s / l)
    disp = _round_half_up(offs[:, None] * steps[None, :] / l)  # (2l+1, l+1)
    out = []
    for seed in np.asarray(seeds, dtype=np.int64).reshape(-1, 3):
        if not 0 <= seed[ax] + l < shape[ax]:
            continue
        a = seed[ax] + steps
        u = seed[lat[0]] + disp  # (2l+1, l+1)
        v = seed[lat[1]] + disp
        ok_u = np.all((u >= 0) & (u < shape[lat[0]]), axis=1)
        ok_v = np.all((v >= 0) & (v < shape[lat[1]]), axis=1)
        uu = np.clip(u, 0, shape[lat[0]] - 1)
        vv = np.clip(v, 0, shape[lat[1]] - 1)
        idx = [None, None, None]
        idx[ax] = np.broadcast_to(a, (2 * l + 1, 2 * l + 1, l + 1))
        idx[lat[0]] = np.broadcast_to(uu[:, None, :], (2 * l + 1, 2 * l + 1, l + 1))
        idx[lat[1]] = np.broadcast_to(vv[None, :, :], (2 * l + 1, 2 * l + 1, l + 1))
        sums = data[idx[0], idx[1], idx[2]].sum(axis=-1)
        sums[~ok_u, :] = -np.inf
        sums[:, ~ok_v] = -np.inf
        flat = int(np.argmax(sums))
        if not np.isfinite(sums.flat[flat]):
            continue
        m, n = divmod(flat, 2 * l + 1)
        pts = np.empty((l + 1, 3))
        pts[:, ax] = a
        pts[:, lat[0]] = u[m]
        pts[:, lat[1]] = v[n]
        out.append(Cfs(seed, pts[-1], sums.flat[flat] / (l + 1), ax, pts))
    return out


# --------------------------------------------------------------------------
# binning and threshold-bin search


def bin_index(npd: float) -> int:
    """Bin ``b`` holds NPD in ``[(b-1)/10, b/10)``; bin 10 is closed above."""
    return min(int(math.floor(npd * N_BINS)), N_BINS - 1) + 1


def bin_cfs(cfss: Sequence[Cfs]) -> BinPartition:
    bins = {b: [] for b in range(1, N_BINS + 1)}
    for c in cfss:
        bins[bin_index(c.npd)].append(c)
    return BinPartition(bins)


def occupancy_localized(midpoints, dims, config: SpaghettiConfig) -> bool:
    """True if enough occupancy cubes hold fewer than ``occupancy_min_cfs`` midpoints."""
    cube = np.minimum(np.asarray(dims), config.occupancy_cube)
    ncubes = -(-np.asarray(dims) // cube)
    counts = np.zeros(tuple(ncubes), dtype=np.int64)
    mids = np.asarray(midpoints, dtype=np.int64).reshape(-1, 3)
    if len(mids):
        cell = np.clip(mids // cube, 0, ncubes - 1)
        np.add.at(counts, (cell[:, 0], cell[:, 1], cell[:, 2]), 1)
    sparse = np.count_nonzero(counts < config.occupancy_min_cfs)
    return sparse >= config.occupancy_fraction * counts.size


def find_threshold_bin(partition: BinPartition, dims, config: SpaghettiConfig) -> Optional[int]:
    """Lowest bin whose cumulative CFS set is still spatially localized.

    Bins are visited from 10 down.  The first bin ``b`` whose cumulative
    set (bins ``>= b``) spreads over the volume fails the occupancy test
    and ``b + 1`` is returned (capped at 10).  If every bin passes, 1 is
    returned.  ``None`` when there are no CFSs at all.
    """
    if not any(partition.bins.values()):
        partition.threshold_bin = None
        return None
    mids = []
    chosen = 1
    for b in range(N_BINS, 0, -1):
        mids.extend(c.midpoint for c in partition.bins[b])
        if not occupancy_localized(mids, dims, config):
            chosen = min(b + 1, N_BINS)
            break
    partition.threshold_bin = chosen
    return chosen


# --------------------------------------------------------------------------
# screening


def _backward_ends(data, cfss, l):
    ends = np.empty((len(cfss), 3))
    for ax in range(3):
        sel = [i for i, c in enumerate(cfss) if c.axis == ax]
        if not sel:
            continue
        origins = _round_half_up(np.array([cfss[i].end for i in sel]))
        vals, e, _ = trace_paths(data, origins, PyramidSpec(ax, -1, l))
        for row, i in enumerate(sel):
            ends[i] = e[row] if np.isfinite(vals[row]) else np.nan
    return ends


def refine_backward(grid, cfss: Sequence[Cfs], backward_angle: float = 30.0, l: Optional[int] = None) -> List[Cfs]:
    """Keep CFSs whose backward re-trace from the end points back along the forward vector.

    The kept condition is ``angle(end - start, end - back_end) <= backward_angle``.
    """
    if not cfss:
        return []
    data = _data(grid)
    cfss = list(cfss)
    l = int(l) if l is not None else int(round(max(c.axial_extent for c in cfss)))
    back = _backward_ends(data, cfss, l)
    out = []
    for c, b in zip(cfss, back):
        if np.any(np.isnan(b)):
            continue
        if angle_between(c.end - c.start, c.end - b) <= backward_angle + 1e-9:
            out.append(c)
    return out


def _merge_chain(chain: Sequence[Cfs]) -> Cfs:
    pts = np.concatenate([c.points for c in chain])
    weights = np.array([max(c.axial_extent, 1.0) for c in chain])
    npd = float(np.dot(weights, [c.npd for c in chain]) / weights.sum())
    smooth = smooth_centerline(pts)
    return Cfs(smooth[0], smooth[-1], npd, chain[0].axis, smooth)


def _chains_from_links(n, succ, pred):
    chains = []
    for i in range(n):
        if pred[i] is None:
            chain = [i]
            while succ[chain[-1]] is not None:
                chain.append(succ[chain[-1]])
            chains.append(chain)
    return chains


def fuse_collinear(cfss: Sequence[Cfs], config: SpaghettiConfig) -> List[Cfs]:
    """Merge nearly collinear CFSs that follow each other along the axis.

    A CFS ``b`` may follow ``a`` when the axial gap from ``a``'s end to
    ``b``'s start lies in ``[0, collinear_gap]``, their directions differ
    by at most ``collinear_angle`` and the lateral offset of that gap is at
    most ``max(1, gap * tan(collinear_angle))``.  Links are accepted
    smallest gap first; merged chains are re-examined until nothing
    changes.
    """
    cur = canonical_order(cfss)
    tan_a = math.tan(math.radians(config.collinear_angle))
    while len(cur) > 1:
        ax = cur[0].axis
        lat = [a for a in range(3) if a != ax]
        starts = np.array([c.start for c in cur])
        ends = np.array([c.end for c in cur])
        radius = math.hypot(config.collinear_gap, max(1.0, config.collinear_gap * tan_a) * math.sqrt(2))
        tree = cKDTree(starts)
        cands = []
        for i, nbrs in enumerate(tree.query_ball_point(ends, radius)):
            for j in nbrs:
                if j == i or cur[j].axis != cur[i].axis:
                    continue
                d = starts[j] - ends[i]
                g = d[ax]
                if not 0 <= g <= config.collinear_gap:
                    continue
                off = float(np.linalg.norm(d[lat]))
                if off > max(1.0, g * tan_a) + 1e-9:
                    continue
                if angle_between(cur[i].direction, cur[j].direction) > config.collinear_angle + 1e-9:
                    continue
                cands.append((g, off, i, j))
        if not cands:
            break
        cands.sort()
        n = len(cur)
        succ, pred = [None] * n, [None] * n
        root = list(range(n))

        def find(x):
            while root[x] != x:
                root[x] = root[root[x]]
                x = root[x]
            return x

        merged_any = False
        for g, off, i, j in cands:
            if succ[i] is None and pred[j] is None and find(i) != find(j):
                succ[i], pred[j] = j, i
                root[find(j)] = find(i)
                merged_any = True
        if not merged_any:
            break
        nxt = []
        for chain in _chains_from_links(n, succ, pred):
            nxt.append(cur[chain[0]] if len(chain) == 1 else _merge_chain([cur[k] for k in chain]))
        cur = canonical_order(nxt)
    return cur


def remove_isolated(cfss: Sequence[Cfs], config: SpaghettiConfig) -> List[Cfs]:
    """Drop CFSs with fewer than ``isolation_min_neighbors`` other centres nearby.

    Applied until stable, so every survivor has enough surviving neighbours.
    """
    cur = list(cfss)
    while cur:
        mids = np.array([c.midpoint for c in cur], dtype=np.float64)
        tree = cKDTree(mids)
        counts = np.array([len(x) - 1 for x in tree.query_ball_point(mids, config.isolation_radius + 1e-9)])
        keep = counts >= config.isolation_min_neighbors
        if keep.all():
            break
        cur = [c for c, k in zip(cur, keep) if k]
    return cur


def extend_cfs(grid, cfss: Sequence[Cfs], threshold_npd: float, config: SpaghettiConfig) -> List[Cfs]:
    """Grow each CFS forward by length-``l`` DP segments while their NPD stays >= threshold.

    The total axial extent never exceeds ``extension_cap * l``.
    """
    data = _data(grid)
    l = config.l
    cap = config.extension_cap * l
    out = [Cfs(c.start, c.end, c.npd, c.axis, c.points.copy(), c.extended) for c in cfss]
    active = [i for i, c in enumerate(out) if c.axial_extent + l <= cap + 1e-9]
    while active:
        nxt = []
        for ax in range(3):
            sel = [i for i in active if out[i].axis == ax]
            if not sel:
                continue
            origins = _round_half_up(np.array([out[i].end for i in sel]))
            vals, ends, paths = trace_paths(data, origins, PyramidSpec(ax, 1, l), with_paths=True)
            for row, i in enumerate(sel):
                v = vals[row]
                if not np.isfinite(v) or v / (l + 1) < threshold_npd:
                    continue
                c = out[i]
                c.points = np.concatenate([c.points, paths[row, 1:].astype(np.float64)])
                c.end = paths[row, -1].astype(np.float64)
                if c.axial_extent + l <= cap + 1e-9:
                    nxt.append(i)
        active = sorted(nxt)
    return out


# --------------------------------------------------------------------------
# final assembly


def _axis_offsets(ax):
    lat = [a for a in range(3) if a != ax]
    out = []
    for dx, dy, dz in CONNECTION_OFFSETS:
        o = [0, 0, 0]
        o[ax] = dy
        o[lat[0]] = dx
        o[lat[1]] = dz
        out.append(tuple(o))
    return out


def filament_voxels(cfss: Sequence[Cfs], dims) -> np.ndarray:
    """Union of rasterized CFS centrelines as an ``(n, 3)`` index array."""
    mask = np.zeros(tuple(dims), dtype=bool)
    for c in cfss:
        vox = trace_voxels(c.points, dims)
        if len(vox):
            mask[vox[:, 0], vox[:, 1], vox[:, 2]] = True
    return np.argwhere(mask)


def fuse_directional(cfss: Sequence[Cfs], config: SpaghettiConfig, dims=None) -> List[np.ndarray]:
    """Assign filament voxels (FVs) to traces by walking along +axis.

    Walks start at the unassigned FV with the smallest axial coordinate
    (then smallest remaining indices) and repeatedly step to the first
    unassigned FV among :data:`CONNECTION_OFFSETS`.  Returns one voxel
    index array per walk; every FV lands in exactly one walk.
    """
    ax = axis_index(config.axis)
    if not cfss:
        return []
    if dims is None:
        hi = np.max([c.points.max(axis=0) for c in cfss], axis=0)
        dims = tuple(int(math.ceil(v)) + 2 for v in hi)
    fvs = filament_voxels(cfss, dims)
    if len(fvs) == 0:
        return []
    lat = [a for a in range(3) if a != ax]
    order = np.lexsort((fvs[:, lat[1]], fvs[:, lat[0]], fvs[:, ax]))
    fvs = fvs[order]
    free = set(map(tuple, fvs.tolist()))
    offsets = _axis_offsets(ax)
    walks = []
    for v in map(tuple, fvs.tolist()):
        if v not in free:
            continue
        free.discard(v)
        walk = [v]
        cur = v
        while True:
            nxt = None
            for o in offsets:
                cand = (cur[0] + o[0], cur[1] + o[1], cur[2] + o[2])
                if cand in free:
                    nxt = cand
                    break
            if nxt is None:
                break
            free.discard(nxt)
            walk.append(nxt)
            cur = nxt
        walks.append(np.array(walk, dtype=np.int64))
    return walks


def _voxelize_trace(trace) -> np.ndarray:
    if isinstance(trace, FilamentTrace):
        pts = trace.points
    else:
        pts = np.asarray(trace, dtype=np.float64).reshape(-1, 3)
    return trace_voxels(pts) if len(pts) > 1 else _round_half_up(pts)


def prune_redundant(traces, overlap_fraction: float = 0.9) -> list:
    """Remove traces sharing more than ``overlap_fraction`` of their voxels with a longer one.

    Traces are visited longest first (voxel count; ties keep input order).
    A voxel counts as shared if it lies within the one-voxel (26-neighbour)
    dilation of a single longer kept trace.  Inputs are voxel-unit
    :class:`FilamentTrace` objects or voxel index arrays; survivors are
    returned in their input order.
    """
    vox = [_voxelize_trace(t) for t in traces]
    order = sorted(range(len(vox)), key=lambda i: (-len(vox[i]), i))
    owner: Dict[tuple, set] = {}
    shifts = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
    kept = []
    for i in order:
        v = vox[i]
        hits: Dict[int, int] = {}
        for p in map(tuple, v.tolist()):
            for k in owner.get(p, ()):
                hits[k] = hits.get(k, 0) + 1
        n = max(len(v), 1)
        if any(h / n > overlap_fraction for h in hits.values()):
            continue
        kept.append(i)
        dil = (v[:, None, :] + shifts[None]).reshape(-1, 3)
        for p in set(map(tuple, dil.tolist())):
            owner.setdefault(p, set()).add(i)
    kept.sort()
    return [traces[i] for i in kept]


def trace_spaghetti(raw_grid: VoxelGrid, config: Optional[SpaghettiConfig] = None) -> SpaghettiResult:
    """Run the full dominant-direction pipeline on a raw density map."""
    config = config or SpaghettiConfig()
    ax = axis_index(config.axis)
    diag: dict = {"timings": {}}
    t0 = time.perf_counter()

    def lap(name):
        nonlocal t0
        t1 = time.perf_counter()
        diag["timings"][name] = t1 - t0
        t0 = t1

    norm = normalize_unit(raw_grid)
    work = enhance_map(norm, config.l, config.blend, ax, threads=config.threads) if config.enhance else norm
    lap("enhance")
    seeds = select_seeds(work, config.l)
    report: dict = {}
    cfss = trace_cfs(work, seeds, config, report)
    diag.update(seeds=len(seeds), cfs=len(cfss), skipped=report["skipped"])
    lap("cfs")
    part = bin_cfs(cfss)
    tb = find_threshold_bin(part, raw_grid.dims, config)
    diag["bin_counts"] = part.counts()
    diag["threshold_bin"] = tb
    if tb is None:
        return SpaghettiResult([], [], None, diag, work)
    cfss = part.cumulative(tb)
    diag["above_threshold"] = len(cfss)
    cfss = refine_backward(work, cfss, config.backward_angle, config.l)
    diag["after_backward"] = len(cfss)
    cfss = fuse_collinear(cfss, config)
    diag["after_collinear"] = len(cfss)
    cfss = remove_isolated(cfss, config)
    diag["after_isolation"] = len(cfss)
    cfss = extend_cfs(work, cfss, (tb - 1) / N_BINS, config)
    lap("screen")
    walks = fuse_directional(cfss, config, raw_grid.dims)
    diag["walks"] = len(walks)
    walks = prune_redundant(walks, config.overlap_fraction)
    walks = [w for w in walks if len(w) >= 2]
    diag["traces"] = len(walks)
    traces = [FilamentTrace(raw_grid.to_physical(w), i) for i, w in enumerate(walks)]
    lap("assemble")
    return SpaghettiResult(traces, cfss, tb, diag, work)
