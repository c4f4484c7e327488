"""Struwwel tracer: randomly oriented, curved filaments.

Stages: normalize -> seeds on an ``l/2`` lattice -> one CFS per seed from
the best of three forward Cartesian pyramids -> backward screening ->
pruning map -> NPD threshold -> proximity fusion -> one-time extension
fusion.

Fusion works on segment *ends*.  Each end has a position and an outward
unit tangent.  Two ends ``(e_a, t_a)`` and ``(e_b, t_b)`` may be joined
when

* the tangents are anti-parallel within ``ang`` degrees,
* ``|e_b - e_a| <= gap``,
* seen from either end, the other end lies ahead inside the ``ang``
  cone (lateral offset at most ``max(2, s * tan(ang))`` for along-axis
  distance ``s``) or, for overlapping segments, behind it but within
  2 voxels of the line.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .dpcore import PyramidSpec, trace_paths
from .phantom import FilamentTrace, trace_voxels
from .segments import Cfs, angle_between, canonical_order, end_tangent, select_seeds, smooth_centerline
from .volgrid import VoxelGrid, normalize_unit

__all__ = [
    "StruwwelConfig",
    "StruwwelResult",
    "generate_cfs_multiaxis",
    "refine_backward_multiaxis",
    "build_pruning_map",
    "segment_by_threshold",
    "fuse_proximity",
    "fuse_by_extension",
    "suggest_threshold",
    "npd_percentiles",
    "trace_struwwel",
    "LATERAL_TOLERANCE",
]

LATERAL_TOLERANCE = 2.0


@dataclass
class StruwwelConfig:
    """Tracer parameters.

    ``thr = None`` picks the NPD threshold automatically with
    :func:`suggest_threshold` at ``auto_k`` robust standard deviations.
    """

    thr: Optional[float]
    l: int = 10
    seed_spacing: Optional[int] = None
    backward_angle: float = 20.0
    gap: float = 10.0
    ang: float = 30.0
    threads: int = 1
    auto_k: float = 3.0

    def __post_init__(self):
        if self.thr is not None and not 0.0 <= float(self.thr) <= 1.0:
            raise ValueError("thr must be in [0, 1]")
        if self.l < 1:
            raise ValueError("l must be >= 1")
        if self.seed_spacing is None:
            self.seed_spacing = max(1, self.l // 2)
        if self.seed_spacing < 1 or self.gap <= 0 or not 0 < self.ang < 180 or self.backward_angle <= 0:
            raise ValueError("invalid fusion/seed parameters")


@dataclass
class StruwwelResult:
    pruning_map: VoxelGrid
    filaments: List[FilamentTrace]
    cfss: List[Cfs] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    screened: List[Cfs] = field(default_factory=list)


def _data(grid):
    return grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)


def _trace_chunked(data, seeds, pyramid, threads):
    """``trace_paths`` over seed chunks, optionally on a thread pool.

    Each seed is traced independently, so the split does not change
    the result.
    """
    threads = max(1, int(threads))
    if threads == 1 or len(seeds) < 2 * threads:
        return trace_paths(data, seeds, pyramid, with_paths=True)
    chunks = np.array_split(np.arange(len(seeds)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda idx: trace_paths(data, seeds[idx], pyramid, with_paths=True), chunks))
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))


def generate_cfs_multiaxis(grid, seeds, l: int = 10, threads: int = 1) -> List[Cfs]:
    """Best forward CFS over the +X, +Y and +Z pyramids for every seed.

    Ties go to the lower axis (X < Y < Z).  Seeds with no in-grid base
    on any axis are skipped.
    """
    data = _data(grid)
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 3)
    if len(seeds) == 0:
        return []
    vals, ends, paths = [], [], []
    for ax in range(3):
        v, e, p = _trace_chunked(data, seeds, PyramidSpec(ax, 1, l), threads)
        vals.append(np.where(np.isnan(v), -np.inf, v))
        ends.append(e)
        paths.append(p)
    vals = np.stack(vals)
    best = np.argmax(vals, axis=0)
    out = []
    for i in range(len(seeds)):
        a = int(best[i])
        v = vals[a, i]
        if not np.isfinite(v):
            continue
        out.append(Cfs(seeds[i], ends[a][i], v / (l + 1), a, paths[a][i].astype(np.float64)))
    return out


def refine_backward_multiaxis(grid, cfss: Sequence[Cfs], backward_angle: float = 20.0,
                              l: Optional[int] = None) -> List[Cfs]:
    """Keep CFSs whose backward re-trace from the end returns towards the start.

    The angle is measured at the end vertex between ``start - end`` and
    ``back_end - end``; a re-trace landing on the start gives 0.
    """
    if not cfss:
        return []
    data = _data(grid)
    cfss = list(cfss)
    out_keep = np.zeros(len(cfss), dtype=bool)
    for ax in range(3):
        sel = [i for i, c in enumerate(cfss) if c.axis == ax]
        if not sel:
            continue
        length = int(l) if l is not None else int(round(cfss[sel[0]].axial_extent))
        origins = np.floor(np.array([cfss[i].end for i in sel]) + 0.5).astype(np.int64)
        vals, back, _ = trace_paths(data, origins, PyramidSpec(ax, -1, length))
        for row, i in enumerate(sel):
            if not np.isfinite(vals[row]):
                continue
            c = cfss[i]
            if angle_between(c.start - c.end, back[row] - c.end) <= backward_angle + 1e-9:
                out_keep[i] = True
    return [c for c, k in zip(cfss, out_keep) if k]


def build_pruning_map(dims, cfss: Sequence[Cfs], spacing: float = 1.0, origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    """Grid holding, near each CFS path (Chebyshev distance 1), that CFS's NPD.

    Where tubes overlap the highest NPD wins.
    """
    dims = tuple(int(n) for n in dims)
    out = np.zeros(dims)
    shifts = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
    for c in cfss:
        vox = trace_voxels(c.points, None)
        tube = (vox[:, None, :] + shifts[None]).reshape(-1, 3)
        inside = np.all((tube >= 0) & (tube < np.asarray(dims)), axis=1)
        tube = tube[inside]
        if len(tube):
            np.maximum.at(out, (tube[:, 0], tube[:, 1], tube[:, 2]), c.npd)
    return VoxelGrid(out, spacing, origin)


def segment_by_threshold(cfss: Sequence[Cfs], thr: float) -> List[Cfs]:
    """CFSs with NPD >= thr (inclusive)."""
    return [c for c in cfss if c.npd >= thr]


def suggest_threshold(cfss: Sequence[Cfs], k: float = 3.0) -> float:
    """Robust outlier threshold on the NPD distribution.

    Most CFSs start from seeds in background noise, so the bulk of the
    NPD values describes noise.  Filament segments are the upper
    outliers: ``thr = median + k * 1.4826 * MAD``, clipped to [0, 1].
    Returns 0 for an empty list.
    """
    npd = np.array([c.npd for c in cfss], dtype=np.float64)
    if len(npd) == 0:
        return 0.0
    med = float(np.median(npd))
    mad = 1.4826 * float(np.median(np.abs(npd - med)))
    return float(np.clip(med + k * mad, 0.0, 1.0))


def npd_percentiles(cfss: Sequence[Cfs], percentiles=(0.5, 0.75, 0.9, 0.95, 0.99)) -> dict:
    """Nearest-rank NPD percentiles (fractions in [0, 1])."""
    npd = np.sort([c.npd for c in cfss])
    out = {}
    for p in percentiles:
        rank = max(1, math.ceil(p * len(npd)))
        out[p] = float(npd[rank - 1]) if len(npd) else float("nan")
    return out


# --------------------------------------------------------------------------
# fusion


def _ends(c: Cfs):
    """((position, outward tangent) at the start, same at the end)."""
    return ((c.points[0], end_tangent(c.points, at_end=False)),
            (c.points[-1], end_tangent(c.points, at_end=True)))


def _one_sided(e_a, t_a, e_b, tan_ang):
    d = e_b - e_a
    s = float(np.dot(d, t_a))
    lat = float(np.linalg.norm(d - s * t_a))
    if s >= 0:
        return lat <= max(LATERAL_TOLERANCE, s * tan_ang) + 1e-9
    return lat <= LATERAL_TOLERANCE + 1e-9


def _join_key(e_a, t_a, e_b, t_b, ang, gap):
    """Sort key for a valid join, or ``None``."""
    if angle_between(t_a, -t_b) > ang + 1e-9:
        return None
    d = e_b - e_a
    dist = float(np.linalg.norm(d))
    if dist > gap + 1e-9:
        return None
    tan_ang = math.tan(math.radians(min(ang, 89.0)))
    if not (_one_sided(e_a, t_a, e_b, tan_ang) and _one_sided(e_b, t_b, e_a, tan_ang)):
        return None
    ahead = float(np.dot(d, t_a)) >= 0
    return (dist if ahead else 0.0, dist)


class _DSU:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, x):
        while self.p[x] != x:
            self.p[x] = self.p[self.p[x]]
            x = self.p[x]
        return x

    def union(self, a, b):
        self.p[self.find(b)] = self.find(a)


def _greedy_links(cands, n):
    """Accept candidate links (key, (i, si), (j, sj), conn) smallest key first."""
    cands.sort(key=lambda c: (c[0], c[1], c[2]))
    used = set()
    dsu = _DSU(n)
    links = {}
    for key, ea, eb, conn in cands:
        if ea in used or eb in used or dsu.find(ea[0]) == dsu.find(eb[0]):
            continue
        used.add(ea)
        used.add(eb)
        dsu.union(ea[0], eb[0])
        links[ea] = (eb, conn)
        links[eb] = (ea, None if conn is None else conn[::-1])
    return links


def _append_trimmed(acc: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Append ``nxt`` keeping only points beyond the current end."""
    t = end_tangent(acc, at_end=True)
    ahead = (nxt - acc[-1]) @ t > 0
    if not ahead.any():
        return acc
    first = int(np.argmax(ahead))
    return np.vstack([acc, nxt[first:]])


def _assemble(cfss: List[Cfs], links, mark_extended=False) -> List[Cfs]:
    n = len(cfss)
    seen = [False] * n
    out = []

    def walk(i, free_side):
        chain = []
        cur, entry = i, free_side
        while True:
            seen[cur] = True
            exit_side = 1 - entry
            pts = cfss[cur].points if entry == 0 else cfss[cur].points[::-1]
            chain.append((cur, pts))
            nxt = links.get((cur, exit_side))
            if nxt is None:
                break
            (j, sj), conn = nxt
            if seen[j]:
                break
            chain.append((None, conn))
            cur, entry = j, sj
        return chain

    orders = [i for i in range(n) if (i, 0) not in links or (i, 1) not in links]
    chains = []
    for i in orders:
        if seen[i]:
            continue
        free_side = 0 if (i, 0) not in links else 1
        chains.append(walk(i, free_side))
    for i in range(n):  # cycles cannot form, but be safe
        if not seen[i]:
            chains.append(walk(i, 0))

    for chain in chains:
        members = [k for k, _ in chain if k is not None]
        if len(members) == 1:
            c = cfss[members[0]]
            out.append(Cfs(c.start, c.end, c.npd, c.axis, c.points, c.extended or mark_extended))
            continue
        acc = chain[0][1]
        for _, pts in chain[1:]:
            if pts is None or len(pts) == 0:
                continue
            acc = _append_trimmed(acc, pts)
        w = np.array([max(cfss[k].length(), 1.0) for k in members])
        npd = float(np.dot(w, [cfss[k].npd for k in members]) / w.sum())
        sm = smooth_centerline(acc)
        axis = int(np.argmax(np.abs(sm[-1] - sm[0])))
        out.append(Cfs(sm[0], sm[-1], npd, axis, sm, mark_extended or any(cfss[k].extended for k in members)))
    return out


def _end_table(cfss):
    pos, tan, ids = [], [], []
    for i, c in enumerate(cfss):
        for side, (e, t) in enumerate(_ends(c)):
            pos.append(e)
            tan.append(t)
            ids.append((i, side))
    return np.array(pos).reshape(-1, 3), np.array(tan).reshape(-1, 3), ids


def fuse_proximity(cfss: Sequence[Cfs], ang: float = 30.0, gap: float = 10.0) -> List[Cfs]:
    """Join CFS ends meeting the angle and gap tolerances, smallest gap first, to a fixpoint."""
    cur = canonical_order(cfss)
    while len(cur) > 1:
        pos, tan, ids = _end_table(cur)
        tree = cKDTree(pos)
        cands = []
        for a, b in sorted(tree.query_pairs(gap + 1e-9)):
            if ids[a][0] == ids[b][0]:
                continue
            key = _join_key(pos[a], tan[a], pos[b], tan[b], ang, gap)
            if key is not None:
                cands.append((key, ids[a], ids[b], None))
        if not cands:
            break
        links = _greedy_links(cands, len(cur))
        cur = canonical_order(_assemble(cur, links))
    return cur


def fuse_by_extension(grid, cfss: Sequence[Cfs], config: StruwwelConfig) -> List[Cfs]:
    """Extend every not-yet-extended end once by a length-``l`` DP segment and fuse on contact.

    The extension runs along the dominant axis of the outward end tangent.
    An extension is kept only as the connector of a fusion it enables.
    Every returned segment is flagged ``extended`` so a second call does
    nothing.
    """
    data = _data(grid)
    cur = canonical_order(cfss)
    if not cur:
        return []
    pos, tan, ids = _end_table(cur)
    dims = np.asarray(data.shape)
    ext = {}
    todo = [[] for _ in range(6)]
    for k, (i, side) in enumerate(ids):
        if cur[i].extended:
            continue
        t = tan[k]
        if not np.any(t):
            continue
        ax = int(np.argmax(np.abs(t)))
        sign = 1 if t[ax] > 0 else -1
        o = np.floor(pos[k] + 0.5).astype(np.int64)
        if np.any(o < 0) or np.any(o >= dims):
            continue
        todo[2 * ax + (sign < 0)].append((k, o))
    for slot, items in enumerate(todo):
        if not items:
            continue
        ax, sign = slot // 2, (1 if slot % 2 == 0 else -1)
        origins = np.array([o for _, o in items])
        vals, ends, paths = trace_paths(data, origins, PyramidSpec(ax, sign, config.l), with_paths=True)
        for row, (k, _) in enumerate(items):
            if np.isfinite(vals[row]):
                ext[k] = paths[row].astype(np.float64)

    tree = cKDTree(pos)
    cands = []
    reach = config.gap + config.l * math.sqrt(3) + 1e-9
    for k, path in ext.items():
        e_new = path[-1]
        t_new = e_new - pos[k]
        nrm = np.linalg.norm(t_new)
        t_new = t_new / nrm if nrm > 0 else tan[k]
        for m in tree.query_ball_point(pos[k], reach):
            if ids[m][0] == ids[k][0]:
                continue
            key = _join_key(e_new, t_new, pos[m], tan[m], config.ang, config.gap)
            if key is not None:
                cands.append((key, ids[k], ids[m], path[1:]))
    links = _greedy_links(cands, len(cur)) if cands else {}
    return canonical_order(_assemble(cur, links, mark_extended=True))


# --------------------------------------------------------------------------


def trace_struwwel(raw_grid: VoxelGrid, config: StruwwelConfig) -> StruwwelResult:
    """Run the multi-directional pipeline; the pruning map is always produced."""
    diag: dict = {"timings": {}}
    t0 = time.perf_counter()
    norm = normalize_unit(raw_grid)
    seeds = select_seeds(norm, config.seed_spacing)
    cfss = generate_cfs_multiaxis(norm, seeds, config.l, config.threads)
    diag.update(seeds=len(seeds), cfs=len(cfss))
    cfss = refine_backward_multiaxis(norm, cfss, config.backward_angle, config.l)
    diag["after_backward"] = len(cfss)
    diag["timings"]["cfs"] = time.perf_counter() - t0
    pmap = build_pruning_map(raw_grid.dims, cfss, raw_grid.spacing, raw_grid.origin)
    thr = config.thr if config.thr is not None else suggest_threshold(cfss, config.auto_k)
    diag["thr"] = float(thr)
    kept = segment_by_threshold(cfss, thr)
    diag["after_threshold"] = len(kept)
    fused = fuse_proximity(kept, config.ang, config.gap)
    diag["after_proximity"] = len(fused)
    fused = fuse_by_extension(norm, fused, config)
    diag["after_extension"] = len(fused)
    diag["timings"]["total"] = time.perf_counter() - t0
    traces = [FilamentTrace(raw_grid.to_physical(c.points), i) for i, c in enumerate(fused)]
    return StruwwelResult(pmap, traces, fused, diag, cfss)
