"""Candidate filament segments (CFS) and the geometry shared by the tracers.

All coordinates in this module are voxel indices (floats allowed after
smoothing); conversion to physical units happens at the tracer boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .dpcore import PyramidSpec, trace_paths
from .volgrid import VoxelGrid

__all__ = [
    "Cfs",
    "select_seeds",
    "trace_cfs_axis",
    "smooth_centerline",
    "angle_between",
    "polyline_length",
    "canonical_order",
    "end_tangent",
]


@dataclass
class Cfs:
    """Candidate filament segment.

    ``points`` is the realized centreline from ``start`` to ``end``.
    """

    start: np.ndarray
    end: np.ndarray
    npd: float
    axis: int
    points: np.ndarray = None
    extended: bool = False

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        if self.points is None:
            self.points = np.stack([self.start, self.end])
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.npd = float(self.npd)
        self.axis = int(self.axis)

    @property
    def midpoint(self) -> np.ndarray:
        """Rounded mean of start and end."""
        return np.floor((self.start + self.end) / 2.0 + 0.5).astype(np.int64)

    @property
    def direction(self) -> np.ndarray:
        return self.end - self.start

    @property
    def axial_extent(self) -> float:
        return float(abs(self.end[self.axis] - self.start[self.axis]))

    def length(self) -> float:
        return polyline_length(self.points)

    def key(self):
        return (tuple(np.round(self.start, 9)), tuple(np.round(self.end, 9)), round(self.npd, 12), self.axis)


def polyline_length(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def angle_between(u, v, unsigned: bool = False) -> float:
    """Angle in degrees; 0 for a zero vector (treated as undirected)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    if unsigned:
        c = abs(c)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def canonical_order(cfss: Sequence[Cfs]) -> List[Cfs]:
    """Sort segments by geometry so downstream greedy steps ignore input order."""
    return sorted(cfss, key=Cfs.key)


def select_seeds(grid, cube_len: int) -> np.ndarray:
    """One seed per ``cube_len**3`` cube: its densest voxel.

    Edge cubes are truncated.  Ties go to the lexicographically smallest
    index.  Returns an ``(n, 3)`` int array in lexicographic order.
    """
    cube_len = int(cube_len)
    if cube_len < 1:
        raise ValueError("cube_len must be >= 1")
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)
    nx, ny, nz = data.shape
    bx, by, bz = (-(-n // cube_len) for n in (nx, ny, nz))
    pad = np.full((bx * cube_len, by * cube_len, bz * cube_len), -np.inf)
    pad[:nx, :ny, :nz] = data
    blocks = pad.reshape(bx, cube_len, by, cube_len, bz, cube_len).transpose(0, 2, 4, 1, 3, 5)
    flat = blocks.reshape(bx, by, bz, cube_len**3)
    arg = np.argmax(flat, axis=-1)
    di, dj, dk = np.unravel_index(arg, (cube_len,) * 3)
    ii, jj, kk = np.meshgrid(np.arange(bx), np.arange(by), np.arange(bz), indexing="ij")
    seeds = np.stack([ii * cube_len + di, jj * cube_len + dj, kk * cube_len + dk], axis=-1).reshape(-1, 3)
    order = np.lexsort(seeds.T[::-1])
    return seeds[order].astype(np.int64)


def trace_cfs_axis(data: np.ndarray, seeds, axis: int, l: int, sign: int = 1):
    """Trace one length-``l`` DP segment per seed along ``axis``.

    Returns ``(values, endpoints, paths, valid)``; ``values`` are raw path
    densities and ``valid`` flags seeds whose base slice is inside the grid.
    """
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 3)
    vals, ends, paths = trace_paths(data, seeds, PyramidSpec(axis, sign, l), with_paths=True)
    return vals, ends, paths, ~np.isnan(vals)


def _resample(points: np.ndarray, step: float = 1.0) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 0])
    points = points[keep]
    if len(points) < 2:
        return points
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(round(s[-1] / step)))
    t = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(t, s, points[:, d]) for d in range(3)], axis=1)


def _moving_average(points: np.ndarray, window: int) -> np.ndarray:
    n = len(points)
    half = window // 2
    out = np.empty_like(points)
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(points, axis=0)])
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = (csum[i + h + 1] - csum[i - h]) / (2 * h + 1)
    return out


def _rdp(points: np.ndarray, eps: float) -> np.ndarray:
    keep = np.zeros(len(points), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        a, b = stack.pop()
        if b <= a + 1:
            continue
        p0, p1 = points[a], points[b]
        d = p1 - p0
        seg = points[a + 1 : b] - p0
        nd = np.linalg.norm(d)
        if nd == 0:
            dist = np.linalg.norm(seg, axis=1)
        else:
            dist = np.linalg.norm(np.cross(seg, d / nd), axis=1)
        i = int(np.argmax(dist))
        if dist[i] >= eps:
            m = a + 1 + i
            keep[m] = True
            stack.append((a, m))
            stack.append((m, b))
    return points[keep]


def smooth_centerline(points, step: float = 1.0, window: int = 5, tolerance: float = 0.25) -> np.ndarray:
    """Resample, moving-average smooth, then drop nearly collinear points.

    The curve is resampled at ``step`` arc-length spacing, each sample is
    replaced by the mean of a centred ``window`` (shrinking near the ends
    so the endpoints stay fixed) and interior points closer than
    ``tolerance`` to the simplified polyline are removed.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    res = _resample(pts, step)
    if len(res) < 3:
        return res
    sm = _moving_average(res, window)
    return _rdp(sm, tolerance)


def end_tangent(points: np.ndarray, at_end: bool, reach: float = 5.0) -> np.ndarray:
    """Unit outward tangent at one end, from the point ``reach`` back along the curve."""
    pts = points if at_end else points[::-1]
    tip = pts[-1]
    acc = 0.0
    ref = pts[0]
    for i in range(len(pts) - 1, 0, -1):
        acc += float(np.linalg.norm(pts[i] - pts[i - 1]))
        if acc >= reach:
            ref = pts[i - 1]
            break
    v = tip - ref
    n = np.linalg.norm(v)
    return v / n if n > 0 else v
