"""Pyramidal path-density dynamic programming.

A path of length ``l`` starts at an origin voxel and advances one slice
per step along a Cartesian axis (forward ``+`` or backward ``-``), moving
at most one voxel in each lateral direction per step.  Such a path can
never leave the 45 degree search pyramid whose apex is the origin, so the
pyramid restriction comes for free from the step rule.  The path density
(PD) of a path is the sum of the voxel densities it visits, origin
included; the directional path density (FPD/BPD) is the largest PD over
all paths ending on the pyramid base ``l`` slices away.

Two evaluation routes are provided:

* :func:`trace_paths` runs the forward recursion from a batch of origins
  and can recover the arg-max endpoint and the realized path;
* :func:`path_density_map` computes the same maxima for every voxel at
  once by running the recursion backwards from the base slices.

Out-of-grid voxels never contribute.  All ties are resolved towards the
lexicographically smallest ``(i, j, k)``.
"""

from __future__ import annotations

import enum
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .volgrid import VoxelGrid

__all__ = [
    "AXES",
    "BlendMode",
    "PyramidSpec",
    "PathDensityResult",
    "NotTraceable",
    "axis_index",
    "path_density",
    "brute_force_path_density",
    "trace_paths",
    "path_density_map",
    "blend",
    "enhance_map",
]

AXES = ("x", "y", "z")
BRUTE_FORCE_MAX_LENGTH = 6
_BATCH_CELLS = 4_000_000


def axis_index(axis) -> int:
    if isinstance(axis, str):
        key = axis.strip().lower()
        if key not in AXES:
            raise ValueError(f"unknown axis {axis!r}")
        return AXES.index(key)
    idx = int(axis)
    if idx not in (0, 1, 2):
        raise ValueError(f"unknown axis {axis!r}")
    return idx


class BlendMode(str, enum.Enum):
    MULTIPLY = "multiply"
    ADD = "add"
    GEOMETRIC_MEAN = "geometric_mean"
    MINIMUM = "minimum"

    @classmethod
    def parse(cls, value) -> "BlendMode":
        if isinstance(value, cls):
            return value
        aliases = {"mul": "multiply", "geomean": "geometric_mean", "sqrt": "geometric_mean",
                   "min": "minimum", "sum": "add"}
        key = str(value).strip().lower()
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class PyramidSpec:
    axis: int = 1
    sign: int = 1
    length: int = 5

    def __post_init__(self):
        object.__setattr__(self, "axis", axis_index(self.axis))
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if int(self.length) < 1:
            raise ValueError("pyramid length must be >= 1")
        object.__setattr__(self, "length", int(self.length))

    def reversed(self) -> "PyramidSpec":
        return PyramidSpec(self.axis, -self.sign, self.length)


@dataclass(frozen=True)
class PathDensityResult:
    value: float
    endpoint: tuple
    path: Optional[np.ndarray] = None


class NotTraceable(Exception):
    """The pyramid base slice lies entirely outside the grid."""


def _lateral_axes(axis: int):
    return [a for a in range(3) if a != axis]


def trace_paths(data: np.ndarray, origins, pyramid: PyramidSpec, with_paths: bool = False):
    """Forward recursion from a batch of origins.

    Parameters
    ----------
    data : ndarray, shape (nx, ny, nz)
    origins : int array, shape (n, 3)
    pyramid : PyramidSpec
    with_paths : bool
        Also backtrack the realized arg-max paths.

    Returns
    -------
    values : float array (n,)
        Maximum path density on the base; ``nan`` where the base slice
        is outside the grid.
    endpoints : int array (n, 3)
    paths : int array (n, l + 1, 3) or None
        Voxels from origin to endpoint.
    """
    data = np.asarray(data, dtype=np.float64)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.int64))
    n = origins.shape[0]
    l = pyramid.length
    ax = pyramid.axis
    lat = _lateral_axes(ax)
    values = np.full(n, np.nan)
    endpoints = np.zeros((n, 3), dtype=np.int64)
    paths = np.zeros((n, l + 1, 3), dtype=np.int64) if with_paths else None
    if n == 0:
        return values, endpoints, paths
    if np.any(origins < 0) or np.any(origins >= np.asarray(data.shape)):
        raise IndexError("origin outside grid")

    # Axial axis first, lateral axes in their original (lexicographic) order.
    vol = np.transpose(data, [ax] + lat)
    na, nu, nv = vol.shape
    padded = np.full((na, nu + 2 * l, nv + 2 * l), -np.inf)
    padded[:, l : l + nu, l : l + nv] = vol

    o_a = origins[:, ax]
    o_u = origins[:, lat[0]]
    o_v = origins[:, lat[1]]
    base_a = o_a + pyramid.sign * l
    ok = (base_a >= 0) & (base_a < na)

    width = 2 * l + 1
    per_origin = sum((2 * s + 1) ** 2 for s in range(l + 1)) * 10
    batch = max(1, _BATCH_CELLS // per_origin)
    idx_ok = np.nonzero(ok)[0]
    for start in range(0, idx_ok.size, batch):
        sel = idx_ok[start : start + batch]
        b = sel.size
        pd_prev = vol[o_a[sel], o_u[sel], o_v[sel]].reshape(b, 1, 1)
        choices = []
        for s in range(1, l + 1):
            w = 2 * s + 1
            offs = np.arange(-s, s + 1)
            slab = o_a[sel] + pyramid.sign * s
            uu = (o_u[sel][:, None] + offs[None, :] + l)[:, :, None]
            vv = (o_v[sel][:, None] + offs[None, :] + l)[:, None, :]
            dens = padded[slab[:, None, None], uu, vv]
            prev_pad = np.full((b, w + 2, w + 2), -np.inf)
            prev_pad[:, 2 : w, 2 : w] = pd_prev
            cands = np.stack(
                [prev_pad[:, dm : dm + w, dn : dn + w] for dm in range(3) for dn in range(3)],
                axis=0,
            )
            best = cands.argmax(axis=0)
            pd_prev = dens + np.take_along_axis(cands, best[None], axis=0)[0]
            if with_paths:
                choices.append(best.astype(np.int8))
        flat = pd_prev.reshape(b, -1)
        arg = flat.argmax(axis=1)
        values[sel] = flat[np.arange(b), arg]
        eu, ev = np.divmod(arg, width)
        endpoints[sel, ax] = base_a[sel]
        endpoints[sel, lat[0]] = o_u[sel] + eu - l
        endpoints[sel, lat[1]] = o_v[sel] + ev - l
        if with_paths:
            # Window index t at step s is lateral offset t - s.
            tu, tv = eu.copy(), ev.copy()
            rows = np.arange(b)
            for s in range(l, 0, -1):
                paths[sel, s, ax] = o_a[sel] + pyramid.sign * s
                paths[sel, s, lat[0]] = o_u[sel] + tu - s
                paths[sel, s, lat[1]] = o_v[sel] + tv - s
                c = choices[s - 1][rows, tu, tv].astype(np.int64)
                dm, dn = np.divmod(c, 3)
                tu = tu + dm - 2
                tv = tv + dn - 2
            paths[sel, 0] = origins[sel]
    return values, endpoints, paths


def path_density(grid, origin, pyramid: PyramidSpec, with_path: bool = False) -> PathDensityResult:
    """Maximum path density from ``origin`` over the pyramid base.

    Raises
    ------
    IndexError
        If ``origin`` lies outside the grid.
    NotTraceable
        If the base slice is outside the grid.
    """
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
    vals, ends, paths = trace_paths(data, [origin], pyramid, with_paths=with_path)
    if np.isnan(vals[0]):
        raise NotTraceable(f"pyramid base outside grid for origin {tuple(origin)}")
    return PathDensityResult(
        float(vals[0]), tuple(int(v) for v in ends[0]), None if paths is None else paths[0]
    )


def brute_force_path_density(grid, origin, pyramid: PyramidSpec) -> float:
    """Enumerate every admissible path explicitly (9**l of them)."""
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
    l = pyramid.length
    if l > BRUTE_FORCE_MAX_LENGTH:
        raise ValueError(f"brute force refused for l={l} > {BRUTE_FORCE_MAX_LENGTH}")
    origin = tuple(int(v) for v in origin)
    shape = data.shape
    if any(not 0 <= c < n for c, n in zip(origin, shape)):
        raise IndexError("origin outside grid")
    ax = pyramid.axis
    lat = _lateral_axes(ax)
    if not 0 <= origin[ax] + pyramid.sign * l < shape[ax]:
        raise NotTraceable("pyramid base outside grid")

    best = -np.inf
    steps = list(itertools.product((-1, 0, 1), repeat=2))
    for moves in itertools.product(steps, repeat=l):
        pos = list(origin)
        total = data[origin]
        inside = True
        for du, dv in moves:
            pos[ax] += pyramid.sign
            pos[lat[0]] += du
            pos[lat[1]] += dv
            if not (0 <= pos[lat[0]] < shape[lat[0]] and 0 <= pos[lat[1]] < shape[lat[1]]):
                inside = False
                break
            total = total + data[tuple(pos)]
        if inside and total > best:
            best = total
    return float(best)


def _shift_max(g: np.ndarray, axis_sign: int) -> np.ndarray:
    """Max of ``g`` over the 9 next-slice neighbours, axial axis 0."""
    na, nu, nv = g.shape
    pad = np.full((na + 1, nu + 2, nv + 2), -np.inf)
    if axis_sign > 0:
        pad[:na, 1:-1, 1:-1] = g
        src = pad[1:]
    else:
        pad[1:, 1:-1, 1:-1] = g
        src = pad[:na]
    out = np.full(g.shape, -np.inf)
    for dm in range(3):
        for dn in range(3):
            np.maximum(out, src[:, dm : dm + nu, dn : dn + nv], out=out)
    return out


def _pd_map_block(vol: np.ndarray, sign: int, l: int) -> np.ndarray:
    g = vol.copy()
    for _ in range(l):
        g = vol + _shift_max(g, sign)
    return g


def path_density_map(data, pyramid: PyramidSpec, threads: int = 1) -> np.ndarray:
    """Directional path density for every voxel as origin.

    Voxels whose base slice lies outside the grid get ``nan``.  The
    volume is processed in lateral blocks (with an ``l``-voxel halo) that
    may run on several threads; results do not depend on the split.
    """
    data = data.data if isinstance(data, VoxelGrid) else np.asarray(data, dtype=np.float64)
    ax, l, sign = pyramid.axis, pyramid.length, pyramid.sign
    lat = _lateral_axes(ax)
    vol = np.transpose(data, [ax] + lat)
    na, nu, nv = vol.shape

    threads = max(1, int(threads))
    n_blocks = max(threads, int(np.ceil(vol.size * 8 * 12 / 256e6)))
    n_blocks = min(n_blocks, nu)
    edges = np.linspace(0, nu, n_blocks + 1).astype(int)

    def run(b):
        lo, hi = edges[b], edges[b + 1]
        plo, phi = max(0, lo - l), min(nu, hi + l)
        block = _pd_map_block(np.ascontiguousarray(vol[:, plo:phi]), sign, l)
        return lo, hi, block[:, lo - plo : lo - plo + (hi - lo)]

    out = np.empty(vol.shape)
    if threads == 1:
        results = map(run, range(n_blocks))
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(run, range(n_blocks))
    for lo, hi, block in results:
        out[:, lo:hi] = block
    if threads != 1:
        pool.shutdown()

    if sign > 0:
        out[max(0, na - l) :] = np.nan
    else:
        out[: min(na, l)] = np.nan
    inv = np.argsort([ax] + lat)
    return np.ascontiguousarray(np.transpose(out, inv))


def blend(fpd, bpd, mode) -> np.ndarray:
    """Combine forward and backward path densities."""
    mode = BlendMode.parse(mode)
    f = np.asarray(fpd, dtype=np.float64)
    b = np.asarray(bpd, dtype=np.float64)
    if mode is BlendMode.MULTIPLY:
        out = f * b
    elif mode is BlendMode.ADD:
        out = f + b
    elif mode is BlendMode.GEOMETRIC_MEAN:
        out = np.sqrt(f * b)
    else:
        out = np.minimum(f, b)
    return out if out.ndim else float(out)


def enhance_map(grid: VoxelGrid, l: int = 5, mode="multiply", axis="y", threads: int = 1) -> VoxelGrid:
    """Bidirectional path-density filter (CPD map), rescaled to [0, 1].

    Voxels whose forward or backward base lies outside the grid are 0.
    """
    ax = axis_index(axis)
    fpd = path_density_map(grid.data, PyramidSpec(ax, 1, l), threads=threads)
    bpd = path_density_map(grid.data, PyramidSpec(ax, -1, l), threads=threads)
    valid = ~(np.isnan(fpd) | np.isnan(bpd))
    cpd = np.zeros(grid.dims)
    cpd[valid] = blend(fpd[valid], bpd[valid], mode)
    del fpd, bpd
    lo, hi = cpd.min(), cpd.max()
    if hi > lo:
        cpd = (cpd - lo) / (hi - lo)
    else:
        cpd[:] = 0.0
    return grid.with_data(cpd)
