"""BundleTrac: tracing tightly packed, roughly parallel filaments.

The bundle runs along +Y.  Its local direction is estimated by
cross-correlating XZ cross-sections ``slice_stride`` slices apart; the
map is then averaged along that direction, and each filament is followed
from a user seed by maximizing a hexagonal seven-peak template response
in successive cross-sections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .phantom import FilamentTrace
from .volgrid import VoxelGrid, gaussian_blur

__all__ = [
    "BundleAxisField",
    "HexKernel",
    "BundleConfig",
    "estimate_shift",
    "detect_bundle_axis",
    "longitudinal_average",
    "seven_peak_response",
    "estimate_orientation",
    "trace_bundle",
    "run_bundletrac",
]


@dataclass
class BundleAxisField:
    """Bundle direction sampled at Y positions, linearly interpolated in between."""

    samples: List[Tuple[float, np.ndarray]]

    def __post_init__(self):
        if not self.samples:
            raise ValueError("axis field needs at least one sample")
        self.samples = sorted(((float(y), _unit(d)) for y, d in self.samples), key=lambda s: s[0])

    @classmethod
    def parallel(cls) -> "BundleAxisField":
        return cls([(0.0, np.array([0.0, 1.0, 0.0]))])

    def direction_at(self, y) -> np.ndarray:
        """Unit direction(s) at ``y`` (scalar or array), clamped at the ends."""
        ys = np.array([s[0] for s in self.samples])
        ds = np.array([s[1] for s in self.samples])
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        out = np.stack([np.interp(y, ys, ds[:, d]) for d in range(3)], axis=-1)
        out /= np.linalg.norm(out, axis=-1, keepdims=True)
        return out


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0 or v[1] <= 0:
        raise ValueError("bundle direction must have positive Y component")
    return v / n


@dataclass
class HexKernel:
    """Seven Gaussian peaks: one at the centre, six on a hexagon of radius ``spacing``.

    ``sigma`` defaults to ``spacing / 6`` so that each peak's window
    (truncated at ``3 sigma``) stays inside half the lattice spacing.
    Wider windows reach into neighbouring filaments and pull edge
    filaments of a bundle towards its centre.
    """

    spacing: float
    sigma: Optional[float] = None
    orientation: float = 0.0
    mode: str = "seven"

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = self.spacing / 6.0
        if not self.spacing > 0 or not self.sigma > 0:
            raise ValueError("spacing and sigma must be positive")
        if self.mode not in ("seven", "one"):
            raise ValueError("mode must be 'seven' or 'one'")

    def peak_offsets(self) -> np.ndarray:
        if self.mode == "one":
            return np.zeros((1, 2))
        ang = self.orientation + np.arange(6) * math.pi / 3
        ring = self.spacing * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return np.vstack([np.zeros((1, 2)), ring])


@dataclass
class BundleConfig:
    slice_stride: int = 55
    slab: int = 5
    half_window: int = 15
    marker_interval: int = 15
    search_radius: float = 2.0
    search_step: float = 0.25
    spacing: float = 13.0
    sigma: Optional[float] = None
    orientation: Optional[float] = None
    mode: str = "seven"
    average: bool = True
    pre_gauss: Optional[float] = None
    max_shift: Optional[float] = None

    def shift_bound(self) -> float:
        """Correlation search bound; defaults to just under half the spacing."""
        if self.max_shift is not None:
            return float(self.max_shift)
        return math.floor(0.5 * self.spacing - 1e-9)


# --------------------------------------------------------------------------
# bundle axis


def _parabolic(c_m, c_0, c_p):
    den = c_m - 2 * c_0 + c_p
    # neighbours equal up to FFT round-off: symmetric peak
    if den >= 0 or abs(c_m - c_p) <= 1e-12 * abs(c_0):
        return 0.0
    off = 0.5 * (c_m - c_p) / den
    return float(np.clip(off, -0.5, 0.5))


def estimate_shift(a: np.ndarray, b: np.ndarray, subpixel: bool = True,
                   max_shift: Optional[float] = None) -> np.ndarray:
    """Translation ``s`` with ``b(x) ~ a(x - s)`` from the circular cross-correlation peak.

    Parameters
    ----------
    a, b : ndarray
        2D sections of equal shape.
    subpixel : bool
        Refine the integer peak with a 3-point parabola along each axis.
    max_shift : float, optional
        Only peaks with every component ``|s_i| <= max_shift`` are
        considered.  A packed bundle correlates with itself at every
        lattice translation, so the search must stay below half the
        filament spacing.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fa = sfft.fft2(a - a.mean())
    fb = sfft.fft2(b - b.mean())
    corr = sfft.ifft2(np.conj(fa) * fb).real
    search = corr
    if max_shift is not None:
        lag = [np.minimum(np.arange(n), n - np.arange(n)) for n in corr.shape]
        allowed = (lag[0][:, None] <= max_shift) & (lag[1][None, :] <= max_shift)
        search = np.where(allowed, corr, -np.inf)
    peak = np.unravel_index(int(np.argmax(search)), corr.shape)
    shift = np.array(peak, dtype=np.float64)
    if subpixel:
        for d in range(2):
            n = corr.shape[d]
            idx_m = list(peak)
            idx_p = list(peak)
            idx_m[d] = (peak[d] - 1) % n
            idx_p[d] = (peak[d] + 1) % n
            shift[d] += _parabolic(corr[tuple(idx_m)], corr[peak], corr[tuple(idx_p)])
    for d in range(2):
        n = corr.shape[d]
        if shift[d] > n / 2:
            shift[d] -= n
    return shift


def detect_bundle_axis(grid: VoxelGrid, slice_stride: int = 55, slab: int = 5,
                       max_shift: Optional[float] = None) -> BundleAxisField:
    """Bundle direction from XZ cross-sections ``slice_stride`` slices apart.

    Each cross-section is the mean of ``slab`` consecutive slices;
    ``max_shift`` bounds the correlation search (see :func:`estimate_shift`).

    Raises
    ------
    ValueError
        If the grid has fewer than ``2 * slice_stride`` slices.
    """
    data = grid.data
    ny = data.shape[1]
    if ny < 2 * slice_stride:
        raise ValueError(f"need at least {2 * slice_stride} slices along Y, got {ny}")
    h = slab // 2
    centers = list(range(h, ny - (slab - h) + 1, slice_stride))
    sections = [data[:, c - h : c - h + slab, :].mean(axis=1) for c in centers]
    samples = []
    for k in range(len(centers) - 1):
        dx, dz = estimate_shift(sections[k], sections[k + 1], max_shift=max_shift)
        samples.append(((centers[k] + centers[k + 1]) / 2.0, np.array([dx, float(slice_stride), dz])))
    return BundleAxisField(samples)


def longitudinal_average(grid: VoxelGrid, axis_field: BundleAxisField, half_window: int = 15) -> VoxelGrid:
    """Mean of each voxel with its neighbours at +-1..half_window slices along the bundle.

    Off-slice samples are trilinear; samples falling outside the grid are
    left out of the mean.
    """
    data = grid.data
    nx, ny, nz = data.shape
    dirs = axis_field.direction_at(np.arange(ny))
    vx = dirs[:, 0] / dirs[:, 1]
    vz = dirs[:, 2] / dirs[:, 1]
    ii, jj, kk = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64),
                             np.arange(nz, dtype=np.float64), indexing="ij", sparse=True)
    total = np.array(data, dtype=np.float64)
    count = np.ones(data.shape)
    eps = 1e-9
    for t in range(-half_window, half_window + 1):
        if t == 0:
            continue
        x = ii + t * vx[None, :, None]
        y = np.broadcast_to(jj + t, (1, ny, 1))
        z = kk + t * vz[None, :, None]
        x, y, z = np.broadcast_arrays(x, y, z)
        ok = ((x >= -eps) & (x <= nx - 1 + eps) & (y >= 0) & (y <= ny - 1)
              & (z >= -eps) & (z <= nz - 1 + eps))
        vals = ndimage.map_coordinates(data, [x, y, z], order=1, mode="nearest")
        total += np.where(ok, vals, 0.0)
        count += ok
    return grid.with_data(total / count)


# --------------------------------------------------------------------------
# template response


def _responses(section: np.ndarray, kernel: HexKernel, centers: np.ndarray) -> np.ndarray:
    """Template response at many 2D centres (rows of ``centers``)."""
    sec = np.asarray(section, dtype=np.float64)
    n0, n1 = sec.shape
    sig = kernel.sigma
    rad = 3.0 * sig
    w = int(math.ceil(rad)) + 1
    offs = np.arange(-w, w + 1)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    peaks = (centers[:, None, :] + kernel.peak_offsets()[None]).reshape(-1, 2)
    base = np.floor(peaks).astype(np.int64)
    qx = base[:, 0, None, None] + offs[None, :, None]
    qz = base[:, 1, None, None] + offs[None, None, :]
    dx = qx - peaks[:, 0, None, None]
    dz = qz - peaks[:, 1, None, None]
    r2 = dx**2 + dz**2
    inside = (qx >= 0) & (qx < n0) & (qz >= 0) & (qz < n1) & (r2 <= rad * rad)
    vals = sec[np.clip(qx, 0, n0 - 1), np.clip(qz, 0, n1 - 1)]
    contrib = np.where(inside, np.exp(-r2 / (2 * sig * sig)) * vals, 0.0).sum(axis=(1, 2))
    return contrib.reshape(len(centers), -1).sum(axis=1)


def seven_peak_response(section, kernel: HexKernel, center) -> float:
    """Sum over the template peaks of Gaussian-weighted local density.

    Each peak weighs pixels within ``3 sigma`` by ``exp(-r^2 / 2 sigma^2)``;
    pixels outside the section are dropped.
    """
    return float(_responses(section, kernel, np.asarray(center, dtype=np.float64)[None])[0])


def estimate_orientation(points_xz, spacing: float, tolerance: float = 0.3) -> Optional[float]:
    """Hexagon rotation (radians, in [0, pi/3)) from pairs of lattice neighbours.

    Uses the circular mean of ``6 * theta`` over neighbour vectors whose
    length is within ``tolerance * spacing`` of ``spacing``.  ``None`` when
    fewer than three points or no neighbour pairs exist.
    """
    pts = np.asarray(points_xz, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        return None
    angs = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = pts[j] - pts[i]
            r = math.hypot(*d)
            if abs(r - spacing) <= tolerance * spacing:
                angs.append(math.atan2(d[1], d[0]))
    if not angs:
        return None
    angs = np.array(angs)
    m = math.atan2(np.sin(6 * angs).sum(), np.cos(6 * angs).sum()) / 6.0
    return float(m % (math.pi / 3))


def _disc_offsets(radius, step):
    n = int(math.floor(radius / step + 1e-9))
    g = np.arange(-n, n + 1) * step
    ox, oz = np.meshgrid(g, g, indexing="ij")
    keep = ox**2 + oz**2 <= radius * radius + 1e-9
    return np.stack([ox[keep], oz[keep]], axis=1)


def _best_center(section, kernel, guess, offsets):
    cands = guess[None, :] + offsets
    n0, n1 = section.shape
    ok = (cands[:, 0] >= 0) & (cands[:, 0] <= n0 - 1) & (cands[:, 1] >= 0) & (cands[:, 1] <= n1 - 1)
    if not ok.any():
        return guess
    cands = cands[ok]
    resp = _responses(section, kernel, cands)
    return cands[int(np.argmax(resp))]


def _y_schedule(y0, ny, step):
    fwd = [y0]
    while fwd[-1] < ny - 1:
        fwd.append(min(fwd[-1] + step, ny - 1))
    bwd = [y0]
    while bwd[-1] > 0:
        bwd.append(max(bwd[-1] - step, 0))
    return fwd, bwd


def trace_bundle(grid: VoxelGrid, seeds, config: Optional[BundleConfig] = None,
                 axis_field: Optional[BundleAxisField] = None,
                 errors: Optional[list] = None) -> List[FilamentTrace]:
    """Follow one filament per seed through successive cross-sections.

    ``seeds`` are voxel coordinates ``(x, y, z)``.  From each seed the
    tracer steps ``marker_interval`` slices in +Y and -Y, predicts the
    next position along the bundle axis and moves it to the best template
    response within ``search_radius`` (searched on a ``search_step``
    sub-lattice).  The seed itself is refined the same way.  Seeds
    outside the grid are skipped and reported through ``errors``.
    """
    config = config or BundleConfig()
    axis_field = axis_field or BundleAxisField.parallel()
    data = grid.data
    nx, ny, nz = data.shape
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 3)
    orient = config.orientation
    if orient is None:
        orient = estimate_orientation(seeds[:, [0, 2]], config.spacing) or 0.0
    kernel = HexKernel(config.spacing, config.sigma, orient, config.mode)
    offsets = _disc_offsets(config.search_radius, config.search_step)
    out = []
    for sid, s in enumerate(seeds):
        if np.any(s < 0) or s[0] > nx - 1 or s[1] > ny - 1 or s[2] > nz - 1:
            if errors is not None:
                errors.append((sid, "seed outside grid"))
            continue
        y0 = int(round(s[1]))
        start = _best_center(data[:, y0, :], kernel, s[[0, 2]], offsets)
        fwd, bwd = _y_schedule(y0, ny, config.marker_interval)
        markers = {y0: start}
        for sched in (fwd, bwd):
            pos = start.copy()
            for ya, yb in zip(sched[:-1], sched[1:]):
                d = axis_field.direction_at(0.5 * (ya + yb))[0]
                guess = pos + (yb - ya) * np.array([d[0], d[2]]) / d[1]
                pos = _best_center(data[:, yb, :], kernel, guess, offsets)
                markers[yb] = pos
        ys = sorted(markers)
        pts = np.array([[markers[y][0], y, markers[y][1]] for y in ys], dtype=np.float64)
        out.append(FilamentTrace(grid.to_physical(pts), sid))
    return out


def run_bundletrac(grid: VoxelGrid, seeds, config: Optional[BundleConfig] = None,
                   errors: Optional[list] = None) -> List[FilamentTrace]:
    """Optional blur, axis detection, longitudinal averaging, then tracing."""
    config = config or BundleConfig()
    work = gaussian_blur(grid, config.pre_gauss) if config.pre_gauss else grid
    field_ = detect_bundle_axis(work, config.slice_stride, config.slab, config.shift_bound())
    if config.average:
        work = longitudinal_average(work, field_, config.half_window)
    return trace_bundle(work, seeds, config, field_, errors)
