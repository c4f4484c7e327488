"""Phantom tomograms built from known filament traces.

Pipeline: rasterize traces -> amplify -> Gaussian volumization -> add
colour-matched noise -> mask the missing wedge in Fourier space.

Noise strength
    The noise field is scaled to unit standard deviation and multiplied
    by ``noise_level * NOISE_REFERENCE * a`` where ``a`` is the typical
    on-axis amplitude of the blurred, un-amplified filaments (the median
    over rasterized filament voxels).  ``noise_level = 1`` therefore means
    noise whose sd equals the filament amplitude.

Missing wedge geometry (beam along Z, tilt axis X by default)::

           kz
           |   masked   /
      \\    |          /      a frequency direction is kept iff its
       \\   |         /       angle from the ky axis (in the ky-kz
        \\  |        /        plane) is <= the tilt half-angle
   ------\\-+-------/------ ky
          ...

For a tilt axis Y the roles of kx and ky swap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import fft as sfft

from .volgrid import VoxelGrid, gaussian_blur

__all__ = [
    "GridSpec",
    "FilamentTrace",
    "RadialSpectrum",
    "SimulationConfig",
    "NOISE_REFERENCE",
    "DEFAULT_NOISE_ALPHA",
    "rasterize_traces",
    "trace_voxels",
    "colored_noise",
    "extract_radial_spectrum",
    "apply_missing_wedge",
    "wedge_mask",
    "signal_reference_amplitude",
    "simulate_tomogram",
]

NOISE_REFERENCE = 1.0
DEFAULT_NOISE_ALPHA = 1.5
_RASTER_STEP = 0.5


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    spacing: float = 1.0
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"invalid dims {self.dims}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def of(cls, grid: VoxelGrid) -> "GridSpec":
        return cls(grid.dims, grid.spacing, grid.origin)

    def empty(self) -> VoxelGrid:
        return VoxelGrid(np.zeros(self.dims), self.spacing, self.origin)

    def to_voxel(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / self.spacing

    def to_physical(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.float64) * self.spacing + np.asarray(self.origin)


@dataclass
class FilamentTrace:
    """Ordered centreline in physical coordinates."""

    points: np.ndarray
    id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 2:
            raise ValueError("a filament trace needs at least two points")
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
        pts = pts[keep]
        if len(pts) < 2:
            raise ValueError("a filament trace needs two distinct points")
        self.points = pts
        self.id = int(self.id)

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class RadialSpectrum:
    """Shell-averaged power; ``freq`` in cycles per voxel."""

    freq: np.ndarray
    power: np.ndarray
    counts: Optional[np.ndarray] = None


@dataclass
class SimulationConfig:
    grid: GridSpec
    fwhm: float = 5.0
    signal_amplification: float = 1.0
    noise_level: float = 0.0
    noise_spectrum: Union[float, RadialSpectrum] = DEFAULT_NOISE_ALPHA
    wedge_half_angle: float = 60.0
    wedge_axis: str = "x"
    rng_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if not 0 < self.wedge_half_angle <= 90:
            raise ValueError("wedge_half_angle must be in (0, 90]")
        if not self.fwhm > 0:
            raise ValueError("fwhm must be positive")


def _dense_samples(p0, p1, step=_RASTER_STEP):
    delta = p1 - p0
    n = max(1, int(math.ceil(np.abs(delta).max() / step)))
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return p0 + t * delta


def trace_voxels(points_vox, dims=None) -> np.ndarray:
    """Voxel indices hit by a polyline given in voxel units.

    The polyline is sampled with at most half a voxel of movement per
    axis between samples and each sample marks its nearest voxel, so
    consecutive voxels are 26-connected.  Returns unique voxels in path
    order (clipped to ``dims`` when given).
    """
    pts = np.asarray(points_vox, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 1:
        samples = pts
    else:
        samples = np.concatenate(
            [_dense_samples(pts[i], pts[i + 1])[(0 if i == 0 else 1) :] for i in range(len(pts) - 1)]
        )
    vox = np.floor(samples + 0.5).astype(np.int64)
    if dims is not None:
        inside = np.all((vox >= 0) & (vox < np.asarray(dims)), axis=1)
        vox = vox[inside]
    if len(vox) == 0:
        return vox.reshape(0, 3)
    keep = np.ones(len(vox), dtype=bool)
    keep[1:] = np.any(vox[1:] != vox[:-1], axis=1)
    vox = vox[keep]
    _, first = np.unique(vox, axis=0, return_index=True)
    return vox[np.sort(first)]


def rasterize_traces(traces: Sequence[FilamentTrace], spec: GridSpec, value: float = 1.0) -> VoxelGrid:
    """Binary-valued (times ``value``) voxel image of the traces."""
    out = np.zeros(spec.dims)
    for tr in traces:
        vox = trace_voxels(spec.to_voxel(tr.points), spec.dims)
        if len(vox):
            out[vox[:, 0], vox[:, 1], vox[:, 2]] = value
    return VoxelGrid(out, spec.spacing, spec.origin)


def _radial_index(shape, real=True):
    """Radius of each (r)FFT coefficient in frequency-voxel units."""
    n_ref = max(shape)
    freqs = [sfft.fftfreq(n) for n in shape[:-1]]
    freqs.append(sfft.rfftfreq(shape[-1]) if real else sfft.fftfreq(shape[-1]))
    fx, fy, fz = np.meshgrid(*freqs, indexing="ij", sparse=True)
    return np.sqrt(fx**2 + fy**2 + fz**2) * n_ref, n_ref


def _rfft_weights(shape):
    """Multiplicity of each rfft coefficient in the full spectrum."""
    nz = shape[-1]
    w = np.full(nz // 2 + 1, 2.0)
    w[0] = 1.0
    if nz % 2 == 0:
        w[-1] = 1.0
    return w


def extract_radial_spectrum(grid, threads: int = 1) -> RadialSpectrum:
    """Power averaged over spherical Fourier shells one frequency voxel wide.

    Shell ``r`` collects coefficients whose radius rounds to ``r``;
    radii are measured in units of ``1 / max(dims)`` cycles per voxel.
    Power is ``|F|^2 / N`` (so white noise of variance s^2 gives s^2).
    """
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)
    spec = sfft.rfftn(data, workers=threads)
    power = (spec.real**2 + spec.imag**2) / data.size
    radius, n_ref = _radial_index(data.shape)
    shell = np.floor(radius + 0.5).astype(np.int64)
    shell = np.broadcast_to(shell, power.shape)
    weights = np.broadcast_to(_rfft_weights(data.shape), power.shape)
    nbin = int(shell.max()) + 1
    wsum = np.bincount(shell.ravel(), weights=weights.ravel(), minlength=nbin)
    psum = np.bincount(shell.ravel(), weights=(power * weights).ravel(), minlength=nbin)
    with np.errstate(invalid="ignore", divide="ignore"):
        prof = np.where(wsum > 0, psum / wsum, 0.0)
    return RadialSpectrum(np.arange(nbin) / n_ref, prof, wsum)


def _target_power(radius, n_ref, spectrum):
    if isinstance(spectrum, RadialSpectrum):
        f = radius / n_ref
        return np.interp(f, spectrum.freq, spectrum.power)
    alpha = float(spectrum)
    if alpha < 0:
        raise ValueError("power-law exponent must be >= 0")
    with np.errstate(divide="ignore"):
        p = np.where(radius > 0, np.power(np.maximum(radius, 1e-12), -alpha), 0.0)
    return p


def colored_noise(spec: GridSpec, spectrum=DEFAULT_NOISE_ALPHA, rng_seed: int = 0, threads: int = 1) -> VoxelGrid:
    """Zero-mean, unit-sd noise with a prescribed radial power spectrum.

    White Gaussian noise is transformed, reduced to its phases (unit
    modulus) and reshaped by the square root of the target power, so each
    shell's realized power follows the target exactly up to one global
    scale.  ``spectrum`` is a power-law exponent ``alpha`` (P ~ k**-alpha)
    or a tabulated :class:`RadialSpectrum`.
    """
    rng = np.random.default_rng(rng_seed)
    white = rng.standard_normal(spec.dims)
    f = sfft.rfftn(white, workers=threads)
    del white
    mag = np.abs(f)
    mag[mag == 0] = 1.0
    f /= mag
    del mag
    radius, n_ref = _radial_index(spec.dims)
    f *= np.sqrt(_target_power(radius, n_ref, spectrum))
    f.flat[0] = 0.0
    noise = sfft.irfftn(f, s=spec.dims, workers=threads)
    sd = noise.std()
    if sd > 0:
        noise /= sd
    return VoxelGrid(noise, spec.spacing, spec.origin)


def _tilt_axes(wedge_axis):
    key = str(wedge_axis).lower()
    if key in ("x", "0"):
        return 1  # the in-plane axis perpendicular to the tilt axis
    if key in ("y", "1"):
        return 0
    raise ValueError("tilt axis must be 'x' or 'y' (beam is along Z)")


def wedge_mask(shape, wedge_half_angle: float, wedge_axis="x") -> np.ndarray:
    """Boolean rfft-layout mask, True where coefficients are removed."""
    perp = _tilt_axes(wedge_axis)
    fz = np.abs(sfft.rfftfreq(shape[2]))
    fp = np.abs(sfft.fftfreq(shape[perp]))
    if wedge_half_angle >= 90:
        m2 = np.zeros((fp.size, fz.size), dtype=bool)
    else:
        m2 = fz[None, :] > fp[:, None] * math.tan(math.radians(wedge_half_angle))
    if perp == 1:
        return np.broadcast_to(m2[None, :, :], (shape[0], shape[1], fz.size))
    return np.broadcast_to(m2[:, None, :], (shape[0], shape[1], fz.size))


def apply_missing_wedge(grid: VoxelGrid, wedge_half_angle: float = 60.0, wedge_axis="x", threads: int = 1) -> VoxelGrid:
    """Zero the Fourier coefficients outside a ``+-wedge_half_angle`` tilt range."""
    if not 0 < wedge_half_angle <= 90:
        raise ValueError("wedge_half_angle must be in (0, 90]")
    if wedge_half_angle >= 90:
        return grid.with_data(np.array(grid.data))
    f = sfft.rfftn(grid.data, workers=threads)
    f[wedge_mask(grid.dims, wedge_half_angle, wedge_axis)] = 0.0
    out = sfft.irfftn(f, s=grid.dims, workers=threads)
    return grid.with_data(out)


def signal_reference_amplitude(traces, spec: GridSpec, fwhm: float) -> float:
    """Median blurred amplitude on the rasterized centrelines (unit signal)."""
    raster = rasterize_traces(traces, spec)
    mask = raster.data > 0
    if not mask.any():
        return 0.0
    blurred = gaussian_blur(raster, fwhm)
    return float(np.median(blurred.data[mask]))


def simulate_tomogram(traces: Sequence[FilamentTrace], config: SimulationConfig) -> VoxelGrid:
    """Rasterize, amplify, blur, add coloured noise, then mask the wedge."""
    spec = config.grid
    raster = rasterize_traces(traces, spec)
    clean = gaussian_blur(raster, config.fwhm)
    out = clean.data * config.signal_amplification
    if config.noise_level > 0:
        mask = raster.data > 0
        ref = float(np.median(clean.data[mask])) if mask.any() else 1.0
        noise = colored_noise(spec, config.noise_spectrum, config.rng_seed, threads=config.threads)
        out = out + noise.data * (config.noise_level * NOISE_REFERENCE * ref)
    result = VoxelGrid(out, spec.spacing, spec.origin)
    if config.wedge_half_angle < 90:
        result = apply_missing_wedge(result, config.wedge_half_angle, config.wedge_axis, threads=config.threads)
    return result
