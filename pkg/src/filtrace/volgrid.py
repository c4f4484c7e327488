"""Voxel grids, MRC2014 map I/O and basic volume operations.

Arrays are always held in (X, Y, Z) index order, i.e. ``data[i, j, k]``
is the voxel at column ``i``, row ``j`` and section ``k``.  Files whose
header declares a different axis mapping (``mapc``/``mapr``/``maps``)
are permuted on read.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "VoxelGrid",
    "GridStats",
    "MapFormatError",
    "UnsupportedModeError",
    "CapacityError",
    "read_map",
    "write_map",
    "normalize_unit",
    "gaussian_blur",
    "grid_stats",
    "FWHM_TO_SIGMA",
]

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

HEADER_BYTES = 1024
DEFAULT_MEMORY_BUDGET = 4 * 1024**3

_MODE_DTYPES = {0: np.int8, 1: np.int16, 2: np.float32}


class MapFormatError(ValueError):
    """The file is not a readable MRC2014 volume."""


class UnsupportedModeError(MapFormatError):
    """The MRC data mode is valid but not handled here."""


class CapacityError(MemoryError):
    """The declared volume exceeds the configured memory budget."""


@dataclass(frozen=True)
class VoxelGrid:
    """Dense scalar volume on an isotropic cubic lattice.

    Parameters
    ----------
    data : array_like, shape (nx, ny, nz)
        Density values indexed ``[i, j, k]`` for the X, Y, Z axes.
    spacing : float
        Voxel edge length (nm or Angstrom, caller's choice).
    origin : sequence of 3 floats
        Physical coordinate of voxel ``(0, 0, 0)``'s centre.
    """

    data: np.ndarray
    spacing: float = 1.0
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"grid data must be a non-empty 3D array, got shape {arr.shape}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != 3:
            raise ValueError("origin must have three components")

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "VoxelGrid":
        """Same geometry, new values."""
        return VoxelGrid(data, self.spacing, self.origin)

    def to_voxel(self, points) -> np.ndarray:
        """Physical coordinates -> fractional voxel indices."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / self.spacing

    def to_physical(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.float64)
        return idx * self.spacing + np.asarray(self.origin)

    @classmethod
    def zeros(cls, dims, spacing=1.0, origin=(0.0, 0.0, 0.0)) -> "VoxelGrid":
        return cls(np.zeros(tuple(dims)), spacing, origin)


@dataclass
class GridStats:
    mean: float
    sd: float
    min: float
    max: float
    percentiles: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# MRC2014 I/O


def _parse_header(raw: bytes):
    if len(raw) < HEADER_BYTES:
        raise MapFormatError(f"header too short ({len(raw)} bytes)")
    stamp = raw[212:214]
    if stamp in (b"\x11\x11", b"\x11\x00"):
        endian = ">"
    elif stamp in (b"\x44\x44", b"\x44\x41"):
        endian = "<"
    else:
        # Old files may lack a machine stamp; fall back to whichever order
        # gives a sane mode word.
        mode_le = struct.unpack("<i", raw[12:16])[0]
        endian = "<" if 0 <= mode_le <= 16 else ">"

    ints = struct.unpack(endian + "10i", raw[0:40])
    cell = struct.unpack(endian + "6f", raw[40:64])
    axes = struct.unpack(endian + "3i", raw[64:76])
    dstats = struct.unpack(endian + "3f", raw[76:88])
    ispg, nsymbt = struct.unpack(endian + "2i", raw[88:96])
    origin = struct.unpack(endian + "3f", raw[196:208])
    return {
        "endian": endian,
        "nc": ints[0],
        "nr": ints[1],
        "ns": ints[2],
        "mode": ints[3],
        "nstart": ints[4:7],
        "mxyz": ints[7:10],
        "cell": cell[:3],
        "angles": cell[3:],
        "mapcrs": axes,
        "dmin": dstats[0],
        "dmax": dstats[1],
        "dmean": dstats[2],
        "ispg": ispg,
        "nsymbt": nsymbt,
        "origin": origin,
        "map": raw[208:212],
    }


def read_map(path, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> VoxelGrid:
    """Read an MRC2014 volume (modes 0, 1, 2) into a :class:`VoxelGrid`."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_BYTES)
        hdr = _parse_header(raw)
        nc, nr, ns, mode = hdr["nc"], hdr["nr"], hdr["ns"], hdr["mode"]
        if min(nc, nr, ns) < 1:
            raise MapFormatError(f"non-positive dimensions ({nc}, {nr}, {ns})")
        if sorted(hdr["mapcrs"]) != [1, 2, 3]:
            raise MapFormatError(f"invalid axis mapping {hdr['mapcrs']}")
        if hdr["nsymbt"] < 0:
            raise MapFormatError("negative extended header size")
        if mode not in _MODE_DTYPES:
            raise UnsupportedModeError(f"MRC mode {mode} is not supported")
        dtype = np.dtype(_MODE_DTYPES[mode]).newbyteorder(hdr["endian"])
        count = nc * nr * ns
        if count * max(dtype.itemsize, 8) > memory_budget:
            raise CapacityError(
                f"volume of {count} voxels exceeds memory budget of {memory_budget} bytes"
            )
        fh.seek(HEADER_BYTES + hdr["nsymbt"])
        payload = np.fromfile(fh, dtype=dtype, count=count)
    if payload.size != count:
        raise MapFormatError(f"payload truncated: expected {count} values, found {payload.size}")

    arr = payload.reshape(ns, nr, nc).transpose(2, 1, 0)  # (col, row, sec)
    labels = [a - 1 for a in hdr["mapcrs"]]
    arr = arr.transpose([labels.index(0), labels.index(1), labels.index(2)])
    data = np.ascontiguousarray(arr, dtype=np.float64)

    # Sampling counts are given per X, Y, Z axis, not per file axis.
    dims_xyz = data.shape
    spacings = []
    for cell_len, m, n in zip(hdr["cell"], hdr["mxyz"], dims_xyz):
        m = m if m > 0 else n
        spacings.append(cell_len / m if cell_len > 0 else 1.0)
    if max(spacings) - min(spacings) > 1e-4 * max(spacings):
        raise MapFormatError(f"anisotropic voxel spacing {spacings} is not supported")
    spacing = spacings[0]

    origin = np.asarray(hdr["origin"], dtype=np.float64)
    if not np.any(origin):
        nstart = np.asarray(hdr["nstart"], dtype=np.float64)
        starts = np.empty(3)
        for file_axis, lab in enumerate(labels):
            starts[lab] = nstart[file_axis]
        origin = starts * spacing
    return VoxelGrid(data, spacing, tuple(origin))


def write_map(grid: VoxelGrid, path) -> None:
    """Write ``grid`` as a little-endian MRC2014 mode-2 file."""
    data32 = np.asarray(grid.data, dtype=np.float32)
    nx, ny, nz = grid.dims
    header = bytearray(HEADER_BYTES)
    struct.pack_into("<10i", header, 0, nx, ny, nz, 2, 0, 0, 0, nx, ny, nz)
    struct.pack_into(
        "<6f", header, 40, nx * grid.spacing, ny * grid.spacing, nz * grid.spacing, 90.0, 90.0, 90.0
    )
    struct.pack_into("<3i", header, 64, 1, 2, 3)
    struct.pack_into(
        "<3f", header, 76, float(data32.min()), float(data32.max()), float(data32.mean(dtype=np.float64))
    )
    struct.pack_into("<2i", header, 88, 1, 0)
    header[104:108] = b"\x00\x00\x00\x00"
    struct.pack_into("<i", header, 108, 20141)
    struct.pack_into("<3f", header, 196, *grid.origin)
    header[208:212] = b"MAP "
    header[212:216] = b"\x44\x44\x00\x00"
    struct.pack_into("<f", header, 216, float(data32.std(dtype=np.float64)))
    struct.pack_into("<i", header, 220, 1)
    label = b"filtrace"
    header[224 : 224 + len(label)] = label
    payload = np.ascontiguousarray(data32.transpose(2, 1, 0)).astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(payload.tobytes())


# --------------------------------------------------------------------------
# value operations


def normalize_unit(grid: VoxelGrid) -> VoxelGrid:
    """Affine min-max rescale to [0, 1]; a constant grid becomes all zeros."""
    d = grid.data
    lo, hi = float(d.min()), float(d.max())
    if hi <= lo:
        return grid.with_data(np.zeros(grid.dims))
    out = (d - lo) / (hi - lo)
    np.clip(out, 0.0, 1.0, out=out)
    return grid.with_data(out)


def gaussian_blur(grid: VoxelGrid, fwhm: float) -> VoxelGrid:
    """Separable Gaussian blur with a physical full width at half maximum.

    Out-of-grid voxels are treated as zero.
    """
    if not fwhm > 0:
        raise ValueError("fwhm must be positive")
    sigma = fwhm * FWHM_TO_SIGMA / grid.spacing
    out = ndimage.gaussian_filter(grid.data, sigma=sigma, mode="constant", cval=0.0, truncate=4.0)
    return grid.with_data(out)


def grid_stats(grid: VoxelGrid, percentiles: Sequence[float] = ()) -> GridStats:
    """Moments and nearest-rank percentiles.

    A percentile ``p`` (a fraction in [0, 1]) reports the value of rank
    ``ceil(p * N)`` in the ascending order (rank 1 for ``p == 0``).
    """
    flat = grid.data.ravel()
    pct = {}
    if len(percentiles):
        ordered = np.sort(flat)
        n = ordered.size
        for p in percentiles:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"percentile {p} outside [0, 1]")
            rank = max(1, math.ceil(p * n))
            pct[p] = float(ordered[rank - 1])
    return GridStats(
        mean=float(flat.mean()),
        sd=float(flat.std()),
        min=float(flat.min()),
        max=float(flat.max()),
        percentiles=pct,
    )
