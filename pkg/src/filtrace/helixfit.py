"""Cylindrical similarity between helix density and an atomic model.

The helix axis is derived from Calpha coordinates by averaging every
four consecutive atoms.  Around that axis an inner cylinder (2.5 A) and
an outer annulus (2.5-4 A) are compared with the map thresholded at a
level swept between the map mean and maximum:

* ``vx_inner``: inner voxels at or above threshold,
* ``vx_out``: annulus voxels at or above threshold (density beyond the model),
* ``ex_mod``: inner voxels below threshold (model without density).

``pden = vx_inner / (vx_inner + vx_out)``,
``rmod = vx_inner / (vx_inner + ex_mod)`` and ``f1`` is their harmonic mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volgrid import VoxelGrid

__all__ = [
    "R_INNER",
    "R_OUTER",
    "N_THRESHOLDS",
    "PdbParseError",
    "EmptyModelError",
    "HelixModel",
    "CylinderFitReport",
    "parse_calpha",
    "parse_helix_annotations",
    "central_axis",
    "cylinder_counts",
    "helix_f1",
    "chain_score",
    "atom_region_mask",
]

R_INNER = 2.5
R_OUTER = 4.0
N_THRESHOLDS = 64
AXIS_STEP = 0.5
CA_SPACING_BAND = (2.0, 4.5)


class PdbParseError(ValueError):
    """Malformed ATOM record."""


class EmptyModelError(ValueError):
    """No Calpha atoms matched the chain/residue selection."""


@dataclass
class HelixModel:
    """Ordered Calpha coordinates (A) of one helix."""

    calphas: np.ndarray
    chain_id: str = ""
    residue_range: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        ca = np.asarray(self.calphas, dtype=np.float64).reshape(-1, 3)
        if len(ca) < 4:
            raise ValueError(f"a helix needs at least 4 Calpha atoms, got {len(ca)}")
        gaps = np.linalg.norm(np.diff(ca, axis=0), axis=1)
        lo, hi = CA_SPACING_BAND
        bad = np.flatnonzero((gaps < lo) | (gaps > hi))
        if len(bad):
            raise ValueError(f"Calpha spacing {gaps[bad[0]]:.2f} A after atom {bad[0]} is outside [{lo}, {hi}]")
        self.calphas = ca

    def __len__(self):
        return len(self.calphas)


@dataclass
class CylinderFitReport:
    f1: float
    pden: float
    rmod: float
    vx_inner: int
    vx_out: int
    ex_mod: int
    best_threshold: float
    r_inner: float = R_INNER
    r_outer: float = R_OUTER
    degenerate: bool = False
    sweep: Optional[np.ndarray] = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "f1": self.f1,
            "pden": self.pden,
            "rmod": self.rmod,
            "vx_inner": self.vx_inner,
            "vx_out": self.vx_out,
            "ex_mod": self.ex_mod,
            "best_threshold": self.best_threshold,
            "r_inner": self.r_inner,
            "r_outer": self.r_outer,
            "degenerate": self.degenerate,
        }


# --------------------------------------------------------------------------
# PDB subset


def _field(line, a, b):
    return line[a:b] if len(line) >= b else line[a:].ljust(b - a)


def _parse_atom(line: str, lineno: int):
    try:
        name = _field(line, 12, 16).strip()
        altloc = _field(line, 16, 17)
        chain = _field(line, 21, 22)
        resseq = int(_field(line, 22, 26))
        icode = _field(line, 26, 27).strip()
        xyz = [float(_field(line, a, a + 8)) for a in (30, 38, 46)]
    except ValueError as exc:
        raise PdbParseError(f"line {lineno}: malformed ATOM record ({exc})") from None
    return name, altloc, chain, resseq, icode, xyz


def parse_calpha(model_text: str, chain: str, residue_range: Optional[Tuple[int, int]] = None) -> HelixModel:
    """Calpha atoms of ``chain`` (optionally within an inclusive residue range).

    Reads fixed-column ``ATOM`` records up to the first ``ENDMDL``.  When
    a residue has alternate locations, blank or ``A`` wins over the rest.

    Raises
    ------
    PdbParseError
        On a malformed ATOM line (message carries the line number).
    EmptyModelError
        When nothing matches.
    """
    picked = {}
    for lineno, line in enumerate(model_text.splitlines(), 1):
        if line.startswith("ENDMDL"):
            break
        if not line.startswith("ATOM"):
            continue
        name, altloc, ch, resseq, icode, xyz = _parse_atom(line, lineno)
        if name != "CA" or ch != chain:
            continue
        if residue_range is not None and not residue_range[0] <= resseq <= residue_range[1]:
            continue
        key = (resseq, icode)
        rank = 0 if altloc in (" ", "A") else 1
        if key not in picked or rank < picked[key][0]:
            picked[key] = (rank, xyz)
    if not picked:
        raise EmptyModelError(f"no Calpha atoms for chain {chain!r} in {residue_range}")
    keys = sorted(picked)
    ca = np.array([picked[k][1] for k in keys])
    rr = tuple(residue_range) if residue_range is not None else (keys[0][0], keys[-1][0])
    return HelixModel(ca, chain, rr)


def parse_helix_annotations(text: str) -> List[Tuple[str, int, int]]:
    """``chain,start,end`` per line; blank lines and ``#`` comments skipped."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'chain,start,end'")
        try:
            out.append((parts[0], int(parts[1]), int(parts[2])))
        except ValueError:
            raise ValueError(f"line {lineno}: residue numbers must be integers") from None
    return out


# --------------------------------------------------------------------------
# axis and counts


def _resample(points: np.ndarray, step: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return points[:1].copy()
    n = max(1, int(math.ceil(s[-1] / step)))
    t = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(t, s, points[:, d]) for d in range(3)], axis=1)


def central_axis(model: HelixModel, step: float = AXIS_STEP) -> np.ndarray:
    """Helix axis polyline in A.

    Means of every 4 consecutive Calpha atoms give ``n - 3`` raw points.
    These get a 3-point moving average (ends held) and are resampled at
    ``step`` A arc spacing.
    """
    ca = model.calphas if isinstance(model, HelixModel) else np.asarray(model, dtype=np.float64)
    if len(ca) < 4:
        raise ValueError("central axis needs at least 4 Calpha atoms")
    raw = np.stack([ca[i : i + 4].mean(axis=0) for i in range(len(ca) - 3)])
    if len(raw) >= 3:
        raw = ndimage.uniform_filter1d(raw, size=3, axis=0, mode="nearest")
    if len(raw) == 1:
        return raw
    return _resample(raw, step)


def _axis_distance(points: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Distance from each point to the polyline, ``inf`` beyond the flat end caps."""
    axis = np.asarray(axis, dtype=np.float64).reshape(-1, 3)
    axis = axis[np.r_[True, np.any(np.diff(axis, axis=0) != 0, axis=1)]]
    n = len(points)
    best = np.full(n, np.inf)
    if len(axis) < 2:
        return best
    for k in range(len(axis) - 1):
        a, d = axis[k], axis[k + 1] - axis[k]
        t = (points - a) @ d / float(d @ d)
        # caps are the planes through the end points normal to the end segments
        if k == 0:
            gate = t >= 0
        if k == len(axis) - 2:
            gate &= t <= 1
        tc = np.clip(t, 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(points - (a + tc[:, None] * d), axis=1))
    return np.where(gate, best, np.inf)
    last = len(axis) - 2
    for k in range(len(axis) - 1):
        a, b = axis[k], axis[k + 1]
        d = b - a
        dd = float(d @ d)
        if dd == 0:
            continue
        t = (points - a) @ d / dd
        ok = np.ones(n, dtype=bool)
        if k == 0:
            ok &= t >= 0
        if k == last:
            ok &= t <= 1
        tc = np.clip(t, 0.0, 1.0)
        dist = np.linalg.norm(points - (a + tc[:, None] * d), axis=1)
        best = np.where(ok & (dist < best), dist, best)
    return best


def _cylinder_values(grid: VoxelGrid, axis, r_inner=R_INNER, r_outer=R_OUTER):
    """Map values of voxels in the inner cylinder and in the annulus."""
    axis = np.asarray(axis, dtype=np.float64).reshape(-1, 3)
    lo = np.floor(grid.to_voxel(axis.min(axis=0) - r_outer)).astype(int)
    hi = np.ceil(grid.to_voxel(axis.max(axis=0) + r_outer)).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(grid.dims) - 1)
    if np.any(hi < lo):
        return np.zeros(0), np.zeros(0)
    idx = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij"), -1).reshape(-1, 3)
    dist = _axis_distance(grid.to_physical(idx), axis)
    vals = grid.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    inner = dist <= r_inner
    annulus = (dist > r_inner) & (dist <= r_outer)
    return vals[inner], vals[annulus]


def cylinder_counts(grid: VoxelGrid, axis, threshold: float,
                    r_inner: float = R_INNER, r_outer: float = R_OUTER) -> Tuple[int, int, int]:
    """``(vx_inner, vx_out, ex_mod)`` at one density threshold (``>=`` counts as density)."""
    inner, ann = _cylinder_values(grid, axis, r_inner, r_outer)
    vi = int(np.count_nonzero(inner >= threshold))
    return vi, int(np.count_nonzero(ann >= threshold)), int(len(inner) - vi)


def _scores(vi, vo, em):
    vi, vo, em = (np.asarray(a, dtype=np.float64) for a in (vi, vo, em))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(vi + vo > 0, vi / (vi + vo), 0.0)
        r = np.where(vi + em > 0, vi / (vi + em), 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


def helix_f1(grid: VoxelGrid, axis, n_thresholds: int = N_THRESHOLDS,
             r_inner: float = R_INNER, r_outer: float = R_OUTER) -> CylinderFitReport:
    """Best cylindrical F1 over thresholds evenly spaced from the map mean to its maximum.

    Ties go to the lowest threshold.  A helix whose cylinder contains no
    voxels gives a zero report flagged ``degenerate``.
    """
    data = grid.data
    thresholds = np.linspace(float(data.mean()), float(data.max()), n_thresholds)
    inner, ann = _cylinder_values(grid, axis, r_inner, r_outer)
    if len(inner) == 0:
        return CylinderFitReport(0.0, 0.0, 0.0, 0, 0, 0, float(thresholds[0]), r_inner, r_outer, degenerate=True)
    si, sa = np.sort(inner), np.sort(ann)
    vi = len(si) - np.searchsorted(si, thresholds, side="left")
    vo = len(sa) - np.searchsorted(sa, thresholds, side="left")
    em = len(si) - vi
    p, r, f = _scores(vi, vo, em)
    k = int(np.argmax(f))
    sweep = np.stack([thresholds, p, r, f], axis=1)
    return CylinderFitReport(float(f[k]), float(p[k]), float(r[k]), int(vi[k]), int(vo[k]), int(em[k]),
                             float(thresholds[k]), r_inner, r_outer, sweep=sweep)


def chain_score(reports: Sequence[Tuple[float, CylinderFitReport]]) -> float:
    """Helix-length weighted mean F1 of a chain."""
    if not reports:
        raise ValueError("chain_score needs at least one helix")
    w = np.array([float(n) for n, _ in reports])
    f = np.array([rep.f1 for _, rep in reports])
    if np.any(w < 0) or w.sum() == 0:
        raise ValueError("helix lengths must be non-negative with a positive sum")
    return float((w * f).sum() / w.sum())


def atom_region_mask(grid: VoxelGrid, coords, radius: float = 5.0) -> np.ndarray:
    """Boolean mask of voxels within ``radius`` A of any atom."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    idx = np.indices(grid.dims).reshape(3, -1).T
    tree = cKDTree(coords)
    d, _ = tree.query(grid.to_physical(idx), distance_upper_bound=radius + 1e-9)
    return (d <= radius).reshape(grid.dims)
