"""Ground-truth filament layouts for phantom tomograms.

All generators return :class:`FilamentTrace` objects in voxel units
(spacing 1, origin 0); scale them if a physical grid is needed.
"""

from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from .phantom import FilamentTrace

__all__ = ["dominant_bundle", "random_network", "hex_bundle", "hex_lattice"]


def _spread_points(rng, n, center, radius, min_dist, max_tries=20000):
    pts = []
    tries = 0
    while len(pts) < n and tries < max_tries:
        tries += 1
        r = radius * math.sqrt(rng.random())
        t = 2 * math.pi * rng.random()
        p = np.array([center[0] + r * math.cos(t), center[1] + r * math.sin(t)])
        if all(np.linalg.norm(p - q) >= min_dist for q in pts):
            pts.append(p)
    if len(pts) < n:
        raise ValueError(f"could only place {len(pts)} of {n} filaments; enlarge the region")
    return pts


def dominant_bundle(dims, n_filaments: int = 40, rng_seed: int = 0, center=None, radius: float = 42.0,
                    min_dist: float = 10.0, tilt: float = 0.04, waviness: float = 1.0,
                    min_fraction: float = 0.6, margin: float = 6.0) -> List[FilamentTrace]:
    """Loose bundle of filaments running along +Y.

    Filament positions are spread over a disc in the XZ plane; each one
    has a small individual tilt, a gentle sinusoidal wobble and spans a
    random Y range covering at least ``min_fraction`` of the grid.
    """
    rng = np.random.default_rng(rng_seed)
    nx, ny, nz = dims
    if center is None:
        center = (min(nx / 2.0, radius + margin + 4), nz / 2.0)
    base = _spread_points(rng, n_filaments, center, radius, min_dist)
    out = []
    for fid, (x0, z0) in enumerate(base):
        span = int(ny * (min_fraction + (1 - min_fraction) * rng.random()))
        y0 = int(rng.integers(0, ny - span + 1))
        y1 = min(ny - 1, y0 + span)
        ys = np.arange(y0, y1 + 1, 4.0)
        if ys[-1] != y1:
            ys = np.append(ys, y1)
        sx, sz = rng.uniform(-tilt, tilt, size=2)
        period = rng.uniform(120, 260)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        yc = ys - ny / 2.0
        xs = x0 + sx * yc + waviness * np.sin(2 * math.pi * ys / period + phase[0])
        zs = z0 + sz * yc + waviness * np.sin(2 * math.pi * ys / period + phase[1])
        xs = np.clip(xs, margin, nx - 1 - margin)
        zs = np.clip(zs, margin, nz - 1 - margin)
        out.append(FilamentTrace(np.stack([xs, ys, zs], axis=1), fid))
    return out


def random_network(dims, n_filaments: int = 30, rng_seed: int = 0, length=(60.0, 140.0),
                   step: float = 2.0, bend_deg: float = 4.0, min_length: float = 40.0,
                   margin: float = 4.0, flatten: float = 0.5, min_separation: float = 0.0) -> List[FilamentTrace]:
    """Gently curved filaments with random orientations.

    Directions are drawn uniformly on the sphere with the Z component
    scaled by ``flatten`` (thin specimens favour in-plane filaments) and
    renormalized.  Each filament is a random walk of direction with
    ``bend_deg`` rms turning per ``step``, stopped at the grid margin.
    Filaments shorter than ``min_length`` are redrawn.  With
    ``min_separation`` > 0 no sample of a new filament may lie closer
    than that to an earlier one.
    """
    rng = np.random.default_rng(rng_seed)
    lo = np.full(3, margin)
    hi = np.asarray(dims, dtype=np.float64) - 1 - margin
    out = []
    placed = np.zeros((0, 3))
    tries = 0
    while len(out) < n_filaments:
        tries += 1
        if tries > 200 * n_filaments:
            raise ValueError("could not place the requested filaments")
        target = rng.uniform(*length)
        d = rng.standard_normal(3)
        d[2] *= flatten
        d /= np.linalg.norm(d)
        p = rng.uniform(lo, hi)
        pts = [p.copy()]
        # grow both ways from the starting point
        for sgn in (1.0, -1.0):
            cur, dirv = p.copy(), sgn * d
            acc = 0.0
            seq = []
            while acc < target / 2:
                perturb = rng.standard_normal(3) * math.radians(bend_deg)
                perturb[2] *= flatten
                dirv = dirv + perturb - np.dot(perturb, dirv) * dirv
                dirv /= np.linalg.norm(dirv)
                nxt = cur + step * dirv
                if np.any(nxt < lo) or np.any(nxt > hi):
                    break
                seq.append(nxt)
                cur = nxt
                acc += step
            pts = (seq[::-1] + pts) if sgn < 0 else (pts + seq)
        pts = np.asarray(pts)
        if len(pts) < 2 or np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() < min_length:
            continue
        if min_separation > 0 and len(placed):
            diff = pts[:, None, :] - placed[None, :, :]
            if np.min(np.einsum("ijk,ijk->ij", diff, diff)) < min_separation**2:
                continue
        placed = np.vstack([placed, pts])
        out.append(FilamentTrace(pts, len(out)))
    return out


def hex_lattice(rings: int, spacing: float, orientation: float = 0.0) -> np.ndarray:
    """2D hexagonal lattice points (centre first) within ``rings`` shells."""
    pts = []
    for a in range(-rings, rings + 1):
        for b in range(-rings, rings + 1):
            if abs(a) <= rings and abs(b) <= rings and abs(a + b) <= rings:
                pts.append((a + 0.5 * b, b * math.sqrt(3) / 2))
    pts.sort(key=lambda p: (round(p[0] ** 2 + p[1] ** 2, 9), p))
    pts = np.asarray(pts) * spacing
    c, s = math.cos(orientation), math.sin(orientation)
    return pts @ np.array([[c, s], [-s, c]])


def hex_bundle(dims, rings: int = 2, spacing: float = 13.0, drift_amplitude: float = 2.0,
               drift_period: Optional[float] = None, orientation: float = 0.0, jitter: float = 0.0,
               rng_seed: int = 0, step: float = 2.0) -> List[FilamentTrace]:
    """Hexagonally packed bundle along +Y with a sinusoidal collective drift.

    ``rings = 2`` gives 19 filaments.  The whole bundle sways in X and Z
    with amplitude ``drift_amplitude`` voxels over ``drift_period`` slices
    (default: the Y extent).  ``jitter`` adds independent per-filament
    lateral sway of that amplitude.
    """
    rng = np.random.default_rng(rng_seed)
    nx, ny, nz = dims
    period = drift_period or float(ny)
    lattice = hex_lattice(rings, spacing, orientation)
    ys = np.arange(0.0, ny - 1 + 1e-9, step)
    if ys[-1] != ny - 1:
        ys = np.append(ys, ny - 1.0)
    bx = nx / 2.0 + drift_amplitude * np.sin(2 * math.pi * ys / period)
    bz = nz / 2.0 + drift_amplitude * np.sin(2 * math.pi * ys / period + math.pi / 3)
    out = []
    for fid, (u, v) in enumerate(lattice):
        jx = jz = 0.0
        if jitter > 0:
            ph = rng.uniform(0, 2 * math.pi, size=2)
            per = rng.uniform(0.5, 1.0) * period
            jx = jitter * np.sin(2 * math.pi * ys / per + ph[0])
            jz = jitter * np.sin(2 * math.pi * ys / per + ph[1])
        out.append(FilamentTrace(np.stack([bx + u + jx, ys, bz + v + jz], axis=1), fid))
    return out
