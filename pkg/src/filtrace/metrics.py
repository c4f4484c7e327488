"""Scoring traced filaments against ground truth.

Voxel F1
    Predicted filament voxels are first dilated by one voxel (3x3x3).  A
    predicted voxel is a true positive when a truth voxel lies within
    Chebyshev distance ``neighborhood``; otherwise it is a false positive.
    A truth voxel without any predicted voxel within that distance is a
    false negative.

Cross-distance
    Mean Euclidean distance between a truth centreline and the prediction,
    compared slice by slice along the bundle axis over their common range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .phantom import FilamentTrace, GridSpec, trace_voxels
from .volgrid import VoxelGrid

__all__ = [
    "UNDEFINED",
    "EvalReport",
    "CrossDistanceReport",
    "f1_score",
    "voxel_mask",
    "voxel_f1",
    "cross_distance",
    "cross_distance_report",
]

UNDEFINED = "UND"


def f1_score(precision, recall) -> Optional[float]:
    """Harmonic mean; ``None`` when undefined."""
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _fmt(v):
    return UNDEFINED if v is None else f"{v:.3f}"


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    neighborhood: int = 3

    @classmethod
    def from_counts(cls, tp, fp, fn, neighborhood=3) -> "EvalReport":
        p = tp / (tp + fp) if tp + fp > 0 else None
        r = tp / (tp + fn) if tp + fn > 0 else None
        return cls(int(tp), int(fp), int(fn), p, r, f1_score(p, r), neighborhood)

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": UNDEFINED if self.precision is None else self.precision,
            "recall": UNDEFINED if self.recall is None else self.recall,
            "f1": UNDEFINED if self.f1 is None else self.f1,
            "neighborhood": self.neighborhood,
        }

    def __str__(self):
        return (f"TP={self.tp} FP={self.fp} FN={self.fn} P={_fmt(self.precision)} "
                f"R={_fmt(self.recall)} F1={_fmt(self.f1)}")


@dataclass
class CrossDistanceReport:
    per_filament: List[Tuple[int, float]] = field(default_factory=list)
    mean: float = float("nan")


def voxel_mask(obj, spec: Optional[GridSpec] = None) -> np.ndarray:
    """Boolean voxel mask from traces, an ``(n, 3)`` index array, a grid or a mask."""
    if isinstance(obj, VoxelGrid):
        return obj.data > 0
    if isinstance(obj, np.ndarray) and obj.ndim == 3:
        return obj.astype(bool)
    if spec is None:
        raise ValueError("a grid spec is required to rasterize traces or index lists")
    mask = np.zeros(spec.dims, dtype=bool)
    items = list(obj)
    if items and isinstance(items[0], FilamentTrace):
        for tr in items:
            vox = trace_voxels(spec.to_voxel(tr.points), spec.dims)
            if len(vox):
                mask[vox[:, 0], vox[:, 1], vox[:, 2]] = True
    elif items:
        idx = np.asarray(items, dtype=np.int64).reshape(-1, 3)
        inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
        idx = idx[inside]
        mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return mask


def voxel_f1(predicted, truth, neighborhood: int = 3, spec: Optional[GridSpec] = None,
             dilate: bool = True) -> EvalReport:
    """Neighbourhood precision / recall / F1 of predicted filament voxels."""
    pred = voxel_mask(predicted, spec)
    true = voxel_mask(truth, spec)
    if pred.shape != true.shape:
        raise ValueError("prediction and truth live on different grids")
    if dilate and pred.any():
        pred = ndimage.binary_dilation(pred, structure=np.ones((3, 3, 3), dtype=bool))
    size = 2 * int(neighborhood) + 1
    near_true = ndimage.maximum_filter(true, size=size, mode="constant", cval=False)
    near_pred = ndimage.maximum_filter(pred, size=size, mode="constant", cval=False)
    tp = int(np.count_nonzero(pred & near_true))
    fp = int(np.count_nonzero(pred & ~near_true))
    fn = int(np.count_nonzero(true & ~near_pred))
    return EvalReport.from_counts(tp, fp, fn, int(neighborhood))


def _axial_samples(points: np.ndarray, axis: int, step: float):
    """Points sampled every ``step`` along the axial coordinate (or along arc length)."""
    a = points[:, axis]
    da = np.diff(a)
    if np.all(da > 0) or np.all(da < 0):
        if da[0] < 0:
            points = points[::-1]
            a = a[::-1]
        lo = math.ceil(a[0] / step - 1e-9) * step
        t = np.arange(lo, a[-1] + step * 1e-6, step)
        t = t[t <= a[-1] + 1e-12]
        return np.stack([np.interp(t, a, points[:, d]) for d in range(3)], axis=1)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.arange(0.0, s[-1] + step * 1e-6, step)
    return np.stack([np.interp(t, s, points[:, d]) for d in range(3)], axis=1)


def cross_distance(predicted: FilamentTrace, truth: FilamentTrace, axis: int = 1,
                   spacing: float = 1.0, step: float = 0.1) -> float:
    """Mean in-slice distance (voxels) between two centrelines.

    Truth is sampled at every integer axial slice inside the common axial
    range; each sample is paired with the interpolated predicted point of
    nearest axial coordinate (within half a voxel).

    Raises
    ------
    ValueError
        If the traces share no axial range.
    """
    p = np.asarray(predicted.points, dtype=np.float64) / spacing
    q = np.asarray(truth.points, dtype=np.float64) / spacing
    lo = max(p[:, axis].min(), q[:, axis].min())
    hi = min(p[:, axis].max(), q[:, axis].max())
    slices = np.arange(math.ceil(lo - 1e-9), math.floor(hi + 1e-9) + 1)
    if len(slices) == 0:
        raise ValueError("traces do not overlap along the axis")
    tq = _axial_samples(q, axis, 1.0)
    tq = tq[(tq[:, axis] >= slices[0] - 1e-9) & (tq[:, axis] <= slices[-1] + 1e-9)]
    dense = _axial_samples(p, axis, step)
    order = np.argsort(dense[:, axis], kind="stable")
    sa = dense[order, axis]
    dists = []
    for pt in tq:
        k = np.searchsorted(sa, pt[axis])
        cand = [c for c in (k - 1, k) if 0 <= c < len(sa)]
        best = min(cand, key=lambda c: (abs(sa[c] - pt[axis]), c))
        if abs(sa[best] - pt[axis]) > 0.5:
            continue
        dists.append(float(np.linalg.norm(dense[order[best]] - pt)))
    if not dists:
        raise ValueError("traces do not overlap along the axis")
    return float(np.mean(dists))


def cross_distance_report(pairs: Sequence[Tuple[FilamentTrace, FilamentTrace]], axis: int = 1,
                          spacing: float = 1.0) -> CrossDistanceReport:
    per = []
    for pred, true in pairs:
        per.append((true.id, cross_distance(pred, true, axis=axis, spacing=spacing)))
    mean = float(np.mean([d for _, d in per])) if per else float("nan")
    return CrossDistanceReport(per, mean)
