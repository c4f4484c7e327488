"""Phantom scenarios and noise-sweep benchmarks.

Each scenario fixes a ground-truth layout, a grid and simulation
settings, so that a tracer can be scored at several noise levels on the
same filaments.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bundletrac import BundleConfig, run_bundletrac
from .metrics import cross_distance, voxel_f1
from .phantom import FilamentTrace, GridSpec, SimulationConfig, simulate_tomogram
from .spaghetti import SpaghettiConfig, trace_spaghetti
from .struwwel import StruwwelConfig, trace_struwwel
from .synth import dominant_bundle, hex_bundle, random_network
from .volgrid import VoxelGrid

__all__ = ["Scenario", "SCENARIOS", "make_phantom", "BenchRow", "run_bench", "format_table", "TRACERS"]

# 5 nm at 0.947 nm/voxel and 9 nm at 1.912 nm/voxel, the voxel sizes of
# the corresponding experimental tomograms
SPAGHETTI_FWHM = 5.0 / 0.947
STRUWWEL_FWHM = 9.0 / 1.912


@dataclass(frozen=True)
class Scenario:
    """Phantom recipe; ``layout`` selects the truth generator."""

    layout: str
    dims: tuple
    n_filaments: int
    fwhm: float
    wedge_half_angle: float
    wedge_axis: str
    layout_seed: int = 0
    sim_seed: int = 0

    def truth(self) -> List[FilamentTrace]:
        if self.layout == "bundle":
            return dominant_bundle(self.dims, self.n_filaments, rng_seed=self.layout_seed, radius=45.0, min_dist=9.5)
        if self.layout == "network":
            return random_network(self.dims, self.n_filaments, rng_seed=self.layout_seed, length=(100.0, 220.0),
                                  flatten=1.0)
        if self.layout == "hex":
            return hex_bundle(self.dims, rings=2, spacing=13.0, drift_amplitude=2.0, rng_seed=self.layout_seed)
        raise ValueError(f"unknown layout {self.layout!r}")

    def simulation(self, noise_level: float, threads: int = 1) -> SimulationConfig:
        return SimulationConfig(GridSpec(self.dims), fwhm=self.fwhm, noise_level=noise_level,
                                wedge_half_angle=self.wedge_half_angle, wedge_axis=self.wedge_axis,
                                rng_seed=self.sim_seed, threads=threads)


# The tilt axis of the bundle phantoms runs along the bundle: filaments
# perpendicular to the tilt axis would otherwise lose their entire
# beam-direction spectrum to the wedge.
SCENARIOS: Dict[str, Scenario] = {
    "bundle": Scenario("bundle", (160, 320, 120), 40, SPAGHETTI_FWHM, 60.0, "y", layout_seed=1, sim_seed=3),
    "network": Scenario("network", (200, 200, 71), 40, STRUWWEL_FWHM, 45.0, "x", layout_seed=0, sim_seed=5),
    "hex": Scenario("hex", (90, 330, 90), 19, SPAGHETTI_FWHM, 60.0, "y", layout_seed=0, sim_seed=1),
}


def make_phantom(scenario, noise_level: float, threads: int = 1):
    """``(truth traces, simulated grid)`` for a scenario name or object."""
    sc = SCENARIOS[scenario] if isinstance(scenario, str) else scenario
    truth = sc.truth()
    return truth, simulate_tomogram(truth, sc.simulation(noise_level, threads))


@dataclass
class BenchRow:
    tracer: str
    variant: str
    noise_level: float
    precision: object
    recall: object
    f1: object
    n_traces: int
    seconds: float


def _seeds_from_truth(truth, grid: VoxelGrid):
    mid = (grid.dims[1] - 1) / 2.0
    return np.array([t.points[np.argmin(np.abs(t.points[:, 1] - mid))] for t in truth])


def _score(tracer, variant, noise, traces, truth, spec, seconds):
    rep = voxel_f1(traces, truth, spec=spec).as_dict()
    return BenchRow(tracer, variant, float(noise), rep["precision"], rep["recall"], rep["f1"], len(traces),
                    round(seconds, 3))


TRACERS = ("spaghetti", "struwwel", "bundle")


def run_bench(tracer: str, noise_levels: Sequence[float], variants: Optional[Sequence[str]] = None,
              scenario: Optional[Scenario] = None, threads: int = 1) -> List[BenchRow]:
    """Score one tracer across noise levels on a fixed phantom.

    ``variants`` are blend modes for ``spaghetti`` (``"<mode>"`` or
    ``"<mode>/no-enhance"``), ``"auto"`` or a numeric threshold for
    ``struwwel`` and ``"seven"``/``"one"`` for ``bundle``.  For bundles the
    precision/recall columns hold the fraction of filaments with
    cross-distance <= 3 voxels and F1 holds the mean cross-distance.
    """
    if tracer not in TRACERS:
        raise ValueError(f"unknown tracer {tracer!r}")
    default_sc = {"spaghetti": "bundle", "struwwel": "network", "bundle": "hex"}[tracer]
    sc = scenario or SCENARIOS[default_sc]
    variants = list(variants or {"spaghetti": ["multiply"], "struwwel": ["auto"], "bundle": ["seven"]}[tracer])
    truth = sc.truth()
    spec = GridSpec(sc.dims)
    rows = []
    for noise in noise_levels:
        grid = simulate_tomogram(truth, sc.simulation(noise, threads))
        for var in variants:
            t0 = time.perf_counter()
            if tracer == "spaghetti":
                mode, _, flag = var.partition("/")
                cfg = SpaghettiConfig(blend=mode, enhance=flag != "no-enhance", threads=threads)
                traces = trace_spaghetti(grid, cfg).traces
                rows.append(_score(tracer, var, noise, traces, truth, spec, time.perf_counter() - t0))
            elif tracer == "struwwel":
                thr = None if var == "auto" else float(var)
                traces = trace_struwwel(grid, StruwwelConfig(thr=thr, threads=threads)).filaments
                rows.append(_score(tracer, var, noise, traces, truth, spec, time.perf_counter() - t0))
            else:
                traces = run_bundletrac(grid, _seeds_from_truth(truth, grid), BundleConfig(mode=var))
                cd = np.array([cross_distance(p, t) for p, t in zip(traces, truth)])
                frac = float(np.mean(cd <= 3.0))
                rows.append(BenchRow(tracer, var, float(noise), frac, frac, float(cd.mean()), len(traces),
                                     round(time.perf_counter() - t0, 3)))
    return rows


def format_table(rows: Sequence[BenchRow], fmt: str = "csv", timings: bool = True) -> str:
    """CSV or JSON rendering; ``timings=False`` drops the wall-clock column."""
    dicts = [asdict(r) for r in rows]
    if not timings:
        for d in dicts:
            d.pop("seconds")
    if fmt == "json":
        return json.dumps(dicts, indent=2)
    buf = io.StringIO()
    fields = list(dicts[0]) if dicts else [f for f in BenchRow.__dataclass_fields__ if timings or f != "seconds"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for d in dicts:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in d.items()})
    return buf.getvalue()
