"""Command-line front end: ``filtrace <subcommand> [options]``.

Exit status is 0 on success, 1 on user errors (bad flags, unreadable or
malformed inputs) and 2 on internal errors.  Every run writes one JSON
run manifest: to ``--manifest`` if given, else next to the primary
output file (``<output>.manifest.json``), else to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .bench import SCENARIOS, TRACERS, format_table, run_bench
from .bundletrac import BundleConfig, run_bundletrac
from .helixfit import (EmptyModelError, PdbParseError, central_axis, chain_score, helix_f1, parse_calpha,
                       parse_helix_annotations)
from .metrics import cross_distance, voxel_f1
from .phantom import FilamentTrace, GridSpec, SimulationConfig, extract_radial_spectrum, simulate_tomogram
from .spaghetti import SpaghettiConfig, trace_spaghetti
from .struwwel import StruwwelConfig, npd_percentiles, trace_struwwel
from .traceio import TraceFormatError, read_traces, write_traces
from .volgrid import MapFormatError, read_map, write_map

__all__ = ["main", "run", "build_parser", "RunManifest", "UsageError", "REPORT_SCHEMA"]

REPORT_SCHEMA = "filtrace.report/1"
MANIFEST_SCHEMA = "filtrace.manifest/1"


class UsageError(Exception):
    """Bad command line or configuration; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunManifest:
    subcommand: str
    parameters: Dict[str, object]
    inputs: Dict[str, Optional[str]] = field(default_factory=dict)
    outputs: Dict[str, Optional[str]] = field(default_factory=dict)
    rng_seed: Optional[int] = None
    version: str = __version__
    timings: Dict[str, float] = field(default_factory=dict)
    schema: str = MANIFEST_SCHEMA

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# --------------------------------------------------------------------------
# parser


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--json", action="store_true", help="print the report as JSON")
    g.add_argument("--config", metavar="FILE", help="key=value defaults, overridden by flags")
    g.add_argument("--threads", type=int, default=1, help="worker cap")
    g.add_argument("--manifest", metavar="FILE", help="run manifest path (default: next to the output)")


def _add(sub, name, help_):
    p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False,
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _common(p)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="filtrace", description="Filament tracing in cryo-electron tomograms.",
                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    p = _add(sub, "simulate", "simulate a tomogram from ground-truth traces or a built-in phantom")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--traces", help="ground-truth trace file (physical units)")
    src.add_argument("--phantom", choices=sorted(SCENARIOS), default="bundle", help="built-in phantom layout")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"), help="grid size (phantom default if omitted)")
    p.add_argument("--spacing", type=float, default=1.0, help="voxel size")
    p.add_argument("--fwhm", type=float, help="filament width, physical units (phantom default if omitted)")
    p.add_argument("--amplification", type=float, default=1.0, help="signal amplification")
    p.add_argument("--noise", type=float, default=0.0, help="noise level (1.0 = reference)")
    p.add_argument("--alpha", type=float, default=1.5, help="noise power-law exponent")
    p.add_argument("--noise-reference", metavar="MAP", help="match the radial spectrum of this map instead of --alpha")
    p.add_argument("--wedge", type=float, help="wedge half angle, degrees; 90 = none (phantom default if omitted)")
    p.add_argument("--wedge-axis", choices=["x", "y"], help="tilt axis (phantom default if omitted)")
    p.add_argument("--seed", type=int, default=0, help="noise RNG seed")
    p.add_argument("--phantom-seed", type=int, help="layout seed (phantom default if omitted)")
    p.add_argument("--n-filaments", type=int, help="filament count for bundle/network phantoms")
    p.add_argument("--truth-out", help="write the ground-truth traces here")
    p.add_argument("output", help="output MRC map")

    p = _add(sub, "trace-spaghetti", "trace filaments running along one dominant direction")
    p.add_argument("-len", dest="len", type=int, default=5, help="DP path length l")
    p.add_argument("-axis", dest="axis", choices=list("xyz"), default="y", help="dominant direction")
    p.add_argument("-blend", dest="blend", default="multiply", help="multiply|add|geomean|min")
    p.add_argument("-no-enhance", dest="no_enhance", action="store_true", help="skip DP enhancement")
    p.add_argument("-collinear-angle", dest="collinear_angle", type=float, default=6.0, help="degrees")
    p.add_argument("-collinear-gap", dest="collinear_gap", type=float, default=10.0, help="voxels")
    p.add_argument("-isolation-radius", dest="isolation_radius", type=float, default=20.0, help="voxels")
    p.add_argument("-isolation-min", dest="isolation_min", type=int, default=3, help="neighbours required")
    p.add_argument("-backward-angle", dest="backward_angle", type=float, default=30.0, help="degrees")
    p.add_argument("-extension-cap", dest="extension_cap", type=int, default=5, help="voxels")
    p.add_argument("-overlap", dest="overlap", type=float, default=0.9, help="redundancy overlap fraction")
    p.add_argument("--enhanced-out", help="write the enhanced map (MRC)")
    p.add_argument("input", help="input MRC map")
    p.add_argument("output", help="output trace file (.txt or .cmm)")

    p = _add(sub, "trace-struwwel", "trace randomly oriented curved filaments")
    p.add_argument("-thr", dest="thr", required=True,
                   help="NPD threshold in [0, 1], or 'auto' for median + 3 robust sd")
    p.add_argument("-len", dest="len", type=int, default=10, help="CFS length l")
    p.add_argument("-gap", dest="gap", type=float, default=10.0, help="fusion distance, voxels")
    p.add_argument("-ang", dest="ang", type=float, default=30.0, help="fusion angle, degrees")
    p.add_argument("--backward-angle", type=float, default=20.0, help="degrees")
    p.add_argument("--pruning-out", help="write the pruning map (MRC)")
    p.add_argument("--report-percentiles", action="store_true", help="print an NPD histogram")
    p.add_argument("input", help="input MRC map")
    p.add_argument("output", help="output trace file (.txt or .cmm)")

    p = _add(sub, "trace-bundle", "trace filaments of a hexagonally packed bundle from seeds")
    p.add_argument("--seeds", required=True, help="seed file, one point per filament block")
    p.add_argument("--stride", type=int, default=55, help="slices between axis cross-sections")
    p.add_argument("--slab", type=int, default=5, help="slices averaged per cross-section")
    p.add_argument("--window", type=int, default=15, help="longitudinal averaging half window, slices")
    p.add_argument("--spacing-nm", type=float, default=12.6, help="filament spacing, nm")
    p.add_argument("--voxel-nm", type=float, help="voxel size in nm (default: map header, read as Angstrom)")
    p.add_argument("--spacing-vox", type=float, help="filament spacing in voxels; overrides --spacing-nm")
    p.add_argument("--mode", choices=["seven", "one"], default="seven", help="template")
    p.add_argument("--sigma", type=float, help="template Gaussian sigma, voxels (default spacing/6)")
    p.add_argument("--orientation", type=float, help="hexagon rotation, radians (default: from seeds)")
    p.add_argument("--marker-interval", type=int, default=15, help="slices between markers")
    p.add_argument("--search-radius", type=float, default=2.0, help="lateral search per marker, voxels")
    p.add_argument("--pre-gauss", type=float, help="Gaussian pre-filter FWHM, physical units")
    p.add_argument("--no-average", action="store_true", help="skip longitudinal averaging")
    p.add_argument("input", help="input MRC map")
    p.add_argument("output", help="output trace file (.txt or .cmm)")

    p = _add(sub, "eval", "score predicted traces against ground truth")
    p.add_argument("--pred", required=True, help="predicted traces or binary map")
    p.add_argument("--truth", required=True, help="true traces or binary map")
    p.add_argument("--metric", choices=["f1", "crossdist"], default="f1", help="score")
    p.add_argument("--neighborhood", type=int, default=3, help="Chebyshev tolerance, voxels")
    p.add_argument("--no-dilate", action="store_true", help="do not dilate predictions by one voxel")
    p.add_argument("--like", metavar="MAP", help="take the grid from this map when scoring traces")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"), help="grid size for traces")
    p.add_argument("--spacing", type=float, default=1.0, help="voxel size for traces")
    p.add_argument("--axis", choices=list("xyz"), default="y", help="cross-distance axis")
    p.add_argument("--pairing", choices=["id", "nearest"], default="id", help="cross-distance pairing")
    p.add_argument("--output", help="write the report here")

    p = _add(sub, "helixfit", "cylindrical fit of helix density against an atomic model")
    p.add_argument("--map", required=True, help="density map (MRC, Angstrom)")
    p.add_argument("--model", required=True, help="atomic model (PDB)")
    p.add_argument("--chain", help="chain identifier")
    sel = p.add_mutually_exclusive_group(required=True)
    sel.add_argument("--helix", action="append", metavar="START-END", help="residue range, repeatable")
    sel.add_argument("--all-helices-from", metavar="FILE", help="chain,start,end per line")
    p.add_argument("--thresholds", type=int, default=64, help="threshold sweep size")
    p.add_argument("--csv", help="write per-helix rows as CSV")
    p.add_argument("--output", help="write the JSON report here")

    p = _add(sub, "bench", "noise sweep of a tracer on a built-in phantom")
    p.add_argument("--tracer", choices=list(TRACERS), default="struwwel", help="tracer")
    p.add_argument("--noise", type=float, nargs="+", default=[0.35], help="noise levels")
    p.add_argument("--variant", nargs="+", help="blend modes, thresholds or template modes")
    p.add_argument("--phantom-seed", type=int, help="layout seed override")
    p.add_argument("--sim-seed", type=int, help="noise seed override")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"), help="phantom grid size override")
    p.add_argument("--format", choices=["csv", "json"], default="csv", help="table format")
    p.add_argument("--no-timings", action="store_true", help="omit the seconds column")
    p.add_argument("--output", help="write the table here")
    return parser


# --------------------------------------------------------------------------
# config files


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def load_config(path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def _subparser(parser, name):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices[name]
    raise KeyError(name)


def _apply_config(sub, values: Dict[str, str]):
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _parse_bool(raw)
            continue
        conv = act.type or str
        parts = raw.split() if act.nargs not in (None, "?") else [raw]
        try:
            vals = [conv(p) for p in parts]
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {key!r}: {raw!r}") from None
        if act.choices is not None and any(v not in act.choices for v in vals):
            raise UsageError(f"bad value for {key!r}: {raw!r}")
        if act.nargs in (None, "?"):
            defaults[key] = vals[0]
        elif act.nargs == "append" or isinstance(act, argparse._AppendAction):
            defaults[key] = vals
        else:
            defaults[key] = vals
        if act.required:
            act.required = False
    sub.set_defaults(**defaults)


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str]):
    parser = build_parser()
    # config values may satisfy required flags, so load them before parsing
    path = _config_path(argv)
    name = next((t for t in argv if not t.startswith("-")), None)
    if path and name is not None:
        try:
            sub = _subparser(parser, name)
        except KeyError:
            sub = None
        if sub is not None:
            _apply_config(sub, load_config(path))
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# helpers


def _read_map(path):
    try:
        return read_map(path)
    except OSError as exc:
        raise UsageError(f"cannot read map {path}: {exc.strerror or exc}") from None


def _read_traces(path, min_points=2):
    try:
        return read_traces(path, min_points=min_points)
    except OSError as exc:
        raise UsageError(f"cannot read traces {path}: {exc.strerror or exc}") from None


def _is_map(path) -> bool:
    p = Path(path)
    if p.suffix.lower() in (".mrc", ".map", ".rec", ".st"):
        return True
    try:
        with open(p, "rb") as fh:
            return fh.read(256)[208:212] == b"MAP "
    except OSError:
        return False


def _emit(args, manifest: RunManifest, report: dict, text: str, primary_output: Optional[str]):
    payload = {"schema": REPORT_SCHEMA, "subcommand": manifest.subcommand, "result": report}
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))
    elif text:
        print(text)
    mpath = args.manifest or (f"{primary_output}.manifest.json" if primary_output else None)
    if mpath:
        manifest.outputs["manifest"] = str(mpath)
        Path(mpath).write_text(manifest.to_json() + "\n")
    else:
        sys.stderr.write(manifest.to_json() + "\n")


def _params(args, drop=("json", "config", "manifest", "subcommand")):
    return {k: v for k, v in vars(args).items() if k not in drop}


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    t0 = time.perf_counter()
    timings = {}
    if args.traces:
        truth = _read_traces(args.traces)
        if args.dims is None:
            raise UsageError("--dims is required with --traces")
        sc = None
    else:
        sc = SCENARIOS[args.phantom]
        if args.dims is not None:
            sc = type(sc)(**{**asdict(sc), "dims": tuple(args.dims)})
        if args.phantom_seed is not None:
            sc = type(sc)(**{**asdict(sc), "layout_seed": args.phantom_seed})
        if args.n_filaments is not None:
            sc = type(sc)(**{**asdict(sc), "n_filaments": args.n_filaments})
        truth = sc.truth()
        if args.spacing != 1.0:
            truth = [FilamentTrace(t.points * args.spacing, t.id) for t in truth]
    dims = tuple(args.dims) if args.dims is not None else sc.dims
    args.dims = list(dims)
    if args.fwhm is None:
        args.fwhm = (sc.fwhm * args.spacing) if sc else 5.0
    if args.wedge is None:
        args.wedge = sc.wedge_half_angle if sc else 60.0
    if args.wedge_axis is None:
        args.wedge_axis = sc.wedge_axis if sc else "x"
    spectrum = args.alpha
    if args.noise_reference:
        spectrum = extract_radial_spectrum(_read_map(args.noise_reference))
    spec = GridSpec(dims, args.spacing)
    cfg = SimulationConfig(spec, fwhm=args.fwhm, signal_amplification=args.amplification, noise_level=args.noise,
                           noise_spectrum=spectrum, wedge_half_angle=args.wedge, wedge_axis=args.wedge_axis,
                           rng_seed=args.seed, threads=args.threads)
    timings["setup"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    grid = simulate_tomogram(truth, cfg)
    timings["simulate"] = time.perf_counter() - t1
    write_map(grid, args.output)
    if args.truth_out:
        write_traces(args.truth_out, truth)
    man = RunManifest("simulate", _params(args), {"traces": args.traces, "noise_reference": args.noise_reference},
                      {"map": args.output, "truth": args.truth_out}, rng_seed=args.seed, timings=timings)
    report = {"dims": list(dims), "filaments": len(truth), "noise_level": args.noise}
    _emit(args, man, report, f"wrote {args.output} ({len(truth)} filaments, noise {args.noise})", args.output)
    return 0


def cmd_trace_spaghetti(args):
    grid = _read_map(args.input)
    cfg = SpaghettiConfig(l=args.len, axis=args.axis, blend=args.blend, enhance=not args.no_enhance,
                          collinear_angle=args.collinear_angle, collinear_gap=args.collinear_gap,
                          isolation_radius=args.isolation_radius, isolation_min_neighbors=args.isolation_min,
                          backward_angle=args.backward_angle, extension_cap=args.extension_cap,
                          overlap_fraction=args.overlap, threads=args.threads)
    res = trace_spaghetti(grid, cfg)
    write_traces(args.output, res.traces)
    if args.enhanced_out and res.enhanced is not None:
        write_map(res.enhanced, args.enhanced_out)
    diag = dict(res.diagnostics)
    timings = diag.pop("timings", {})
    man = RunManifest("trace-spaghetti", _params(args), {"map": args.input},
                      {"traces": args.output, "enhanced": args.enhanced_out}, timings=timings)
    report = {"traces": len(res.traces), "threshold_bin": res.threshold_bin, "diagnostics": diag}
    text = f"{len(res.traces)} filaments traced (threshold bin {res.threshold_bin})"
    _emit(args, man, report, text, args.output)
    return 0


def _histogram_text(cfss, bins=10):
    npd = np.array([c.npd for c in cfss])
    counts, edges = np.histogram(npd, bins=bins, range=(0.0, 1.0))
    width = max(1, counts.max()) if len(counts) else 1
    lines = ["NPD histogram:"]
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        lines.append(f"  [{a:.1f}, {b:.1f}) {c:8d} {'#' * int(round(40 * c / width))}")
    pct = npd_percentiles(cfss)
    lines.append("  percentiles: " + " ".join(f"p{int(round(100 * k))}={v:.3f}" for k, v in pct.items()))
    return "\n".join(lines), counts, pct


def cmd_trace_struwwel(args):
    if str(args.thr).lower() == "auto":
        thr = None
    else:
        try:
            thr = float(args.thr)
        except ValueError:
            raise UsageError(f"-thr must be a number in [0, 1] or 'auto', got {args.thr!r}") from None
        if not 0.0 <= thr <= 1.0:
            raise UsageError("-thr must be in [0, 1]")
    grid = _read_map(args.input)
    cfg = StruwwelConfig(thr=thr, l=args.len, gap=args.gap, ang=args.ang, backward_angle=args.backward_angle,
                         threads=args.threads)
    res = trace_struwwel(grid, cfg)
    write_traces(args.output, res.filaments)
    if args.pruning_out:
        write_map(res.pruning_map, args.pruning_out)
    diag = dict(res.diagnostics)
    timings = diag.pop("timings", {})
    report = {"filaments": len(res.filaments), "diagnostics": diag}
    text = f"{len(res.filaments)} filaments traced (thr {diag['thr']:.4f})"
    if args.report_percentiles:
        hist, counts, pct = _histogram_text(res.screened)
        report["npd_histogram"] = counts.tolist()
        report["npd_percentiles"] = {str(k): v for k, v in pct.items()}
        text = hist + "\n" + text
    man = RunManifest("trace-struwwel", _params(args), {"map": args.input},
                      {"traces": args.output, "pruning_map": args.pruning_out}, timings=timings)
    _emit(args, man, report, text, args.output)
    return 0


def cmd_trace_bundle(args):
    grid = _read_map(args.input)
    seeds_tr = _read_traces(args.seeds, min_points=1)
    seeds = grid.to_voxel(np.concatenate([t.points[:1] for t in seeds_tr])) if seeds_tr else np.zeros((0, 3))
    if args.spacing_vox is not None:
        spacing = args.spacing_vox
    else:
        voxel_nm = args.voxel_nm if args.voxel_nm is not None else grid.spacing / 10.0
        spacing = args.spacing_nm / voxel_nm
    cfg = BundleConfig(slice_stride=args.stride, slab=args.slab, half_window=args.window,
                       marker_interval=args.marker_interval, search_radius=args.search_radius, spacing=spacing,
                       sigma=args.sigma, orientation=args.orientation, mode=args.mode,
                       average=not args.no_average, pre_gauss=args.pre_gauss)
    t0 = time.perf_counter()
    errors: List = []
    traces = run_bundletrac(grid, seeds, cfg, errors=errors)
    for sid, msg in errors:
        sys.stderr.write(f"seed {sid}: {msg}\n")
    for t in traces:
        t.id = seeds_tr[t.id].id
    write_traces(args.output, traces)
    man = RunManifest("trace-bundle", {**_params(args), "spacing_voxels": spacing}, {"map": args.input,
                      "seeds": args.seeds}, {"traces": args.output}, timings={"trace": time.perf_counter() - t0})
    report = {"traces": len(traces), "seed_errors": [list(e) for e in errors], "spacing_voxels": spacing}
    _emit(args, man, report, f"{len(traces)} filaments traced, {len(errors)} seeds rejected", args.output)
    return 0


def _eval_input(path, spec):
    if _is_map(path):
        return _read_map(path), True
    return _read_traces(path), False


def cmd_eval(args):
    ax = "xyz".index(args.axis)
    spec = None
    if args.like:
        spec = GridSpec.of(_read_map(args.like))
    elif args.dims:
        spec = GridSpec(tuple(args.dims), args.spacing)
    pred, pred_map = _eval_input(args.pred, spec)
    truth, truth_map = _eval_input(args.truth, spec)
    if args.metric == "f1":
        if spec is None:
            if pred_map or truth_map:
                spec = GridSpec.of(pred if pred_map else truth)
            else:
                pts = np.concatenate([t.points for t in list(pred) + list(truth)])
                spec = GridSpec(tuple(int(np.ceil(v / args.spacing)) + 4 for v in pts.max(axis=0)), args.spacing)
        rep = voxel_f1(pred, truth, args.neighborhood, spec=spec, dilate=not args.no_dilate)
        report = rep.as_dict()
        text = str(rep)
    else:
        if pred_map or truth_map:
            raise UsageError("cross-distance needs trace files, not maps")
        per = []
        by_id = {p.id: p for p in pred}
        for t in truth:
            cands = [by_id[t.id]] if args.pairing == "id" and t.id in by_id else list(pred)
            best = None
            for p in cands:
                try:
                    d = cross_distance(p, t, axis=ax, spacing=args.spacing)
                except ValueError:
                    continue
                best = d if best is None else min(best, d)
            if best is not None:
                per.append((t.id, best))
        mean = float(np.mean([d for _, d in per])) if per else None
        report = {"per_filament": [{"id": i, "cd": d} for i, d in per], "mean": mean,
                  "unmatched": len(truth) - len(per)}
        text = "\n".join(f"{i}\t{d:.4f}" for i, d in per) + (f"\nmean\t{mean:.4f}" if mean is not None else "")
    if args.output:
        Path(args.output).write_text(json.dumps({"schema": REPORT_SCHEMA, "result": report}, indent=2,
                                                default=_jsonable) + "\n")
    man = RunManifest("eval", _params(args), {"pred": args.pred, "truth": args.truth}, {"report": args.output})
    _emit(args, man, report, text, args.output)
    return 0


def _parse_range(text):
    try:
        a, b = text.split("-", 1)
        return int(a), int(b)
    except ValueError:
        raise UsageError(f"bad helix range {text!r}; expected START-END") from None


def cmd_helixfit(args):
    grid = _read_map(args.map)
    try:
        model_text = Path(args.model).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read model {args.model}: {exc.strerror or exc}") from None
    if args.all_helices_from:
        try:
            helices = parse_helix_annotations(Path(args.all_helices_from).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read annotations: {exc.strerror or exc}") from None
        if args.chain:
            helices = [h for h in helices if h[0] == args.chain]
    else:
        if not args.chain:
            raise UsageError("--chain is required with --helix")
        helices = [(args.chain, *_parse_range(h)) for h in args.helix]
    if not helices:
        raise UsageError("no helices selected")
    rows, weighted = [], []
    t0 = time.perf_counter()
    for chain, a, b in helices:
        model = parse_calpha(model_text, chain, (a, b))
        rep = helix_f1(grid, central_axis(model), n_thresholds=args.thresholds)
        rows.append({"chain": chain, "start": a, "end": b, "residues": len(model), **rep.as_dict()})
        weighted.append((len(model), rep))
    score = chain_score(weighted)
    report = {"helices": rows, "chain_score": score}
    if args.csv:
        import csv

        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    if args.output:
        Path(args.output).write_text(json.dumps({"schema": REPORT_SCHEMA, "result": report}, indent=2) + "\n")
    text = "\n".join(f"{r['chain']} {r['start']}-{r['end']}: F1={r['f1']:.3f} Pden={r['pden']:.3f} "
                     f"Rmod={r['rmod']:.3f}" for r in rows) + f"\nweighted F1 {score:.3f}"
    man = RunManifest("helixfit", _params(args), {"map": args.map, "model": args.model},
                      {"csv": args.csv, "report": args.output}, timings={"fit": time.perf_counter() - t0})
    _emit(args, man, report, text, args.output or args.csv)
    return 0


def cmd_bench(args):
    from .bench import Scenario

    default = {"spaghetti": "bundle", "struwwel": "network", "bundle": "hex"}[args.tracer]
    sc = SCENARIOS[default]
    over = {}
    if args.phantom_seed is not None:
        over["layout_seed"] = args.phantom_seed
    if args.sim_seed is not None:
        over["sim_seed"] = args.sim_seed
    if args.dims is not None:
        over["dims"] = tuple(args.dims)
    if over:
        sc = Scenario(**{**asdict(sc), **over})
    t0 = time.perf_counter()
    rows = run_bench(args.tracer, args.noise, args.variant, scenario=sc, threads=args.threads)
    table = format_table(rows, args.format, timings=not args.no_timings)
    if args.output:
        Path(args.output).write_text(table if table.endswith("\n") else table + "\n")
    man = RunManifest("bench", _params(args), {}, {"table": args.output}, rng_seed=sc.sim_seed,
                      timings={"bench": time.perf_counter() - t0})
    report = {"rows": [asdict(r) for r in rows]}
    _emit(args, man, report, "" if args.json else table.rstrip("\n"), args.output)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "trace-spaghetti": cmd_trace_spaghetti,
    "trace-struwwel": cmd_trace_struwwel,
    "trace-bundle": cmd_trace_bundle,
    "eval": cmd_eval,
    "helixfit": cmd_helixfit,
    "bench": cmd_bench,
}

_USER_ERRORS = (UsageError, MapFormatError, TraceFormatError, PdbParseError, EmptyModelError, OSError, ValueError)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and dispatch; returns the exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.threads < 1:
        sys.stderr.write("filtrace: error: --threads must be >= 1\n")
        return 1
    try:
        return COMMANDS[args.subcommand](args)
    except _USER_ERRORS as exc:
        sys.stderr.write(f"filtrace {args.subcommand}: error: {exc}\n")
        return 1
    except Exception:  # noqa: BLE001 - anything else is our bug
        sys.stderr.write("filtrace: internal error\n" + traceback.format_exc())
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
