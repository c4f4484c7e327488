"""Reading and writing filament traces.

Text format: each filament starts with a ``#filament <id>`` line followed
by one ``x y z`` line per point (physical units).  Blank lines and other
``#`` comments are ignored.

Chimera marker files (``.cmm``): one ``<marker>`` per point; consecutive
markers of a filament are joined by ``<link>`` elements.  On read,
filaments are recovered as the connected chains of the link graph.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .phantom import FilamentTrace

__all__ = ["TraceFormatError", "read_traces", "write_traces", "parse_traces_text", "format_traces_text"]


class TraceFormatError(ValueError):
    pass


def parse_traces_text(text: str, min_points: int = 2) -> List[FilamentTrace]:
    """Parse the block text format.  ``min_points=1`` allows seed files."""
    blocks = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0].lower() == "filament":
                try:
                    fid = int(parts[1]) if len(parts) > 1 else len(blocks)
                except ValueError as exc:
                    raise TraceFormatError(f"line {lineno}: bad filament id") from exc
                current = (fid, [])
                blocks.append(current)
            continue
        fields = line.replace(",", " ").split()
        if len(fields) != 3:
            raise TraceFormatError(f"line {lineno}: expected 'x y z', got {raw!r}")
        try:
            pt = [float(v) for v in fields]
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from exc
        if current is None:
            current = (len(blocks), [])
            blocks.append(current)
        current[1].append(pt)

    out = []
    for fid, pts in blocks:
        if len(pts) < min_points:
            raise TraceFormatError(f"filament {fid} has {len(pts)} point(s)")
        if len(pts) == 1:
            out.append(_SeedTrace(np.asarray(pts), fid))
        else:
            out.append(FilamentTrace(np.asarray(pts), fid))
    return out


class _SeedTrace(FilamentTrace):
    """Single-point record used for seed files."""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.id = int(self.id)


def format_traces_text(traces: Sequence[FilamentTrace]) -> str:
    lines = []
    for tr in traces:
        lines.append(f"#filament {tr.id}")
        lines.extend(f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in tr.points)
    return "\n".join(lines) + ("\n" if lines else "")


def _read_cmm(path) -> List[FilamentTrace]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise TraceFormatError(f"invalid marker XML: {exc}") from exc
    markers = {}
    notes = {}
    for m in root.iter("marker"):
        markers[int(m.get("id"))] = [float(m.get(k)) for k in ("x", "y", "z")]
        notes[int(m.get("id"))] = m.get("note")
    adj = {k: [] for k in markers}
    for link in root.iter("link"):
        a, b = int(link.get("id1")), int(link.get("id2"))
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    seen = set()
    traces = []
    for start in sorted(markers):
        if start in seen or len(adj[start]) > 1:
            continue
        chain = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [n for n in adj[cur] if n != prev and n not in seen]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            chain.append(cur)
            seen.add(cur)
        if len(chain) >= 2:
            note = notes[chain[0]]
            fid = int(note) if note is not None and note.lstrip("-").isdigit() else len(traces)
            traces.append(FilamentTrace(np.array([markers[i] for i in chain]), fid))
    return traces


def _write_cmm(path, traces):
    root = ET.Element("marker_set", name="filaments")
    mid = 0
    for tr in traces:
        first = mid + 1
        for x, y, z in tr.points:
            mid += 1
            ET.SubElement(root, "marker", id=str(mid), x=f"{x:.6f}", y=f"{y:.6f}", z=f"{z:.6f}",
                          r="1", g="1", b="0", radius="0.5", note=str(tr.id))
        for a in range(first, mid):
            ET.SubElement(root, "link", id1=str(a), id2=str(a + 1), r="1", g="1", b="0", radius="0.25")
    ET.ElementTree(root).write(path, encoding="unicode")


def read_traces(path, min_points: int = 2) -> List[FilamentTrace]:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".cmm" or text.lstrip().startswith("<"):
        return _read_cmm(path)
    return parse_traces_text(text, min_points=min_points)


def write_traces(path, traces: Sequence[FilamentTrace]) -> None:
    path = Path(path)
    if path.suffix.lower() == ".cmm":
        _write_cmm(path, traces)
    else:
        path.write_text(format_traces_text(traces))
