"""CSV metric tables and dependency-free SVG line charts."""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from xml.sax.saxutils import escape

from . import __version__

TRAIN_COLUMNS = ["epoch", "block", "loss", "cell_acc", "pass1", "wall_s", "samples_per_s",
                 "kind", "config_hash", "tool_version"]
STAMP = ["config_hash", "tool_version"]


class ReportError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


class MetricsLog:
    """Append-only training metrics, one row per (epoch, aligned block)."""

    def __init__(self, path, kind: str, config_hash: str):
        self.path = path
        self.kind = kind
        self.config_hash = config_hash
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(TRAIN_COLUMNS)

    def truncate_after(self, epoch: int) -> None:
        """Drop rows newer than ``epoch`` (used when resuming from an older checkpoint)."""
        rows = read_csv(self.path)
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAIN_COLUMNS)
            for r in rows:
                if int(r["epoch"]) <= epoch:
                    w.writerow([r[c] for c in TRAIN_COLUMNS])

    def append(self, epoch: int, metrics) -> None:
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for b in metrics.blocks:
                w.writerow([epoch, b.block, _fmt(b.loss), _fmt(b.cell_acc), _fmt(b.pass1), _fmt(metrics.wall_s),
                            _fmt(metrics.samples_per_s), self.kind, self.config_hash, __version__])


def write_csv(path, columns: list[str], rows: list[dict], config_hash: str) -> None:
    """Write a table; the config hash and tool version are appended to every row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns + STAMP)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns] + [config_hash, __version__])


def read_csv(path) -> list[dict[str, str]]:
    """Rows of a metrics CSV; refuses files from an incompatible tool version."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    major = __version__.split(".")[0]
    for i, r in enumerate(rows, start=2):
        tool = r.get("tool_version")
        if tool is not None and tool.split(".")[0] != major:
            raise ReportError(f"{path}:{i}: written by incompatible tool version {tool}")
        if "config_hash" in r and not r["config_hash"]:
            raise ReportError(f"{path}:{i}: missing config hash")
    return rows


# ---- SVG ------------------------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
_X_GUESSES = ["epoch", "k", "test_blocks", "m", "n", "budget"]
_SERIES_GUESSES = ["kind", "block", "label", "series"]


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def _tick_label(v: float) -> str:
    return f"{v:g}"


def line_chart(series: dict[str, list[tuple[float, float]]], x_label: str, y_label: str,
               title: str = "", width: int = 640, height: int = 400) -> str:
    """Self-contained SVG; each data point is one ``<circle class="marker">``."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ReportError("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = 64, 150, 36, 48
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for t in _nice_ticks(x0, x1):
        if x0 <= t <= x1:
            out.append(f'<line x1="{sx(t):.2f}" y1="{top}" x2="{sx(t):.2f}" y2="{top + ph}" stroke="#eee"/>')
            out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 16}" text-anchor="middle">{_tick_label(t)}</text>')
    for t in _nice_ticks(y0, y1):
        if y0 <= t <= y1:
            out.append(f'<line x1="{left}" y1="{sy(t):.2f}" x2="{left + pw}" y2="{sy(t):.2f}" stroke="#eee"/>')
            out.append(f'<text x="{left - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{_tick_label(t)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text transform="translate(16 {top + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(y_label)}</text>')
    for i, (name, data) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        data = sorted(data)
        if len(data) > 1:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in data)
            out.append(f'<polyline class="series" points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in data:
            out.append(f'<circle class="marker" cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}">'
                       f'<title>{escape(name)}: ({x:g}, {y:g})</title></circle>')
        ly = top + 12 + 16 * i
        out.append(f'<rect x="{left + pw + 12}" y="{ly - 8}" width="12" height="3" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly - 3}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, svg_path, x: str | None = None, y: str = "pass1", series: str | None = None,
             title: str | None = None) -> int:
    """Chart ``y`` against ``x`` from any metrics CSV; returns the number of markers drawn."""
    rows = read_csv(csv_path)
    if not rows:
        raise ReportError(f"{csv_path}: no rows")
    cols = list(rows[0])
    x = x or next((c for c in _X_GUESSES if c in cols), None)
    if x is None or x not in cols:
        raise ReportError(f"{csv_path}: no x column (have {', '.join(cols)})")
    if y not in cols:
        raise ReportError(f"{csv_path}: no column {y!r}")
    if series is None:
        series = next((c for c in _SERIES_GUESSES if c in cols and c != x
                       and len({r[c] for r in rows}) > 1), None)
    groups: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for r in rows:
        try:
            pt = (float(r[x]), float(r[y]))
        except ValueError as exc:
            raise ReportError(f"{csv_path}: non-numeric value in {x}/{y}") from exc
        name = f"{series}={r[series]}" if series else y
        groups[name].append(pt)
    svg = line_chart(dict(groups), x, y, title if title is not None else os.path.basename(str(csv_path)))
    with open(svg_path, "w") as fh:
        fh.write(svg)
    return sum(len(v) for v in groups.values())
