"""Minimal deterministic SVG line charts (axes, ticks, one polyline per group)."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

__all__ = ["line_chart_svg", "plot_csv", "read_csv_columns"]

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 130, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 12))
        v += step
    return out


def _label(v: float) -> str:
    return f"{v:g}"


def line_chart_svg(series: dict[str, Sequence[tuple[float, float]]], x_label: str, y_label: str, title: str = "") -> str:
    """Render named ``(x, y)`` series. Non-finite points are dropped."""
    pts = {k: [(x, y) for x, y in v if math.isfinite(x) and math.isfinite(y)] for k, v in series.items()}
    allp = [p for v in pts.values() for p in v]
    if allp:
        x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
        y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN_T + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>')
    bottom, right = MARGIN_T + ph, MARGIN_L + pw
    out.append(f'<line x1="{MARGIN_L}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{bottom}" stroke="black"/>')
    for t in _ticks(x0, x1):
        X = _num(sx(t))
        out.append(f'<line x1="{X}" y1="{bottom}" x2="{X}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{X}" y="{bottom + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{_label(t)}</text>')
    for t in _ticks(y0, y1):
        Y = _num(sy(t))
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{Y}" x2="{MARGIN_L}" y2="{Y}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{Y}" text-anchor="end" dominant-baseline="middle" font-family="sans-serif" font-size="11">{_label(t)}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(x_label)}</text>')
    out.append(f'<text x="15" y="{MARGIN_T + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 15 {MARGIN_T + ph / 2:.2f})">{escape(y_label)}</text>')
    for i, name in enumerate(sorted(pts)):
        color = PALETTE[i % len(PALETTE)]
        line = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in sorted(pts[name]))
        if line:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{line}"/>')
        ly = MARGIN_T + 14 * i + 6
        out.append(f'<line x1="{right + 10}" y1="{ly}" x2="{right + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{right + 35}" y="{ly}" dominant-baseline="middle" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_csv_columns(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def plot_csv(path: str | Path, x: str, y: str, group: str | None = None) -> str:
    header, rows = read_csv_columns(path)
    for col in [x, y] + ([group] if group else []):
        if col not in header:
            raise KeyError(f"column {col!r} not in {path} (have: {', '.join(header)})")
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        key = r[group] if group else y
        series.setdefault(key, []).append((float(r[x]), float(r[y])))
    return line_chart_svg(series, x, y, title=Path(path).name)
