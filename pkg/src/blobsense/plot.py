"""SVG rendering of sensitivity-vs-FPI curves read back from CSV files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

from .froc import FrocPoint, read_curve
from .pipeline import AblationRow, read_ablation

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")

WIDTH, HEIGHT = 640, 440
LEFT, RIGHT, TOP, BOTTOM = 64, 150, 24, 52


def _ticks(hi: float, n: int = 5) -> List[float]:
    return [hi * i / n for i in range(n + 1)]


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v else "0"


def render_svg(curves: Sequence[Tuple[str, Sequence[FrocPoint]]], max_fpi: float = 10.0,
               markers: Sequence[AblationRow] = (), title: str = "") -> str:
    """One polyline per curve; points beyond ``max_fpi`` are left out.

    ``markers`` (e.g. ablation operating points) are drawn as circles in
    the colour of the curve with the same label.
    """
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(fpi):
        return LEFT + pw * fpi / max_fpi

    def sy(sens):
        return TOP + ph * (1.0 - sens)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.1f}" y="16" text-anchor="middle">{escape(title)}</text>')
    for t in _ticks(max_fpi):
        x = sx(t)
        out.append(f'<line x1="{x:.1f}" y1="{TOP}" x2="{x:.1f}" y2="{TOP + ph}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{x:.1f}" y="{TOP + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(1.0):
        y = sy(t)
        out.append(f'<line x1="{LEFT}" y1="{y:.1f}" x2="{LEFT + pw}" y2="{y:.1f}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">'
               'false positives per image</text>')
    out.append(f'<text transform="translate(16 {TOP + ph / 2:.1f}) rotate(-90)" text-anchor="middle">'
               'sensitivity</text>')

    colours = {}
    for i, (label, curve) in enumerate(curves):
        colour = PALETTE[i % len(PALETTE)]
        colours[label] = colour
        pts = sorted((p.fpi, p.sensitivity) for p in curve if p.fpi <= max_fpi)
        if pts:
            path = " ".join(f"{sx(f):.2f},{sy(s):.2f}" for f, s in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="2">'
                       f'<title>{escape(label)}</title></polyline>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly - 4}" x2="{LEFT + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly}">{escape(label)}</text>')
    for row in markers:
        if row.fpi_at_max == row.fpi_at_max and row.fpi_at_max <= max_fpi:
            colour = colours.get(row.variant, "black")
            out.append(f'<circle cx="{sx(row.fpi_at_max):.2f}" cy="{sy(row.max_sensitivity):.2f}" r="4" '
                       f'fill="{colour}"><title>{escape(row.variant)}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_files(curve_paths: Sequence[Tuple[str, str]], out_path, ablation_path: Optional[str] = None,
               max_fpi: float = 10.0, title: str = "") -> None:
    """Read curve CSVs (and optionally an ablation CSV) and write an SVG atomically."""
    curves = [(label, read_curve(path)) for label, path in curve_paths]
    markers = read_ablation(ablation_path) if ablation_path else []
    svg = render_svg(curves, max_fpi, markers, title)
    tmp = f"{out_path}.tmp"
    Path(tmp).write_text(svg, encoding="utf-8")
    os.replace(tmp, out_path)
