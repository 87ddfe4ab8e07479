"""Minimal self-contained SVG line charts (no plotting backend, byte-stable output)."""

from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 360
MARGIN = dict(left=60, right=150, top=36, bottom=44)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_chart(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str = "step",
    ylabel: str = "",
) -> str:
    """Render named (xs, ys) series. Each polyline carries its last y value in
    ``data-final`` (repr precision) so the chart can be checked against its CSV."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        out.append(
            f'<text x="{MARGIN["left"] - 6}" y="{sy(yv) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="10">{yv:.4g}</text>'
        )
        out.append(
            f'<text x="{sx(xv):.2f}" y="{HEIGHT - MARGIN["bottom"] + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{xv:.4g}</text>'
        )
    out.append(
        f'<text x="{MARGIN["left"] + pw / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">{escape(xlabel)}</text>'
    )
    if ylabel:
        out.append(
            f'<text x="14" y="{MARGIN["top"] + ph / 2:.0f}" transform="rotate(-90 14 {MARGIN["top"] + ph / 2:.0f})" text-anchor="middle" font-family="sans-serif" font-size="11">{escape(ylabel)}</text>'
        )
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        final = repr(float(ys[-1])) if len(ys) else ""
        out.append(
            f'<polyline data-series="{escape(name)}" data-final="{final}" fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'
        )
        ly = MARGIN["top"] + 14 + 16 * i
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
