"""Minimal SVG line plots (no plotting dependency)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def line_plot(series, title: str, xlabel: str, ylabel: str, logx: bool = False) -> str:
    """Render ``{name: [(x, y, lo, hi), ...]}`` as an SVG document.

    ``lo``/``hi`` may be ``None``; when present a shaded band is drawn.
    """
    W, H, L, R, T, B = 720, 440, 70, 190, 40, 50
    pts = [p for s in series.values() for p in s]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}"></svg>\n'
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    xs = [tx(p[0]) for p in pts]
    ys = [v for p in pts for v in (p[1], p[2], p[3]) if v is not None]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def X(v):
        return L + (tx(v) - x0) / (x1 - x0) * (W - L - R)

    def Y(v):
        return H - B - (v - y0) / (y1 - y0) * (H - T - B)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2 - R / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
        f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(T + H - B) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{L - 6}" y="{Y(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        xv = x0 + (x1 - x0) * i / 4
        lab = 10**xv if logx else xv
        xp = L + (xv - x0) / (x1 - x0) * (W - L - R)
        out.append(f'<text x="{xp:.1f}" y="{H - B + 16}" text-anchor="middle">{lab:.3g}</text>')
    if y0 < 0 < y1:
        out.append(
            f'<line x1="{L}" y1="{Y(0):.1f}" x2="{W - R}" y2="{Y(0):.1f}" '
            'stroke="#999" stroke-dasharray="4 3"/>'
        )
    for j, (name, s) in enumerate(series.items()):
        col = PALETTE[j % len(PALETTE)]
        s = sorted(s, key=lambda p: p[0])
        band = [p for p in s if p[2] is not None and p[3] is not None]
        if len(band) >= 2:
            poly = [f"{X(p[0]):.1f},{Y(p[3]):.1f}" for p in band]
            poly += [f"{X(p[0]):.1f},{Y(p[2]):.1f}" for p in reversed(band)]
            out.append(f'<polygon points="{" ".join(poly)}" fill="{col}" fill-opacity="0.18" stroke="none"/>')
        path = " ".join(f"{X(p[0]):.1f},{Y(p[1]):.1f}" for p in s)
        out.append(f'<polyline points="{path}" fill="none" stroke="{col}" stroke-width="1.6"/>')
        for p in s:
            out.append(f'<circle cx="{X(p[0]):.1f}" cy="{Y(p[1]):.1f}" r="2.5" fill="{col}"/>')
        ly = T + 14 * j + 10
        out.append(f'<rect x="{W - R + 10}" y="{ly - 8}" width="10" height="10" fill="{col}"/>')
        out.append(f'<text x="{W - R + 25}" y="{ly + 1}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
