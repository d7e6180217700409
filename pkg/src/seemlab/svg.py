"""Minimal SVG emission for secondary plot artifacts (no plotting deps).

CSV files are the source of truth; these charts exist so a run directory
can be eyeballed. Line charts get log-y support for diverging quantities;
heatmaps use a blue-white-red diverging scale centered at zero.
"""

from __future__ import annotations

import math

import numpy as np

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 60, 16, 28, 40
_COLORS = ("#1f5fbf", "#c23628", "#2d8f4e", "#8b3fb8", "#b07d10", "#3aa0a8")


def _finite_pairs(xs, ys):
    pts = [(float(x), float(y)) for x, y in zip(xs, ys)]
    return [(x, y) for x, y in pts if math.isfinite(x) and math.isfinite(y)]


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * span:
        out.append(t)
        t += step
    return out


def line_chart(
    series: dict[str, tuple], title: str = "", x_label: str = "", y_label: str = "",
    log_y: bool = False,
) -> str:
    """Polyline chart; `series` maps label -> (xs, ys)."""
    cleaned = {}
    for label, (xs, ys) in series.items():
        pts = _finite_pairs(xs, ys)
        if log_y:
            pts = [(x, math.log10(y)) for x, y in pts if y > 0.0]
        if pts:
            cleaned[label] = pts
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
    ]
    if not cleaned:
        parts.append(f'<text x="{_W / 2}" y="{_H / 2}" text-anchor="middle">no finite data</text></svg>')
        return "".join(parts)
    all_x = [x for pts in cleaned.values() for x, _ in pts]
    all_y = [y for pts in cleaned.values() for _, y in pts]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return _MT + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts.append(
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>'
    )
    for t in _ticks(x_lo, x_hi):
        parts.append(
            f'<line x1="{px(t):.1f}" y1="{_MT + ph}" x2="{px(t):.1f}" y2="{_MT + ph + 4}" stroke="#999"/>'
            f'<text x="{px(t):.1f}" y="{_MT + ph + 16}" text-anchor="middle">{t:g}</text>'
        )
    for t in _ticks(y_lo, y_hi):
        label = f"1e{t:g}" if log_y else f"{t:g}"
        parts.append(
            f'<line x1="{_ML - 4}" y1="{py(t):.1f}" x2="{_ML}" y2="{py(t):.1f}" stroke="#999"/>'
            f'<text x="{_ML - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{label}</text>'
        )
    if x_label:
        parts.append(f'<text x="{_ML + pw / 2}" y="{_H - 6}" text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(
            f'<text x="14" y="{_MT + ph / 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {_MT + ph / 2})">{y_label}</text>'
        )
    for i, (label, pts) in enumerate(cleaned.items()):
        color = _COLORS[i % len(_COLORS)]
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_ML + 8}" y="{_MT + 16 + 14 * i}" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "".join(parts)


def _diverging_color(v: float) -> str:
    # v in [-1, 1]: blue (negative) -> white -> red (positive)
    v = max(-1.0, min(1.0, v))
    if v >= 0:
        r, g, b = 255, round(255 * (1 - v * 0.85)), round(255 * (1 - v * 0.85))
    else:
        r, g, b = round(255 * (1 + v * 0.85)), round(255 * (1 + v * 0.85)), 255
    return f"rgb({r},{g},{b})"


def heatmap(values, xs, ys, title: str = "", marker=None) -> str:
    """Grid heatmap on a diverging scale; `marker` draws a cross at (x, y)."""
    values = np.asarray(values, dtype=np.float64)
    n_x, n_y = values.shape
    side = 480
    cell_w, cell_h = side / n_x, side / n_y
    w, h = side + 80, side + 60
    vmax = float(np.max(np.abs(values))) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
    ]
    x_lo, x_hi = float(xs[0]), float(xs[-1])
    y_lo, y_hi = float(ys[0]), float(ys[-1])
    ox, oy = 50, 30
    for i in range(n_x):
        for j in range(n_y):
            color = _diverging_color(values[i, j] / vmax)
            # row i = x axis, col j = y axis; y grows upward
            parts.append(
                f'<rect x="{ox + i * cell_w:.2f}" y="{oy + (n_y - 1 - j) * cell_h:.2f}" '
                f'width="{cell_w + 0.5:.2f}" height="{cell_h + 0.5:.2f}" fill="{color}"/>'
            )
    parts.append(
        f'<rect x="{ox}" y="{oy}" width="{side}" height="{side}" fill="none" stroke="#777"/>'
    )
    parts.append(f'<text x="{ox}" y="{oy + side + 16}" text-anchor="middle">{x_lo:g}</text>')
    parts.append(f'<text x="{ox + side}" y="{oy + side + 16}" text-anchor="middle">{x_hi:g}</text>')
    parts.append(f'<text x="{ox - 6}" y="{oy + side}" text-anchor="end">{y_lo:g}</text>')
    parts.append(f'<text x="{ox - 6}" y="{oy + 10}" text-anchor="end">{y_hi:g}</text>')
    if marker is not None:
        mx = ox + (marker[0] - x_lo) / (x_hi - x_lo) * side
        my = oy + side - (marker[1] - y_lo) / (y_hi - y_lo) * side
        parts.append(
            f'<path d="M {mx - 5} {my} H {mx + 5} M {mx} {my - 5} V {my + 5}" '
            f'stroke="black" stroke-width="1.5" fill="none"/>'
        )
    parts.append("</svg>")
    return "".join(parts)
