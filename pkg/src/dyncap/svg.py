"""Static SVG 1.1 line charts, no plotting dependency."""

from __future__ import annotations

from html import escape
from pathlib import Path
from typing import Sequence

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")

WIDTH, HEIGHT = 720, 480
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 50, 60


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    return [lo + i * step for i in range(n + 1)]


def line_chart(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    *,
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    diagonal: bool = False,
    markers: bool = True,
    x_range: tuple[float, float] | None = None,
    y_range: tuple[float, float] | None = None,
) -> str:
    """Render ``(name, xs, ys)`` series as an SVG document string.

    ``diagonal`` adds a gray dashed ``y = x`` reference line.
    """
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise ValueError("line_chart needs at least one point")
    x0, x1 = x_range or (min(xs_all), max(xs_all))
    y0, y1 = y_range or (min(ys_all), max(ys_all))
    if diagonal and y_range is None:
        y0, y1 = min(y0, x0), max(y1, x1)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x: float) -> float:
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{LEFT + pw / 2:.1f}" y="28" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{TOP + ph}" x2="{px(t):.2f}" y2="{TOP + ph + 5}" stroke="#333333"/>')
        out.append(f'<text x="{px(t):.2f}" y="{TOP + ph + 20}" text-anchor="middle" font-size="11">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{LEFT - 5}" y1="{py(t):.2f}" x2="{LEFT}" y2="{py(t):.2f}" stroke="#333333"/>')
        out.append(f'<text x="{LEFT - 8}" y="{py(t) + 4:.2f}" text-anchor="end" font-size="11">{t:.3g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle" font-size="13">{escape(x_label)}</text>')
    out.append(f'<text x="18" y="{TOP + ph / 2:.1f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 18 {TOP + ph / 2:.1f})">{escape(y_label)}</text>')
    if diagonal:
        lo, hi = max(x0, y0), min(x1, y1)
        out.append(f'<line x1="{px(lo):.2f}" y1="{py(lo):.2f}" x2="{px(hi):.2f}" y2="{py(hi):.2f}" '
                   'stroke="#999999" stroke-dasharray="6,4"/>')
    for k, (name, xs, ys) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        if markers:
            out += [f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>' for x, y in zip(xs, ys)]
        ly = TOP + 10 + 20 * k
        out.append(f'<line x1="{LEFT + pw + 15}" y1="{ly}" x2="{LEFT + pw + 40}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 46}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_line_chart(path, series, **kwargs) -> None:
    Path(path).write_text(line_chart(series, **kwargs))
