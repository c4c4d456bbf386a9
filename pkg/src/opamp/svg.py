"""Minimal dependency-free SVG line and bar charts for experiment summaries.

Output is a pure function of the inputs (fixed number formatting, no
timestamps), so re-running an experiment reproduces the files byte for byte.
"""

from __future__ import annotations

import math
from html import escape
from pathlib import Path
from typing import Mapping, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 560, 360
MARGIN = dict(left=60, right=150, top=40, bottom=50)


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    w, h = WIDTH, HEIGHT
    m = MARGIN
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{(m["left"] + w - m["right"]) / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{(m["left"] + w - m["right"]) / 2}" y="{h - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{(m["top"] + h - m["bottom"]) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 15 {(m["top"] + h - m["bottom"]) / 2})">{escape(ylabel)}</text>',
    ]


class _Axes:
    def __init__(self, xlo, xhi, ylo, yhi):
        self.xlo, self.xhi = xlo, (xhi if xhi > xlo else xlo + 1.0)
        self.ylo, self.yhi = ylo, (yhi if yhi > ylo else ylo + 1.0)
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def x(self, v: float) -> float:
        return self.x0 + (v - self.xlo) / (self.xhi - self.xlo) * (self.x1 - self.x0)

    def y(self, v: float) -> float:
        return self.y0 + (v - self.ylo) / (self.yhi - self.ylo) * (self.y1 - self.y0)

    def grid(self, xticks: Sequence[tuple[float, str]]) -> list[str]:
        out = [f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>',
               f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>']
        for v in _ticks(self.ylo, self.yhi):
            y = round(self.y(v), 2)
            out.append(f'<line x1="{self.x0}" y1="{y}" x2="{self.x1}" y2="{y}" stroke="#ddd"/>')
            out.append(f'<text x="{self.x0 - 6}" y="{y + 4}" text-anchor="end">{_fmt(v)}</text>')
        for v, label in xticks:
            x = round(self.x(v), 2)
            out.append(f'<text x="{x}" y="{self.y0 + 16}" text-anchor="middle">{escape(label)}</text>')
        return out


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    x = WIDTH - MARGIN["right"] + 15
    for i, name in enumerate(names):
        y = MARGIN["top"] + 16 * i
        out.append(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + 15}" y="{y + 9}">{escape(name)}</text>')
    return out


def _y_range(values: Sequence[float]) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(0.0, min(finite)), max(finite)
    return lo, (hi if hi > lo else lo + 1.0)


def line_chart(
    series: Mapping[str, Sequence[tuple[float, float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    categorical_x: bool = False,
) -> str:
    """One polyline per named series of ``(x, y)`` points.

    With ``categorical_x`` the distinct x values are spaced evenly (useful for
    a K grid such as 1, 5, 10, 20).
    """
    xs = sorted({p[0] for pts in series.values() for p in pts})
    ys = [p[1] for pts in series.values() for p in pts]
    pos = {x: (i if categorical_x else x) for i, x in enumerate(xs)}
    if xs:
        ax = _Axes(min(pos.values()), max(pos.values()), *_y_range(ys))
    else:
        ax = _Axes(0.0, 1.0, 0.0, 1.0)
    parts = _frame(title, xlabel, ylabel) + ax.grid([(pos[x], _fmt(x)) for x in xs])
    for i, (name, pts) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        coords = [(round(ax.x(pos[x]), 2), round(ax.y(y), 2)) for x, y in sorted(pts) if math.isfinite(y)]
        if len(coords) > 1:
            path = " ".join(f"{x},{y}" for x, y in coords)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="2"/>')
        parts += [f'<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>' for x, y in coords]
    parts += _legend(list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(
    groups: Sequence[str],
    series: Mapping[str, Sequence[float]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> str:
    """Grouped bars: ``series[name][i]`` is the bar for ``groups[i]``."""
    values = [v for vals in series.values() for v in vals]
    ax = _Axes(-0.5, len(groups) - 0.5, *_y_range(values))
    parts = _frame(title, xlabel, ylabel) + ax.grid([(i, g) for i, g in enumerate(groups)])
    n = max(len(series), 1)
    slot = (ax.x(1) - ax.x(0)) * 0.8 / n
    for j, (name, vals) in enumerate(series.items()):
        colour = PALETTE[j % len(PALETTE)]
        for i, v in enumerate(vals):
            if not math.isfinite(v):
                continue
            left = ax.x(i) - slot * n / 2 + j * slot
            top, base = ax.y(max(v, 0.0)), ax.y(min(v, 0.0))
            parts.append(
                f'<rect x="{round(left, 2)}" y="{round(top, 2)}" width="{round(slot, 2)}" '
                f'height="{round(base - top, 2)}" fill="{colour}"/>'
            )
    parts += _legend(list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path: str | Path, svg: str) -> None:
    Path(path).write_text(svg, encoding="utf-8")
