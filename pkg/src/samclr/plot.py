"""Learning-curve SVG: KNN accuracy against optimization step, one series per metrics CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=150, top=24, bottom=52)


class PlotError(ValueError):
    pass


@dataclass
class Series:
    label: str
    steps: list[int]
    values: list[float]


def read_metrics(path: str | Path) -> Series:
    path = Path(path)
    steps, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or "step" not in header or "knn_acc" not in header:
            raise PlotError(f"{path}: expected a header with step and knn_acc")
        i_step, i_acc = header.index("step"), header.index("knn_acc")
        for rownum, row in enumerate(reader, 2):
            try:
                step, acc = int(row[i_step]), float(row[i_acc])
            except (IndexError, ValueError):
                raise PlotError(f"{path}: malformed row {rownum}") from None
            steps.append(step)
            values.append(acc)
    if not steps:
        raise PlotError(f"{path}: no metric rows")
    return Series(path.stem, steps, values)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step + 1e-9) + 1)]


def render_svg(series: Sequence[Series]) -> str:
    if not series:
        raise PlotError("nothing to plot")
    x_hi = max(max(s.steps) for s in series)
    x_lo = min(min(s.steps) for s in series)
    finite = [v for s in series for v in s.values if math.isfinite(v)]
    y_lo = min([0.0] + finite)
    y_hi = max([1.0] + finite)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return MARGIN["top"] + (1 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{sx(t):.2f}" y="{y0 + 18}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{x0}" y1="{sy(t):.2f}" x2="{x0 + pw}" y2="{sy(t):.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{x0 - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:.2f}</text>')
    out.append(f'<text x="{x0 + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">step</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.2f})">KNN top-1 accuracy</text>')
    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(s.steps, s.values) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = MARGIN["top"] + 16 + 20 * i
        lx = x0 + pw + 16
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}" class="legend">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
