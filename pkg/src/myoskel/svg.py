"""Minimal SVG line-plot writer (no plotting dependency)."""

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 720, 360
MARGIN = (60, 20, 30, 45)  # left, right, top, bottom


def _nice_ticks(lo, hi, n=5):
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10)), key=lambda s: abs(s - raw))
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt(v):
    return f"{v:.4g}"


def line_plot(title, x, series, xlabel="t [s]", ylabel="", hlines=()):
    """SVG text for one axes.

    ``series`` is a list of (label, y) pairs sharing ``x``; ``hlines`` is a
    list of (label, value) horizontal reference lines drawn dashed.  NaN
    samples break a line.
    """
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(y, dtype=float) for _, y in series]
    vals = [v for y in ys for v in y[np.isfinite(y)]] + [v for _, v in hlines if math.isfinite(v)]
    x_fin = x[np.isfinite(x)]
    x0, x1 = (float(x_fin.min()), float(x_fin.max())) if x_fin.size else (0.0, 1.0)
    y0, y1 = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        pad = max(abs(y0) * 0.05, 1e-9)
        y0, y1 = y0 - pad, y1 + pad
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (y1 - v) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for v in _nice_ticks(x0, x1):
        out.append(f'<line x1="{px(v):.2f}" y1="{top + ph}" x2="{px(v):.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(v):.2f}" y="{top + ph + 16}" text-anchor="middle">{_fmt(v)}</text>')
    for v in _nice_ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{py(v):.2f}" x2="{left}" y2="{py(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{py(v) + 4:.2f}" text-anchor="end">{_fmt(v)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">{escape(ylabel)}</text>')
    legend = []
    for i, ((label, _), y) in enumerate(zip(series, ys)):
        color = PALETTE[i % len(PALETTE)]
        for seg in _segments(x, y):
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in seg)
            out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        legend.append((label, color, ""))
    for j, (label, v) in enumerate(hlines):
        color = PALETTE[(len(series) + j) % len(PALETTE)]
        out.append(f'<line class="reference" data-label="{escape(label)}" data-value="{v!r}" x1="{left}" '
                   f'y1="{py(v):.2f}" x2="{left + pw}" y2="{py(v):.2f}" stroke="{color}" stroke-dasharray="6,4"/>')
        legend.append((label, color, ' stroke-dasharray="6,4"'))
    for i, (label, color, dash) in enumerate(legend):
        ly = top + 12 + 14 * i
        out.append(f'<line x1="{left + pw - 110}" y1="{ly - 4}" x2="{left + pw - 90}" y2="{ly - 4}" '
                   f'stroke="{color}"{dash}/>')
        out.append(f'<text x="{left + pw - 86}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _segments(x, y):
    seg = []
    for a, b in zip(x, y):
        if math.isfinite(a) and math.isfinite(b):
            seg.append((a, b))
        elif seg:
            yield seg
            seg = []
    if seg:
        yield seg


def write_svg(path, text):
    with open(path, "w") as fh:
        fh.write(text)
