"""Minimal deterministic SVG plots: heatmaps, spectra and convergence curves.

Output depends only on the input numbers (fixed number formatting, no
timestamps or random ids), so identical inputs give identical bytes.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import UsageError

INF_COLOR = "#d62728"
NAN_COLOR = "#bdbdbd"
LINE_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b")
FONT = 'font-family="sans-serif" font-size="11"'


def _num(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.3g}"


def _lerp_color(t: float) -> str:
    """Linear white-to-dark-blue map for ``t`` in [0, 1]."""
    t = min(max(t, 0.0), 1.0)
    lo, hi = (255, 255, 255), (8, 48, 107)
    r, g, b = (round(a + (c - a) * t) for a, c in zip(lo, hi))
    return f"#{r:02x}{g:02x}{b:02x}"


def _document(width, height, body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(width)}" height="{_num(height)}" '
            f'viewBox="0 0 {_num(width)} {_num(height)}">\n')
    return head + '<rect width="100%" height="100%" fill="#ffffff"/>\n' + "".join(body) + "</svg>\n"


def _write(text: str, path) -> str:
    if path is not None:
        try:
            Path(path).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc}") from exc
    return text


def heatmap_svg(matrix, path=None, title="", row_labels=None, col_labels=None, cell=28.0) -> str:
    """Heatmap with a linear color map over the finite entries and a legend.

    ``inf`` cells are drawn in a distinguished color, ``nan`` cells in grey.
    """
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    row_labels = row_labels or [str(i + 1) for i in range(rows)]
    col_labels = col_labels or [str(j + 1) for j in range(cols)]
    finite = m[np.isfinite(m)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    left, top = 40.0, 40.0
    legend_x = left + cols * cell + 20.0
    width = legend_x + 90.0
    height = max(top + rows * cell + 30.0, top + 170.0)
    body = [f'<text x="{_num(left)}" y="20" {FONT}>{escape(title)}</text>\n']
    for j, lab in enumerate(col_labels):
        body.append(f'<text x="{_num(left + (j + 0.5) * cell)}" y="{_num(top - 6)}" {FONT} '
                    f'text-anchor="middle">{escape(lab)}</text>\n')
    for i in range(rows):
        y = top + i * cell
        body.append(f'<text x="{_num(left - 6)}" y="{_num(y + cell / 2 + 4)}" {FONT} '
                    f'text-anchor="end">{escape(row_labels[i])}</text>\n')
        for j in range(cols):
            v = m[i, j]
            if math.isnan(v):
                color = NAN_COLOR
            elif math.isinf(v):
                color = INF_COLOR
            else:
                color = _lerp_color((v - lo) / span)
            body.append(f'<rect x="{_num(left + j * cell)}" y="{_num(y)}" width="{_num(cell)}" '
                        f'height="{_num(cell)}" fill="{color}"><title>{_label(v)}</title></rect>\n')
    steps = 5
    bar_h = 20.0
    for k in range(steps):
        t = 1.0 - k / (steps - 1)
        y = top + k * bar_h
        body.append(f'<rect x="{_num(legend_x)}" y="{_num(y)}" width="16" height="{_num(bar_h)}" '
                    f'fill="{_lerp_color(t)}"/>\n')
        body.append(f'<text x="{_num(legend_x + 22)}" y="{_num(y + 14)}" {FONT}>{_label(lo + t * span)}</text>\n')
    y = top + steps * bar_h + 10
    body.append(f'<rect x="{_num(legend_x)}" y="{_num(y)}" width="16" height="16" fill="{INF_COLOR}"/>\n')
    body.append(f'<text x="{_num(legend_x + 22)}" y="{_num(y + 12)}" {FONT}>inf</text>\n')
    body.append(f'<rect x="{_num(legend_x)}" y="{_num(y + 22)}" width="16" height="16" fill="{NAN_COLOR}"/>\n')
    body.append(f'<text x="{_num(legend_x + 22)}" y="{_num(y + 34)}" {FONT}>undefined</text>\n')
    return _write(_document(width, height, body), path)


def _axes(body, left, top, w, h, x_lo, x_hi, y_lo, y_hi, x_label, y_label):
    body.append(f'<line x1="{_num(left)}" y1="{_num(top + h)}" x2="{_num(left + w)}" y2="{_num(top + h)}" '
                f'stroke="#000000"/>\n')
    body.append(f'<line x1="{_num(left)}" y1="{_num(top)}" x2="{_num(left)}" y2="{_num(top + h)}" '
                f'stroke="#000000"/>\n')
    for t in (0.0, 0.5, 1.0):
        yv = y_lo + t * (y_hi - y_lo)
        y = top + h - t * h
        body.append(f'<text x="{_num(left - 4)}" y="{_num(y + 4)}" {FONT} text-anchor="end">{_label(yv)}</text>\n')
    body.append(f'<text x="{_num(left + w / 2)}" y="{_num(top + h + 30)}" {FONT} '
                f'text-anchor="middle">{escape(x_label)}</text>\n')
    body.append(f'<text x="12" y="{_num(top + h / 2)}" {FONT} transform="rotate(-90 12 {_num(top + h / 2)})" '
                f'text-anchor="middle">{escape(y_label)}</text>\n')


def _range(values):
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=np.float64)
    if not v.size:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def spectrum_svg(series: dict, path=None, title="", y_label="manifold entropy [nats]") -> str:
    """One polyline with markers per named series, plotted against sorted rank."""
    left, top, w, h = 60.0, 30.0, 360.0, 220.0
    all_vals = [float(v) for vals in series.values() for v in vals]
    y_lo, y_hi = _range(all_vals)
    n = max((len(v) for v in series.values()), default=1)
    body = [f'<text x="{_num(left)}" y="18" {FONT}>{escape(title)}</text>\n']
    _axes(body, left, top, w, h, 1, n, y_lo, y_hi, "rank", y_label)

    def px(k):
        return left + (k / (n - 1) if n > 1 else 0.5) * w

    def py(v):
        return top + h - (v - y_lo) / (y_hi - y_lo) * h

    for s, (name, vals) in enumerate(series.items()):
        color = LINE_COLORS[s % len(LINE_COLORS)]
        pts = [(px(k), py(float(v))) for k, v in enumerate(vals) if math.isfinite(float(v))]
        if pts:
            body.append(f'<polyline fill="none" stroke="{color}" points="'
                        + " ".join(f"{_num(x)},{_num(y)}" for x, y in pts) + '"/>\n')
        for x, y in pts:
            body.append(f'<circle cx="{_num(x)}" cy="{_num(y)}" r="2.5" fill="{color}"/>\n')
        body.append(f'<text x="{_num(left + w + 10)}" y="{_num(top + 14 * (s + 1))}" {FONT} '
                    f'fill="{color}">{escape(name)}</text>\n')
    return _write(_document(left + w + 140, top + h + 45, body), path)


def convergence_svg(rows, path=None, title="", y_label="std over repeats") -> str:
    """Std over repeats against sample size on log-log axes."""
    left, top, w, h = 60.0, 30.0, 360.0, 220.0
    ns = [float(r["n"]) for r in rows]
    stds = [float(r["std"]) for r in rows]
    logs = [math.log10(s) if s > 0 else float("nan") for s in stds]
    y_lo, y_hi = _range(logs)
    x_lo, x_hi = math.log10(min(ns)), math.log10(max(ns))
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    body = [f'<text x="{_num(left)}" y="18" {FONT}>{escape(title)}</text>\n']
    _axes(body, left, top, w, h, x_lo, x_hi, y_lo, y_hi, "log10 N", "log10 " + y_label)
    pts = [(left + (math.log10(n) - x_lo) / (x_hi - x_lo) * w, top + h - (v - y_lo) / (y_hi - y_lo) * h, n)
           for n, v in zip(ns, logs) if math.isfinite(v)]
    if pts:
        body.append(f'<polyline fill="none" stroke="{LINE_COLORS[0]}" points="'
                    + " ".join(f"{_num(x)},{_num(y)}" for x, y, _ in pts) + '"/>\n')
    for x, y, n in pts:
        body.append(f'<circle cx="{_num(x)}" cy="{_num(y)}" r="3" fill="{LINE_COLORS[0]}"/>\n')
        body.append(f'<text x="{_num(x)}" y="{_num(top + h + 14)}" {FONT} text-anchor="middle">{int(n)}</text>\n')
    return _write(_document(left + w + 40, top + h + 45, body), path)
