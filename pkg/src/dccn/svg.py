"""Minimal SVG heatmaps: one rectangle per cell and a colour bar."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

CELL = 14
MARGIN_LEFT = 60
MARGIN_TOP = 40
BAR_WIDTH = 14


def _lerp(a, b, t):
    return tuple(int(round(x + (y - x) * t)) for x, y in zip(a, b))


def colour(value, low, high, diverging):
    """Map ``value`` to an ``#rrggbb`` string.

    Diverging scales run blue, white, red around zero; sequential ones run
    white to dark blue.
    """
    if not np.isfinite(value):
        return "#888888"
    if diverging:
        bound = max(abs(low), abs(high)) or 1.0
        t = float(np.clip(value / bound, -1.0, 1.0))
        rgb = _lerp((255, 255, 255), (178, 24, 43), t) if t >= 0 else _lerp((255, 255, 255), (33, 102, 172), -t)
    else:
        span = (high - low) or 1.0
        t = float(np.clip((value - low) / span, 0.0, 1.0))
        rgb = _lerp((247, 251, 255), (8, 48, 107), t)
    return "#%02x%02x%02x" % rgb


def heatmap(matrix, title="", row_label="", col_label="", diverging=None, low=None, high=None):
    """Return SVG markup for a 2-D array (rows drawn top to bottom)."""
    data = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    n_rows, n_cols = data.shape
    finite = data[np.isfinite(data)]
    low = float(finite.min()) if low is None and finite.size else (0.0 if low is None else low)
    high = float(finite.max()) if high is None and finite.size else (1.0 if high is None else high)
    if diverging is None:
        diverging = low < 0 < high
    width = MARGIN_LEFT + n_cols * CELL + 3 * BAR_WIDTH + 40
    height = MARGIN_TOP + n_rows * CELL + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="10">',
           f'<text x="{MARGIN_LEFT}" y="16" font-size="12">{escape(title)}</text>',
           f'<text x="{MARGIN_LEFT}" y="{height - 8}">{escape(col_label)}</text>',
           f'<text x="12" y="{MARGIN_TOP - 6}">{escape(row_label)}</text>']
    for r in range(n_rows):
        y = MARGIN_TOP + r * CELL
        out.append(f'<text x="{MARGIN_LEFT - 4}" y="{y + CELL - 3}" text-anchor="end">{r}</text>')
        for c in range(n_cols):
            x = MARGIN_LEFT + c * CELL
            out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
                       f'fill="{colour(data[r, c], low, high, diverging)}"><title>{data[r, c]:.6g}</title></rect>')
    bar_x = MARGIN_LEFT + n_cols * CELL + BAR_WIDTH
    steps = max(n_rows, 2)
    for k in range(steps):
        value = high - (high - low) * k / (steps - 1)
        out.append(f'<rect x="{bar_x}" y="{MARGIN_TOP + k * CELL}" width="{BAR_WIDTH}" height="{CELL}" '
                   f'fill="{colour(value, low, high, diverging)}"/>')
    out.append(f'<text x="{bar_x + BAR_WIDTH + 4}" y="{MARGIN_TOP + 10}">{high:.3g}</text>')
    out.append(f'<text x="{bar_x + BAR_WIDTH + 4}" y="{MARGIN_TOP + steps * CELL}">{low:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap(path, matrix, **kwargs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(heatmap(matrix, **kwargs))
