"""Minimal standalone SVG charts for experiment outputs.

CSV files are the canonical results; these charts are conveniences and need
nothing beyond the standard library.
"""

from xml.sax.saxutils import escape

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


def _scale(lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _frame(title, y_lo, y_hi, ylabel):
    sy = _scale(y_lo, y_hi, H - BOTTOM, TOP)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="15" y="{(TOP + H - BOTTOM) / 2}" transform="rotate(-90 15 {(TOP + H - BOTTOM) / 2})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        v = y_lo + (y_hi - y_lo) * i / 4
        y = sy(v)
        parts.append(f'<line x1="{LEFT - 4}" y1="{y:.1f}" x2="{LEFT}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    if y_lo < 0 < y_hi:
        parts.append(f'<line x1="{LEFT}" y1="{sy(0):.1f}" x2="{W - RIGHT}" y2="{sy(0):.1f}" '
                     'stroke="gray" stroke-dasharray="4 3"/>')
    return parts, sy


def _legend(parts, names):
    for i, name in enumerate(names):
        y = TOP + 18 * i
        c = COLORS[i % len(COLORS)]
        parts.append(f'<rect x="{W - RIGHT + 15}" y="{y}" width="12" height="12" fill="{c}"/>')
        parts.append(f'<text x="{W - RIGHT + 32}" y="{y + 10}">{escape(name)}</text>')


def _bounds(values):
    lo, hi = min(values + [0.0]), max(values + [0.0])
    pad = 0.05 * (hi - lo or 1.0)
    return lo - pad, hi + pad


def line_chart(path, title, xs, series, xlabel="", ylabel="cost"):
    """``series`` maps a label to y values aligned with ``xs``."""
    ys = [v for vals in series.values() for v in vals]
    y_lo, y_hi = _bounds(ys)
    parts, sy = _frame(title, y_lo, y_hi, ylabel)
    sx = _scale(min(xs), max(xs), LEFT + 20, W - RIGHT - 20)
    for x in xs:
        parts.append(f'<text x="{sx(x):.1f}" y="{H - BOTTOM + 16}" text-anchor="middle">{x:g}</text>')
    parts.append(f'<text x="{(LEFT + W - RIGHT) / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    for i, (name, vals) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(x):.1f},{sy(v):.1f}" for x, v in zip(xs, vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="2"/>')
        for x, v in zip(xs, vals):
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(v):.1f}" r="3" fill="{c}"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    _write(path, parts)


def bar_chart(path, title, groups, series, ylabel="cost"):
    """Grouped bars: ``series`` maps a label to one value per group."""
    ys = [v for vals in series.values() for v in vals]
    y_lo, y_hi = _bounds(ys)
    parts, sy = _frame(title, y_lo, y_hi, ylabel)
    span = (W - RIGHT - LEFT) / max(1, len(groups))
    bw = 0.8 * span / max(1, len(series))
    for g, group in enumerate(groups):
        x0 = LEFT + g * span + 0.1 * span
        parts.append(f'<text x="{LEFT + (g + 0.5) * span:.1f}" y="{H - BOTTOM + 16}" '
                     f'text-anchor="middle">{escape(group)}</text>')
        for i, vals in enumerate(series.values()):
            v = vals[g]
            top, base = sy(max(v, 0.0)), sy(min(v, 0.0))
            parts.append(f'<rect x="{x0 + i * bw:.1f}" y="{top:.1f}" width="{bw * 0.9:.1f}" '
                         f'height="{max(base - top, 0.5):.1f}" fill="{COLORS[i % len(COLORS)]}"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    _write(path, parts)


def _write(path, parts):
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
