"""Standalone SVG line charts of risk per round.

Every series carries its exact values in ``data-*`` attributes, so the chart
can be read back without reversing the pixel transform.
"""
from __future__ import annotations

from collections import OrderedDict
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=160, top=30, bottom=50)


def group_series(traces) -> "OrderedDict[str, np.ndarray]":
    """``{algorithm: (num_seeds, rounds + 1) risk matrix}`` in first-seen order."""
    groups: OrderedDict = OrderedDict()
    for tr in traces:
        groups.setdefault(tr.algorithm, []).append(tr.risks)
    out = OrderedDict()
    for name, rows in groups.items():
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise ValueError(f"traces of {name!r} have different lengths {sorted(lengths)}")
        out[name] = np.vstack(rows)
    return out


def _ticks(lo, hi, n=5):
    return np.linspace(lo, hi, n)


def render_risk_chart(series, title: str = "Risk per round") -> str:
    """Mean line and min-max band per series; x is the round index."""
    if not series:
        raise ValueError("nothing to plot")
    all_vals = np.concatenate([m.ravel() for m in series.values()])
    y_lo, y_hi = float(all_vals.min()), float(all_vals.max())
    if y_hi - y_lo < 1e-9:
        y_lo, y_hi = y_lo - 0.05, y_hi + 0.05
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_max = max(m.shape[1] for m in series.values()) - 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x / x_max if x_max else 0.5) * pw

    def py(y):
        return MARGIN["top"] + (y_hi - y) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    # axes
    x0, x1 = MARGIN["left"], MARGIN["left"] + pw
    y0, y1 = MARGIN["top"], MARGIN["top"] + ph
    out.append(f'<g class="axes" stroke="black" fill="none">'
               f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/>'
               f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{x0 - 6}" y="{py(t) + 4:.2f}" text-anchor="end" '
                   f'font-size="10">{t:.3f}</text>')
    step = max(1, x_max // 10)
    for r in range(0, x_max + 1, step):
        out.append(f'<text x="{px(r):.2f}" y="{y1 + 16}" text-anchor="middle" '
                   f'font-size="10">{r}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
               f'font-size="12">round</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">true risk</text>')

    for i, (name, M) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        rounds = np.arange(M.shape[1])
        mean, lo, hi = M.mean(axis=0), M.min(axis=0), M.max(axis=0)
        attr_name = escape(name, {'"': "&quot;"})
        if M.shape[0] > 1:
            upper = [f"{px(r):.2f},{py(v):.2f}" for r, v in zip(rounds, hi)]
            lower = [f"{px(r):.2f},{py(v):.2f}" for r, v in zip(rounds[::-1], lo[::-1])]
            out.append(f'<polygon class="band" data-series="{attr_name}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none" points="{" ".join(upper + lower)}"/>')
        pts = " ".join(f"{px(r):.2f},{py(v):.2f}" for r, v in zip(rounds, mean))
        values = ",".join(repr(float(v)) for v in mean)
        out.append(f'<polyline class="series" data-series="{attr_name}" data-values="{values}" '
                   f'data-seeds="{M.shape[0]}" fill="none" stroke="{color}" stroke-width="2" '
                   f'points="{pts}"/>')
        ly = MARGIN["top"] + 20 * i + 10
        lx = x1 + 15
        out.append(f'<g class="legend-entry" data-series="{attr_name}">'
                   f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/><text x="{lx + 26}" y="{ly + 4}" font-size="11">'
                   f'{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_series(svg_text: str) -> "OrderedDict[str, list[float]]":
    """Recover ``{series: mean values}`` from a chart written by :func:`render_risk_chart`."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg_text)
    out = OrderedDict()
    for el in root.iter():
        if el.tag.endswith("polyline") and el.get("class") == "series":
            out[el.get("data-series")] = [float(v) for v in el.get("data-values").split(",")]
    return out
