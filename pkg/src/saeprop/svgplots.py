"""Minimal native SVG renderers (no plotting dependency).

Boxplots, caterpillar plots and scatter-with-interval plots sufficient for
the experiment reports.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

_FONT = 'font-family="Helvetica,Arial,sans-serif" font-size="11"'


def _header(width: int, height: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]


def _scale(vals, lo, hi, out_lo, out_hi):
    vals = np.asarray(vals, dtype=float)
    if hi == lo:
        hi = lo + 1.0
    return out_lo + (vals - lo) / (hi - lo) * (out_hi - out_lo)


def _axis_ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi == lo:
        hi = lo + 1.0
    raw = np.linspace(lo, hi, n)
    return np.round(raw, 3)


def boxplot_svg(groups: dict[str, np.ndarray], path: str | Path,
                title: str = "", ylabel: str = "") -> None:
    """One box per group: median, quartile box, 1.5 IQR whiskers, outliers."""
    width, height = 120 + 90 * max(1, len(groups)), 360
    top, bottom, left = 40, 40, 70
    plot_h = height - top - bottom
    all_vals = np.concatenate([np.asarray(v, dtype=float) for v in groups.values()]) if groups else np.array([0.0])
    lo, hi = float(np.min(all_vals)), float(np.max(all_vals))
    pad = 0.05 * (hi - lo if hi > lo else 1.0)
    lo, hi = lo - pad, hi + pad

    out = _header(width, height)
    if title:
        out.append(f'<text x="{width/2}" y="20" text-anchor="middle" {_FONT}>{title}</text>')
    for tick in _axis_ticks(lo, hi):
        y = float(_scale([tick], lo, hi, height - bottom, top)[0])
        out.append(f'<line x1="{left-5}" y1="{y}" x2="{width-20}" y2="{y}" stroke="#eeeeee"/>')
        out.append(f'<text x="{left-8}" y="{y+4}" text-anchor="end" {_FONT}>{tick}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{height/2}" transform="rotate(-90 16 {height/2})" '
                   f'text-anchor="middle" {_FONT}>{ylabel}</text>')

    for k, (name, vals) in enumerate(groups.items()):
        vals = np.asarray(vals, dtype=float)
        x = left + 30 + 90 * k
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        iqr = q3 - q1
        w_lo = vals[vals >= q1 - 1.5 * iqr].min()
        w_hi = vals[vals <= q3 + 1.5 * iqr].max()
        ys = _scale([q1, med, q3, w_lo, w_hi], lo, hi, height - bottom, top)
        y_q1, y_med, y_q3, y_wlo, y_whi = (float(v) for v in ys)
        out.append(f'<line x1="{x}" y1="{y_wlo}" x2="{x}" y2="{y_q1}" stroke="black"/>')
        out.append(f'<line x1="{x}" y1="{y_whi}" x2="{x}" y2="{y_q3}" stroke="black"/>')
        out.append(f'<rect x="{x-25}" y="{y_q3}" width="50" height="{abs(y_q1-y_q3)}" '
                   f'fill="#9ecae1" stroke="black"/>')
        out.append(f'<line x1="{x-25}" y1="{y_med}" x2="{x+25}" y2="{y_med}" '
                   f'stroke="black" stroke-width="2"/>')
        for v in vals[(vals < q1 - 1.5 * iqr) | (vals > q3 + 1.5 * iqr)]:
            y = float(_scale([v], lo, hi, height - bottom, top)[0])
            out.append(f'<circle cx="{x}" cy="{y}" r="2" fill="none" stroke="black"/>')
        out.append(f'<text x="{x}" y="{height-18}" text-anchor="middle" {_FONT}>{name}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out), encoding="utf-8")


def caterpillar_svg(medians: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                    path: str | Path, title: str = "",
                    reference: float | None = None) -> None:
    """Point estimates with intervals, ordered by magnitude."""
    medians = np.asarray(medians, dtype=float)
    order = np.argsort(medians)
    n = len(medians)
    width, height = 720, 320
    top, bottom, left = 40, 30, 60
    vlo = float(np.min(lo)); vhi = float(np.max(hi))
    pad = 0.05 * (vhi - vlo if vhi > vlo else 1.0)
    vlo, vhi = vlo - pad, vhi + pad
    xs = np.linspace(left + 10, width - 20, n)
    out = _header(width, height)
    if title:
        out.append(f'<text x="{width/2}" y="20" text-anchor="middle" {_FONT}>{title}</text>')
    for tick in _axis_ticks(vlo, vhi):
        y = float(_scale([tick], vlo, vhi, height - bottom, top)[0])
        out.append(f'<line x1="{left-5}" y1="{y}" x2="{width-20}" y2="{y}" stroke="#eeeeee"/>')
        out.append(f'<text x="{left-8}" y="{y+4}" text-anchor="end" {_FONT}>{tick}</text>')
    if reference is not None:
        y = float(_scale([reference], vlo, vhi, height - bottom, top)[0])
        out.append(f'<line x1="{left-5}" y1="{y}" x2="{width-20}" y2="{y}" stroke="black"/>')
    for x, k in zip(xs, order):
        y_lo = float(_scale([lo[k]], vlo, vhi, height - bottom, top)[0])
        y_hi = float(_scale([hi[k]], vlo, vhi, height - bottom, top)[0])
        y_med = float(_scale([medians[k]], vlo, vhi, height - bottom, top)[0])
        out.append(f'<line x1="{x:.1f}" y1="{y_lo}" x2="{x:.1f}" y2="{y_hi}" stroke="#bbbbbb"/>')
        out.append(f'<circle cx="{x:.1f}" cy="{y_med}" r="2.4" fill="#3182bd"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out), encoding="utf-8")


def scatter_hdi_svg(x: np.ndarray, y: np.ndarray, y_lo: np.ndarray, y_hi: np.ndarray,
                    path: str | Path, title: str = "", identity: bool = True) -> None:
    """Scatter of y on x with vertical intervals; optional identity line."""
    x = np.asarray(x, dtype=float); y = np.asarray(y, dtype=float)
    width, height = 420, 420
    top, bottom, left = 40, 50, 60
    vlo = float(min(np.min(x), np.min(y_lo)))
    vhi = float(max(np.max(x), np.max(y_hi)))
    pad = 0.05 * (vhi - vlo if vhi > vlo else 1.0)
    vlo, vhi = vlo - pad, vhi + pad

    def sx(v): return float(_scale([v], vlo, vhi, left, width - 20)[0])
    def sy(v): return float(_scale([v], vlo, vhi, height - bottom, top)[0])

    out = _header(width, height)
    if title:
        out.append(f'<text x="{width/2}" y="20" text-anchor="middle" {_FONT}>{title}</text>')
    for tick in _axis_ticks(vlo, vhi):
        out.append(f'<text x="{left-8}" y="{sy(tick)+4}" text-anchor="end" {_FONT}>{tick}</text>')
        out.append(f'<text x="{sx(tick)}" y="{height-28}" text-anchor="middle" {_FONT}>{tick}</text>')
    if identity:
        out.append(f'<line x1="{sx(vlo)}" y1="{sy(vlo)}" x2="{sx(vhi)}" y2="{sy(vhi)}" stroke="#de2d26"/>')
    for k in range(len(x)):
        out.append(f'<line x1="{sx(x[k]):.1f}" y1="{sy(y_lo[k]):.1f}" '
                   f'x2="{sx(x[k]):.1f}" y2="{sy(y_hi[k]):.1f}" stroke="#cccccc"/>')
        out.append(f'<circle cx="{sx(x[k]):.1f}" cy="{sy(y[k]):.1f}" r="2.6" fill="#3182bd"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out), encoding="utf-8")
