"""Minimal SVG line plots (polylines, axes, ticks, legend)."""
from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    color: str | None = None
    dashed: bool = False
    band: np.ndarray | None = None  # half-width of a shaded band around y
    markers: bool = False


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 0.5 * step, step)


def _fmt(v):
    return f"{v:.3g}"


def line_plot(
    path,
    series,
    title="",
    xlabel="",
    ylabel="",
    logy=False,
    comments: dict | None = None,
    width=640,
    height=420,
):
    """Write ``series`` (a list of :class:`Series`) as an SVG file.

    Non-finite points break a polyline. With ``logy`` only positive values
    are drawn. ``comments`` are embedded as an XML comment block.
    """
    ml, mr, mt, mb = 70, 20, 35, 50
    pw, ph = width - ml - mr, height - mt - mb

    def tr(y):
        y = np.asarray(y, dtype=np.float64)
        if not logy:
            return y
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(y > 0, np.log10(y), np.nan)

    xs, ys = [], []
    for s in series:
        x = np.asarray(s.x, dtype=np.float64)
        y = tr(s.y)
        xs.append(x[np.isfinite(x)])
        ys.append(y[np.isfinite(y)])
        if s.band is not None:
            ys.append(tr(np.asarray(s.y) + np.asarray(s.band))[np.isfinite(y)])
    xall = np.concatenate(xs) if xs else np.zeros(1)
    yall = np.concatenate(ys) if ys else np.zeros(1)
    yall = yall[np.isfinite(yall)]
    if xall.size == 0:
        xall = np.zeros(1)
    if yall.size == 0:
        yall = np.zeros(1)
    x0, x1 = float(xall.min()), float(xall.max())
    y0, y1 = float(yall.min()), float(yall.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y0 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (np.asarray(x) - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (np.asarray(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">'
    ]
    if comments:
        body = "\n".join(f"{k} = {v}" for k, v in sorted(comments.items()))
        out.append("<!--\n" + body.replace("--", "- -") + "\n-->")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    out.append(
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>'
    )
    for tx in _ticks(x0, x1):
        X = px(tx)
        out.append(f'<line x1="{X:.2f}" y1="{mt + ph}" x2="{X:.2f}" y2="{mt + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y0, y1):
        Y = py(ty)
        lab = _fmt(10.0**ty) if logy else _fmt(ty)
        out.append(f'<line x1="{ml - 4}" y1="{Y:.2f}" x2="{ml}" y2="{Y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{Y + 4:.2f}" text-anchor="end">{lab}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {mt + ph / 2})">{escape(ylabel)}</text>'
    )
    out.append(f'<text x="{ml + pw / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>')

    out.append(f'<clipPath id="plot"><rect x="{ml}" y="{mt}" width="{pw}" height="{ph}"/></clipPath>')
    for k, s in enumerate(series):
        color = s.color or PALETTE[k % len(PALETTE)]
        x = np.asarray(s.x, dtype=np.float64)
        y = tr(s.y)
        if s.band is not None:
            band = np.asarray(s.band, dtype=np.float64)
            upper, lower = tr(np.asarray(s.y) + band), tr(np.asarray(s.y) - band)
            ok = np.isfinite(x) & np.isfinite(upper) & np.isfinite(lower)
            if ok.any():
                pts = [f"{a:.2f},{b:.2f}" for a, b in zip(px(x[ok]), py(upper[ok]))]
                pts += [f"{a:.2f},{b:.2f}" for a, b in zip(px(x[ok])[::-1], py(lower[ok])[::-1])]
                out.append(
                    f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" '
                    f'stroke="none" clip-path="url(#plot)"/>'
                )
        ok = np.isfinite(x) & np.isfinite(y)
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        # split at gaps so non-finite values break the line
        breaks = np.flatnonzero(~ok)
        for seg in np.split(np.arange(x.size), breaks):
            seg = seg[ok[seg]]
            if seg.size == 0:
                continue
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(x[seg]), py(y[seg])))
            out.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"{dash} '
                f'clip-path="url(#plot)"/>'
            )
            if s.markers:
                for a, b in zip(px(x[seg]), py(y[seg])):
                    out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{color}"/>')
        ly = mt + 14 + 16 * k
        out.append(
            f'<line x1="{ml + pw - 150}" y1="{ly - 4}" x2="{ml + pw - 125}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"{dash}/>'
        )
        out.append(f'<text x="{ml + pw - 120}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
