"""Small deterministic SVG renderer for line charts, scatter plots and heatmaps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 70, 40, 55


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str
    color: str | None = None
    dashed: bool = False
    axis: str = "left"  # or "right"
    scatter: bool = False


@dataclass
class Figure:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    ylabel_right: str = ""
    logx: bool = False
    logy: bool = False
    series: list[Series] = field(default_factory=list)
    vlines: list[tuple[float, str]] = field(default_factory=list)

    def add(self, x, y, label, **kw) -> Figure:
        self.series.append(Series(np.asarray(x, dtype=float), np.asarray(y, dtype=float), label, **kw))
        return self

    def render(self) -> str:
        return render_lines(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _range(vals, log: bool):
    v = np.asarray([x for x in vals if math.isfinite(x) and (not log or x > 0)], dtype=float)
    if v.size == 0:
        return (0.0, 1.0)
    if log:
        v = np.log10(v)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def render_lines(fig: Figure) -> str:
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    xs = [v for s in fig.series for v in s.x]
    xlo, xhi = _range(xs, fig.logx)
    ranges = {}
    for axis in ("left", "right"):
        ys = [v for s in fig.series if s.axis == axis for v in s.y]
        if ys:
            ranges[axis] = _range(ys, fig.logy and axis == "left")

    def px(x):
        x = math.log10(x) if fig.logx else x
        return LEFT + (x - xlo) / (xhi - xlo) * pw

    def py(y, axis):
        lo, hi = ranges[axis]
        y = math.log10(y) if (fig.logy and axis == "left") else y
        return TOP + ph - (y - lo) / (hi - lo) * ph

    out = _header(fig.title)
    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for t in _ticks(xlo, xhi):
        x = LEFT + (t - xlo) / (xhi - xlo) * pw
        lab = _fmt(10**t if fig.logx else t)
        out.append(f'<line x1="{x:.1f}" y1="{TOP + ph}" x2="{x:.1f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{TOP + ph + 16}" text-anchor="middle">{lab}</text>')
    for axis, (lo, hi) in ranges.items():
        for t in _ticks(lo, hi):
            y = TOP + ph - (t - lo) / (hi - lo) * ph
            lab = _fmt(10**t if (fig.logy and axis == "left") else t)
            if axis == "left":
                out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{lab}</text>')
            else:
                out.append(f'<text x="{LEFT + pw + 6}" y="{y + 4:.1f}" text-anchor="start">{lab}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(fig.xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(fig.ylabel)}</text>')
    if "right" in ranges:
        xr = W - 14
        out.append(f'<text x="{xr}" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(90 {xr} {TOP + ph / 2:.1f})">{escape(fig.ylabel_right)}</text>')
    for i, s in enumerate(fig.series):
        color = s.color or PALETTE[i % len(PALETTE)]
        pts = [(px(x), py(y, s.axis)) for x, y in zip(s.x, s.y)
               if math.isfinite(x) and math.isfinite(y) and (not fig.logx or x > 0)
               and (not (fig.logy and s.axis == "left") or y > 0)]
        if s.scatter:
            out += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="{color}"/>' for x, y in pts]
        elif pts:
            d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            dash = ' stroke-dasharray="6,4"' if s.dashed else ""
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        ly = TOP + 14 + 14 * i
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<line x1="{LEFT + 8}" y1="{ly - 4}" x2="{LEFT + 28}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{LEFT + 32}" y="{ly}">{escape(s.label)}</text>')
    for xv, label in fig.vlines:
        if fig.logx and xv <= 0:
            continue
        x = px(xv)
        out.append(f'<line x1="{x:.1f}" y1="{TOP}" x2="{x:.1f}" y2="{TOP + ph}" stroke="gray" stroke-dasharray="2,3"/>')
        out.append(f'<text x="{x + 3:.1f}" y="{TOP + 12}" fill="gray">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(values, xticks, yticks, title="", xlabel="", ylabel="", path=None) -> str:
    """Cells colored on a white-to-blue scale; NaN cells are gray."""
    Z = np.asarray(values, dtype=float)
    ny, nx = Z.shape
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    cw, ch = pw / nx, ph / ny
    finite = Z[np.isfinite(Z)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    out = _header(title)
    for j in range(ny):
        for i in range(nx):
            v = Z[j, i]
            if math.isfinite(v):
                f = (v - lo) / (hi - lo)
                r, g, b = int(255 - 224 * f), int(255 - 136 * f), int(255 - 75 * f)
                color = f"#{r:02x}{g:02x}{b:02x}"
                text = _fmt(v)
            else:
                color, text = "#cccccc", "n/a"
            x, y = LEFT + i * cw, TOP + (ny - 1 - j) * ch
            out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" fill="{color}" stroke="white"/>')
            out.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" text-anchor="middle">{text}</text>')
    for i, t in enumerate(xticks):
        out.append(f'<text x="{LEFT + (i + 0.5) * cw:.1f}" y="{TOP + ph + 16}" text-anchor="middle">{escape(str(t))}</text>')
    for j, t in enumerate(yticks):
        out.append(f'<text x="{LEFT - 6}" y="{TOP + (ny - 1 - j + 0.5) * ch + 4:.1f}" text-anchor="end">{escape(str(t))}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg)
    return svg
