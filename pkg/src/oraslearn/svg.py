"""Minimal SVG line charts without a plotting dependency.

One chart kind covers every report: series of (x, mean) points with an
optional shaded min-to-max band, linear or logarithmic x axis, nice
tick placement, and a legend.  Output is deterministic text.
"""

import math
from dataclasses import dataclass

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

WIDTH, HEIGHT = 640, 420
MARGIN_LEFT, MARGIN_RIGHT = 70, 20
MARGIN_TOP, MARGIN_BOTTOM = 40, 50


@dataclass
class Series:
    """One plotted line: points (x, mean) and an optional lo..hi band."""

    label: str
    x: list
    mean: list
    lo: list = None
    hi: list = None

    def __post_init__(self):
        if len(self.x) != len(self.mean):
            raise ValueError("x and mean lengths differ")
        for band in (self.lo, self.hi):
            if band is not None and len(band) != len(self.x):
                raise ValueError("band length differs from x")


def nice_ticks(lo: float, hi: float, target: int = 5) -> list:
    """Round tick positions covering [lo, hi] with a 1/2/5 step."""
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if step >= raw:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t / step) * step)
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:g}"


def _esc(text: str) -> str:
    return (
        str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    )


class _Axis:
    """Affine (or log-affine) map from data to pixel coordinates."""

    def __init__(self, lo, hi, pix_lo, pix_hi, log=False):
        if log and lo <= 0:
            raise ValueError("log axis requires positive data")
        self.log = log
        self.lo, self.hi = (math.log10(lo), math.log10(hi)) if log else (lo, hi)
        if self.hi == self.lo:
            self.hi = self.lo + 1.0
        self.pix_lo, self.pix_hi = pix_lo, pix_hi

    def __call__(self, v: float) -> float:
        t = math.log10(v) if self.log else v
        frac = (t - self.lo) / (self.hi - self.lo)
        return self.pix_lo + frac * (self.pix_hi - self.pix_lo)

    def ticks(self) -> list:
        if not self.log:
            return nice_ticks(self.lo, self.hi)
        lo = math.ceil(self.lo - 1e-9)
        hi = math.floor(self.hi + 1e-9)
        return [10.0**e for e in range(lo, hi + 1)]


def line_chart(series: list, title: str, xlabel: str, ylabel: str,
               x_log: bool = False) -> str:
    """Render the chart and return the SVG document text."""
    if not series:
        raise ValueError("no series to plot")
    xs = [v for s in series for v in s.x]
    ys = [v for s in series for v in s.mean]
    for s in series:
        for band in (s.lo, s.hi):
            if band is not None:
                ys.extend(band)
    x_axis = _Axis(min(xs), max(xs), MARGIN_LEFT, WIDTH - MARGIN_RIGHT,
                   log=x_log)
    y_lo, y_hi = min(ys + [0.0]), max(ys)
    y_axis = _Axis(y_lo, y_hi * 1.05 if y_hi > y_lo else y_lo + 1.0,
                   HEIGHT - MARGIN_BOTTOM, MARGIN_TOP)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:g}" y="22" text-anchor="middle" '
        f'font-size="15" font-family="sans-serif">{_esc(title)}</text>',
    ]
    # axes frame
    x0, x1 = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    y0, y1 = HEIGHT - MARGIN_BOTTOM, MARGIN_TOP
    parts.append(
        f'<path d="M {x0} {y1} L {x0} {y0} L {x1} {y0}" fill="none" '
        'stroke="black" stroke-width="1"/>'
    )
    for t in x_axis.ticks():
        px = x_axis(t)
        if px < x0 - 0.5 or px > x1 + 0.5:
            continue
        parts.append(
            f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 + 5}" '
            'stroke="black"/>'
        )
        parts.append(
            f'<text x="{px:.2f}" y="{y0 + 18}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{_fmt(t)}</text>'
        )
    for t in y_axis.ticks():
        py = y_axis(t)
        if py > y0 + 0.5 or py < y1 - 0.5:
            continue
        parts.append(
            f'<line x1="{x0 - 5}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" '
            'stroke="black"/>'
        )
        parts.append(
            f'<text x="{x0 - 8}" y="{py + 4:.2f}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_fmt(t)}</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) / 2:g}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{_esc(xlabel)}</text>'
    )
    parts.append(
        f'<text x="16" y="{(y0 + y1) / 2:g}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2:g})">{_esc(ylabel)}</text>'
    )

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.lo is not None and s.hi is not None:
            pts = [(x_axis(x), y_axis(v)) for x, v in zip(s.x, s.hi)]
            pts += [(x_axis(x), y_axis(v)) for x, v in
                    zip(reversed(s.x), reversed(s.lo))]
            poly = " ".join(f"{px:.2f},{py:.2f}" for px, py in pts)
            parts.append(
                f'<polygon points="{poly}" fill="{color}" opacity="0.15"/>'
            )
        line = " ".join(
            f"{x_axis(x):.2f},{y_axis(v):.2f}" for x, v in zip(s.x, s.mean)
        )
        parts.append(
            f'<polyline points="{line}" fill="none" stroke="{color}" '
            'stroke-width="1.8"/>'
        )
        for x, v in zip(s.x, s.mean):
            parts.append(
                f'<circle cx="{x_axis(x):.2f}" cy="{y_axis(v):.2f}" r="2.6" '
                f'fill="{color}"/>'
            )
        ly = MARGIN_TOP + 14 + 16 * i
        parts.append(
            f'<line x1="{x1 - 150}" y1="{ly - 4:g}" x2="{x1 - 126}" '
            f'y2="{ly - 4:g}" stroke="{color}" stroke-width="1.8"/>'
        )
        parts.append(
            f'<text x="{x1 - 120}" y="{ly}" font-size="11" '
            f'font-family="sans-serif">{_esc(s.label)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_chart(path, series: list, title: str, xlabel: str, ylabel: str,
                x_log: bool = False) -> None:
    with open(path, "w") as fh:
        fh.write(line_chart(series, title, xlabel, ylabel, x_log=x_log))
