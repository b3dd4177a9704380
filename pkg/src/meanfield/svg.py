"""Hand-rolled SVG line charts — no plotting dependency.

One job: log-log decay curves of deviation statistics versus population
size.  Output is deterministic text (fixed float formatting, no
timestamps), so chart bytes are a pure function of the data.
"""

from __future__ import annotations

import math

__all__ = ["decay_chart"]

# Okabe-Ito-ish palette, readable on white.
_COLORS = ["#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9"]

_W, _H = 720, 480
_L, _R, _T, _B = 80, 700, 48, 408     # plot box edges


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _decades(lo: float, hi: float) -> list:
    first = math.floor(math.log10(lo) + 1e-12)
    last = math.ceil(math.log10(hi) - 1e-12)
    return [10.0 ** k for k in range(first, last + 1)]


def decay_chart(series, title: str, y_label: str = "deviation size") -> str:
    """Log-log chart; ``series`` is a list of {label, xs, ys} dicts.

    Zero values cannot sit on a log axis: they are drawn as hollow
    markers pinned to a dashed floor line one decade below the smallest
    positive value (or 1e-12 when everything is zero), and the floor is
    annotated.  All inputs must be nonnegative.
    """
    if not series:
        raise ValueError("need at least one series")
    xs_all = [x for s in series for x in s["xs"]]
    ys_all = [y for s in series for y in s["ys"]]
    if not xs_all or any(len(s["xs"]) != len(s["ys"]) for s in series):
        raise ValueError("each series needs matching nonempty xs/ys")
    if any(y < 0 for y in ys_all):
        raise ValueError("log chart values must be nonnegative")

    pos = [y for y in ys_all if y > 0]
    floor = 10.0 ** math.floor(math.log10(min(pos)) - 1) if pos else 1e-12
    has_zero = any(y == 0 for y in ys_all)

    x_lo, x_hi = min(xs_all), max(xs_all)
    y_hi = max(pos) if pos else 1.0
    lx0, lx1 = math.log10(x_lo), math.log10(x_hi)
    if lx1 - lx0 < 1e-9:
        lx0, lx1 = lx0 - 0.5, lx1 + 0.5
    ly0, ly1 = math.log10(floor), math.log10(y_hi)
    ly1 = ly0 + 1.0 if ly1 - ly0 < 1e-9 else ly1 + 0.08 * (ly1 - ly0)

    def X(v):
        return _L + (math.log10(v) - lx0) / (lx1 - lx0) * (_R - _L)

    def Y(v):
        lv = math.log10(max(v, floor))
        return _B - (lv - ly0) / (ly1 - ly0) * (_B - _T)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{(_L + _R) // 2}" y="24" text-anchor="middle" '
           f'font-size="15">{title}</text>']

    # gridlines + tick labels at decades
    for gx in _decades(x_lo, x_hi):
        if x_lo <= gx <= x_hi * (1 + 1e-9):
            px = X(gx)
            out.append(f'<line x1="{_fmt(px)}" y1="{_T}" x2="{_fmt(px)}" '
                       f'y2="{_B}" stroke="#dddddd"/>')
            out.append(f'<text x="{_fmt(px)}" y="{_B + 18}" '
                       f'text-anchor="middle">{_fmt(gx)}</text>')
    for gy in _decades(floor, y_hi):
        if floor <= gy <= y_hi * (1 + 1e-9):
            py = Y(gy)
            out.append(f'<line x1="{_L}" y1="{_fmt(py)}" x2="{_R}" '
                       f'y2="{_fmt(py)}" stroke="#dddddd"/>')
            out.append(f'<text x="{_L - 8}" y="{_fmt(py + 4)}" '
                       f'text-anchor="end">{_fmt(gy)}</text>')

    # axes
    out.append(f'<line x1="{_L}" y1="{_B}" x2="{_R}" y2="{_B}" stroke="black"/>')
    out.append(f'<line x1="{_L}" y1="{_T}" x2="{_L}" y2="{_B}" stroke="black"/>')
    out.append(f'<text x="{(_L + _R) // 2}" y="{_B + 40}" '
               f'text-anchor="middle">population size n</text>')
    out.append(f'<text x="20" y="{(_T + _B) // 2}" text-anchor="middle" '
               f'transform="rotate(-90 20 {(_T + _B) // 2})">{y_label}</text>')

    if has_zero:
        fy = Y(floor)
        out.append(f'<line x1="{_L}" y1="{_fmt(fy)}" x2="{_R}" y2="{_fmt(fy)}" '
                   f'stroke="#999999" stroke-dasharray="6 4"/>')
        out.append(f'<text x="{_R}" y="{_fmt(fy - 6)}" text-anchor="end" '
                   f'fill="#555555">hollow markers on this line are exact '
                   f'zeros</text>')

    for si, s in enumerate(series):
        color = _COLORS[si % len(_COLORS)]
        pts = " ".join(f"{_fmt(X(x))},{_fmt(Y(y))}"
                       for x, y in zip(s["xs"], s["ys"]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.8"/>')
        for x, y in zip(s["xs"], s["ys"]):
            fill = "white" if y == 0 else color
            out.append(f'<circle cx="{_fmt(X(x))}" cy="{_fmt(Y(y))}" r="3.5" '
                       f'fill="{fill}" stroke="{color}" stroke-width="1.5"/>')
        ly = _T + 16 + 16 * si
        out.append(f'<line x1="{_R - 150}" y1="{ly - 4}" x2="{_R - 126}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="1.8"/>')
        out.append(f'<text x="{_R - 120}" y="{ly}">{s["label"]}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"
