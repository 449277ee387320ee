"""Self-contained SVG rendering of Kaplan-Meier step curves."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .survcore import KmCurve

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=60, right=20, top=30, bottom=50)
COLORS = ("#c0392b", "#2471a3", "#239b56", "#7d3c98")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def step_points(curve: KmCurve, t_end: float) -> list[tuple[float, float]]:
    """Right-continuous step vertices starting at (0, 1) and running to ``t_end``."""
    pts = [(0.0, 1.0)]
    s = 1.0
    for p in curve.points:
        pts.append((p.time, s))
        s = p.survival
        pts.append((p.time, s))
    pts.append((max(t_end, pts[-1][0]), s))
    return pts


def _nice_ticks(hi: float, n: int = 5) -> np.ndarray:
    if hi <= 0:
        return np.array([0.0])
    raw = hi / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(0.0, hi + step * 1e-9, step)


def render_km_svg(curves: dict[str, KmCurve], t_max: float, p_value: float | None = None,
                  title: str = "Kaplan-Meier") -> str:
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    t_max = t_max if t_max > 0 else 1.0

    def sx(t):
        return x0 + (x1 - x0) * t / t_max

    def sy(s):
        return y0 - (y0 - y1) * s

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<title>{escape(title)}</title>',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for t in _nice_ticks(t_max):
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{y0}" x2="{x:.2f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{y0 + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for s in np.linspace(0, 1, 6):
        y = sy(s)
        out.append(f'<line x1="{x0 - 5}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt(s)}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 10}" text-anchor="middle">time</text>')
    out.append(f'<text x="15" y="{(y0 + y1) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {(y0 + y1) / 2})">survival probability</text>')
    for i, (label, curve) in enumerate(curves.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(t):.2f},{sy(s):.2f}" for t, s in step_points(curve, t_max))
        out.append(f'<polyline class="km-step" fill="none" stroke="{color}" stroke-width="2" '
                   f'points="{pts}"/>')
        ly = y1 + 10 + 16 * i
        out.append(f'<line x1="{x1 - 140}" y1="{ly}" x2="{x1 - 115}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 - 110}" y="{ly + 4}">{escape(label)}</text>')
    if p_value is not None:
        out.append(f'<text x="{x1 - 140}" y="{y1 + 16 * len(curves) + 18}">'
                   f'logrank p = {p_value:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
