"""Minimal SVG line charts for training curves."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728")


def _panel(x0: float, y0: float, w: float, h: float, title: str,
           series: list[tuple[str, list[float]]], ymin: float | None = None,
           ymax: float | None = None) -> list[str]:
    finite = [v for _, ys in series for v in ys if math.isfinite(v)]
    lo = min(finite) if ymin is None else ymin
    hi = max(finite) if ymax is None else ymax
    if not finite:
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    n = max((len(ys) for _, ys in series), default=1)
    px = lambda i: x0 + (w * i / (n - 1) if n > 1 else w / 2)  # noqa: E731
    py = lambda v: y0 + h - h * (v - lo) / (hi - lo)  # noqa: E731
    out = [
        f'<text x="{x0 + w / 2:.1f}" y="{y0 - 8:.1f}" text-anchor="middle">{escape(title)}</text>',
        f'<polyline fill="none" stroke="#000" points="{x0:.1f},{y0:.1f} {x0:.1f},{y0 + h:.1f} '
        f'{x0 + w:.1f},{y0 + h:.1f}"/>',
        f'<text x="{x0 - 4:.1f}" y="{y0 + 4:.1f}" text-anchor="end">{hi:.3g}</text>',
        f'<text x="{x0 - 4:.1f}" y="{y0 + h:.1f}" text-anchor="end">{lo:.3g}</text>',
        f'<text x="{x0:.1f}" y="{y0 + h + 14:.1f}" text-anchor="middle">1</text>',
        f'<text x="{x0 + w:.1f}" y="{y0 + h + 14:.1f}" text-anchor="middle">{n}</text>',
    ]
    for k, (label, ys) in enumerate(series):
        pts = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(ys) if math.isfinite(v))
        color = COLORS[k % len(COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = y0 + 14 + 14 * k
        out.append(f'<text x="{x0 + w - 4:.1f}" y="{ly:.1f}" text-anchor="end" fill="{color}">'
                   f'{escape(label)}</text>')
    return out


def training_curves_svg(epochs: list) -> str:
    """Two side-by-side panels: accuracy and loss, train versus validation."""
    width, height, pad = 720, 300, 50
    pw = (width - 3 * pad) / 2
    ph = height - 2 * pad
    body = ['<svg xmlns="http://www.w3.org/2000/svg" width="720" height="300" '
            'font-family="sans-serif" font-size="11">',
            '<rect width="100%" height="100%" fill="#fff"/>']
    body += _panel(pad, pad, pw, ph, "accuracy",
                   [("train", [e.train_acc for e in epochs]), ("val", [e.val_acc for e in epochs])], 0.0, 1.0)
    body += _panel(2 * pad + pw, pad, pw, ph, "loss",
                   [("train", [e.train_loss for e in epochs]), ("val", [e.val_loss for e in epochs])], 0.0)
    body.append(f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle">epoch</text>')
    body.append("</svg>")
    return "\n".join(body) + "\n"
