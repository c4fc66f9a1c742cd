"""Minimal SVG polyline plots of trace columns (no external renderer)."""
from __future__ import annotations

import numpy as np

WIDTH, PANEL, PAD = 640, 120, 40


def _fmt(v):
    return f"{v:.4g}"


def polyline_svg(t, columns: dict, title="") -> str:
    """One stacked panel per column, each scaled to its own range."""
    t = np.asarray(t, dtype=float)
    names = [k for k, v in columns.items() if np.size(v) == t.size]
    height = PAD + PANEL * max(len(names), 1) + PAD // 2
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}" font-family="monospace" font-size="11">',
        f'<text x="{PAD}" y="20">{title}</text>',
    ]
    if t.size < 2:
        out.append("</svg>")
        return "\n".join(out)
    t0, t1 = t.min(), t.max()
    span_t = (t1 - t0) or 1.0
    inner_w = WIDTH - 2 * PAD
    for i, name in enumerate(names):
        y = np.asarray(columns[name], dtype=float)
        finite = np.isfinite(y)
        lo, hi = (y[finite].min(), y[finite].max()) if finite.any() else (0.0, 1.0)
        span = (hi - lo) or 1.0
        top = PAD + i * PANEL
        h = PANEL - 20
        out.append(
            f'<rect x="{PAD}" y="{top}" width="{inner_w}" height="{h}" fill="none" stroke="#bbb"/>'
        )
        out.append(f'<text x="{PAD + 4}" y="{top + 12}">{name} [{_fmt(lo)}, {_fmt(hi)}]</text>')
        px = PAD + (t[finite] - t0) / span_t * inner_w
        py = top + h - (y[finite] - lo) / span * h
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        out.append(f'<polyline fill="none" stroke="#1f5fa8" stroke-width="1" points="{pts}"/>')
    out.append(f'<text x="{PAD}" y="{height - 6}">t in [{_fmt(t0)}, {_fmt(t1)}]</text>')
    out.append("</svg>")
    return "\n".join(out)
