"""Minimal standalone SVG plots: line overlays and 2D contour overlays."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#222222", "#e7969c", "#8c1c13", "#3182bd", "#9ecae1", "#31a354"]

_W, _H = 640, 420
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 60, 20, 30, 45


class _Frame:
    def __init__(self, xlim, ylim, width=_W, height=_H):
        self.x0, self.x1 = map(float, xlim)
        self.y0, self.y1 = map(float, ylim)
        self.w, self.h = width, height

    def px(self, x):
        return _PAD_L + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * (self.w - _PAD_L - _PAD_R)

    def py(self, y):
        return self.h - _PAD_B - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * (self.h - _PAD_T - _PAD_B)

    def polyline(self, x, y, color, width=1.5, dash=None):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(self.px(x), self.py(y)))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{d} points="{pts}"/>'

    def axes(self, xlabel, ylabel, title):
        out = []
        l, r = _PAD_L, self.w - _PAD_R
        t, b = _PAD_T, self.h - _PAD_B
        out.append(f'<rect x="{l}" y="{t}" width="{r - l}" height="{b - t}" fill="none" stroke="#000"/>')
        for v in np.linspace(self.x0, self.x1, 5):
            x = float(self.px(v))
            out.append(f'<line x1="{x:.2f}" y1="{b}" x2="{x:.2f}" y2="{b + 4}" stroke="#000"/>')
            out.append(f'<text x="{x:.2f}" y="{b + 16}" font-size="11" text-anchor="middle">{v:.3g}</text>')
        for v in np.linspace(self.y0, self.y1, 5):
            y = float(self.py(v))
            out.append(f'<line x1="{l - 4}" y1="{y:.2f}" x2="{l}" y2="{y:.2f}" stroke="#000"/>')
            out.append(f'<text x="{l - 6}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{v:.3g}</text>')
        out.append(f'<text x="{(l + r) / 2}" y="{self.h - 8}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
        out.append(
            f'<text x="14" y="{(t + b) / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 14 {(t + b) / 2})">{escape(ylabel)}</text>'
        )
        out.append(f'<text x="{(l + r) / 2}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>')
        return out

    def legend(self, entries):
        out = []
        x = self.w - _PAD_R - 170
        for k, (label, color, dash) in enumerate(entries):
            y = _PAD_T + 14 + 16 * k
            d = f' stroke-dasharray="{dash}"' if dash else ""
            out.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 22}" y2="{y - 4}" stroke="{color}" stroke-width="2"{d}/>')
            out.append(f'<text x="{x + 28}" y="{y}" font-size="11">{escape(label)}</text>')
        return out


def _document(frame, body):
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.w}" height="{frame.h}" '
        f'viewBox="0 0 {frame.w} {frame.h}">'
    )
    return "\n".join([head, '<rect width="100%" height="100%" fill="#fff"/>', *body, "</svg>", ""])


def line_plot(path, x, series, *, vlines=(), xlabel="", ylabel="", title="") -> Path:
    """Overlay of named curves on a shared x grid.

    ``series`` is a list of ``(label, y, color, dash)``; ``vlines`` a list of
    ``(x, label)`` markers.
    """
    x = np.asarray(x, float)
    ymax = max(float(np.nanmax(s[1])) for s in series)
    frame = _Frame((x[0], x[-1]), (0.0, 1.05 * ymax if ymax > 0 else 1.0))
    body = frame.axes(xlabel, ylabel, title)
    for label, y, color, dash in series:
        body.append(frame.polyline(x, y, color, dash=dash))
    for xv, label in vlines:
        px = float(frame.px(xv))
        body.append(
            f'<line x1="{px:.2f}" y1="{_PAD_T}" x2="{px:.2f}" y2="{frame.h - _PAD_B}" '
            'stroke="#777" stroke-dasharray="2,3"/>'
        )
        body.append(f'<text x="{px + 3:.2f}" y="{_PAD_T + 12}" font-size="11">{escape(label)}</text>')
    body += frame.legend([(s[0], s[2], s[3]) for s in series])
    return _write(path, _document(frame, body))


def contour_plot(path, gx, gy, fields, ellipses=(), *, xlabel="", ylabel="", title="", n_levels=6) -> Path:
    """Contours of gridded densities plus Gaussian 2-sigma ellipses.

    ``fields`` is a list of ``(label, Z, color)`` with ``Z[i, j]`` at
    ``(gx[i], gy[j])``; ``ellipses`` a list of ``(label, mean, cov, color, dash)``.
    """
    import contourpy

    gx = np.asarray(gx, float)
    gy = np.asarray(gy, float)
    frame = _Frame((gx[0], gx[-1]), (gy[0], gy[-1]), width=560, height=560)
    body = frame.axes(xlabel, ylabel, title)
    legend = []
    for label, Z, color in fields:
        Z = np.asarray(Z, float)
        gen = contourpy.contour_generator(gx, gy, Z.T)
        top = float(Z.max())
        for level in top * np.geomspace(0.02, 0.8, n_levels):
            for line in gen.lines(level):
                body.append(frame.polyline(line[:, 0], line[:, 1], color, width=1.0))
        legend.append((label, color, None))
    t = np.linspace(0.0, 2.0 * np.pi, 181)
    for label, mean, cov, color, dash in ellipses:
        L = np.linalg.cholesky(np.asarray(cov, float))
        pts = np.asarray(mean, float)[:, None] + 2.0 * L @ np.vstack([np.cos(t), np.sin(t)])
        body.append(frame.polyline(pts[0], pts[1], color, width=2.0, dash=dash))
        legend.append((label, color, dash))
    body += frame.legend(legend)
    return _write(path, _document(frame, body))


def _write(path, text) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
