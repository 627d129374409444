"""Minimal native SVG precision-recall plots (no plotting dependency).

One fixed-size plot: recall on x, precision on y, both in [0, 1], with
dotted iso-F guide curves like the usual boundary-benchmark figures. The
output is a plain string of SVG elements, byte-stable for identical inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["pr_plot_svg", "write_pr_plot"]

_SIZE = 520
_MARGIN = 56
_SPAN = _SIZE - 2 * _MARGIN
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _x(recall: float) -> float:
    return _MARGIN + recall * _SPAN


def _y(precision: float) -> float:
    return _SIZE - _MARGIN - precision * _SPAN


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _polyline(points, color, width=2.0, dashed=False) -> str:
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    dash = ' stroke-dasharray="4,4"' if dashed else ""
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{dash} '
        f'points="{coords}"/>'
    )


def pr_plot_svg(curves, title: str = "Precision-recall") -> str:
    """Render labeled (recall, precision) curves into an SVG document.

    ``curves`` is a sequence of (label, recall array, precision array); the
    points are plotted in the given order (no sorting), so callers control
    the sweep direction.
    """
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" height="{_SIZE}" '
        f'viewBox="0 0 {_SIZE} {_SIZE}" font-family="Helvetica,Arial,sans-serif">',
        f'<rect width="{_SIZE}" height="{_SIZE}" fill="white"/>',
        f'<text x="{_SIZE / 2:.0f}" y="26" text-anchor="middle" font-size="16">{title}</text>',
    ]
    # frame and gridlines
    for tick in np.linspace(0.0, 1.0, 6):
        x, y = _x(float(tick)), _y(float(tick))
        parts.append(_polyline([(x, _y(0.0)), (x, _y(1.0))], "#dddddd", 1.0))
        parts.append(_polyline([(_x(0.0), y), (_x(1.0), y)], "#dddddd", 1.0))
        parts.append(
            f'<text x="{x:.2f}" y="{_y(0.0) + 18:.2f}" text-anchor="middle" '
            f'font-size="11">{_fmt(float(tick))}</text>'
        )
        parts.append(
            f'<text x="{_x(0.0) - 8:.2f}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-size="11">{_fmt(float(tick))}</text>'
        )
    # dotted iso-F guides: P = F*R / (2R - F)
    for f in (0.2, 0.4, 0.6, 0.8):
        guide = []
        for r in np.linspace(f / 2 + 1e-3, 1.0, 64):
            p = f * r / (2 * r - f)
            if p <= 1.0:
                guide.append((_x(float(r)), _y(float(p))))
        if guide:
            parts.append(_polyline(guide, "#bbbbbb", 1.0, dashed=True))
            parts.append(
                f'<text x="{guide[-1][0] - 4:.2f}" y="{guide[-1][1] - 4:.2f}" '
                f'text-anchor="end" font-size="10" fill="#888888">F={_fmt(f)}</text>'
            )
    parts.append(
        _polyline(
            [(_x(0), _y(0)), (_x(1), _y(0)), (_x(1), _y(1)), (_x(0), _y(1)), (_x(0), _y(0))],
            "#333333",
            1.5,
        )
    )
    parts.append(
        f'<text x="{_SIZE / 2:.0f}" y="{_SIZE - 12}" text-anchor="middle" '
        f'font-size="13">Recall</text>'
    )
    parts.append(
        f'<text x="16" y="{_SIZE / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {_SIZE / 2:.0f})">Precision</text>'
    )
    # curves and legend
    for idx, (label, recall, precision) in enumerate(curves):
        recall = np.asarray(recall, dtype=np.float64)
        precision = np.asarray(precision, dtype=np.float64)
        if recall.shape != precision.shape or recall.ndim != 1:
            raise ValueError("each curve needs matching 1-D recall/precision arrays")
        color = _PALETTE[idx % len(_PALETTE)]
        points = [(_x(float(r)), _y(float(p))) for r, p in zip(recall, precision)]
        if points:
            parts.append(_polyline(points, color))
        ly = _y(0.0) - 14 - 16 * idx
        parts.append(_polyline([(_x(0.03), ly - 4), (_x(0.09), ly - 4)], color))
        parts.append(f'<text x="{_x(0.10):.2f}" y="{ly:.2f}" font-size="12">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_pr_plot(curves, path, title: str = "Precision-recall") -> None:
    Path(path).write_text(pr_plot_svg(curves, title=title))
