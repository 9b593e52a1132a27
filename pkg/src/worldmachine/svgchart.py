"""Minimal standalone SVG bar charts for sweep reports. No dependencies; the
CSV files carry the authoritative numbers, these are for quick inspection."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

_BAR_H = 18
_GAP = 6
_LEFT = 150
_WIDTH = 640
_TOP = 48


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def bar_chart(path, title: str, labels, values, *, flags=None, x_label: str = "") -> None:
    """Horizontal bar chart around a zero axis.

    values may contain None (undefined): rendered as a gray 'n/a' row.
    flags, when given, mark rows (e.g. statistically significant) with a
    saturated fill; others are drawn pale.
    """
    labels = list(labels)
    values = list(values)
    flags = list(flags) if flags is not None else [True] * len(values)
    rows = len(labels)
    height = _TOP + rows * (_BAR_H + _GAP) + 40
    finite = [abs(v) for v in values if v is not None]
    vmax = max(finite) if finite else 1.0
    vmax = vmax or 1.0
    span = _WIDTH - _LEFT - 80
    cx = _LEFT + span / 2  # zero line

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{height}" font-family="monospace" font-size="12">',
        f'<text x="{_WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{cx}" y1="{_TOP - 10}" x2="{cx}" y2="{height - 30}" stroke="#888" stroke-width="1"/>',
    ]
    for i, (label, value) in enumerate(zip(labels, values)):
        y = _TOP + i * (_BAR_H + _GAP)
        out.append(
            f'<text x="{_LEFT - 8}" y="{y + _BAR_H - 5}" text-anchor="end">{escape(str(label))}</text>'
        )
        if value is None:
            out.append(
                f'<text x="{cx + 6}" y="{y + _BAR_H - 5}" fill="#999">n/a</text>'
            )
            continue
        w = abs(value) / vmax * (span / 2)
        x = cx - w if value < 0 else cx
        good = value < 0  # lower metric / shorter duration reads as good
        color = ("#2b6fb3" if good else "#c0504d") if flags[i] else ("#b9cfe4" if good else "#e4c2c1")
        out.append(f'<rect x="{x:.2f}" y="{y}" width="{max(w, 0.5):.2f}" height="{_BAR_H}" fill="{color}"/>')
        tx = cx - w - 6 if value < 0 else cx + w + 6
        anchor = "end" if value < 0 else "start"
        out.append(
            f'<text x="{tx:.2f}" y="{y + _BAR_H - 5}" text-anchor="{anchor}">{_fmt(value)}</text>'
        )
    if x_label:
        out.append(
            f'<text x="{_WIDTH / 2}" y="{height - 10}" text-anchor="middle" fill="#555">{escape(x_label)}</text>'
        )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def matrix_chart(path, title: str, labels, matrix) -> None:
    """Square heatmap for correlation matrices (values in [-1, 1])."""
    labels = list(labels)
    n = len(labels)
    cell = 46
    left, top = 150, 70
    width = left + n * cell + 40
    height = top + n * cell + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for j, lab in enumerate(labels):
        x = left + j * cell + cell / 2
        out.append(
            f'<text x="{x}" y="{top - 8}" text-anchor="start" transform="rotate(-45 {x} {top - 8})">{escape(str(lab))}</text>'
        )
    for i, lab in enumerate(labels):
        y = top + i * cell
        out.append(f'<text x="{left - 8}" y="{y + cell / 2 + 4}" text-anchor="end">{escape(str(lab))}</text>')
        for j in range(n):
            v = matrix[i][j]
            x = left + j * cell
            if v is None or (isinstance(v, float) and v != v):
                fill, text = "#ddd", "nan"
            else:
                # blue (-1) .. white (0) .. red (+1)
                t = max(-1.0, min(1.0, float(v)))
                if t >= 0:
                    r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
                else:
                    r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
                fill, text = f"rgb({r},{g},{b})", f"{v:.2f}"
            out.append(f'<rect x="{x}" y="{y}" width="{cell - 2}" height="{cell - 2}" fill="{fill}"/>')
            out.append(
                f'<text x="{x + cell / 2 - 1}" y="{y + cell / 2 + 4}" text-anchor="middle">{text}</text>'
            )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
