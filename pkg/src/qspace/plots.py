"""Minimal SVG rendering of ROC point lists read back from their CSV files."""

from __future__ import annotations

import csv
import io
from typing import Mapping

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
SIZE = 360
MARGIN = 48


def read_roc_csv(text: str) -> list:
    """``(fpr, tpr)`` pairs from a ``threshold,fpr,tpr`` CSV."""
    rows = csv.DictReader(io.StringIO(text))
    return [(float(r["fpr"]), float(r["tpr"])) for r in rows]


def roc_svg(curves: Mapping[str, str]) -> str:
    """One SVG with a step curve per method; ``curves`` maps method name to ROC CSV text."""
    span = SIZE - 2 * MARGIN

    def xy(fpr, tpr):
        return MARGIN + fpr * span, SIZE - MARGIN - tpr * span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
             f'viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">',
             f'<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="#444"/>',
             f'<line x1="{MARGIN}" y1="{SIZE - MARGIN}" x2="{SIZE - MARGIN}" y2="{MARGIN}" '
             'stroke="#bbb" stroke-dasharray="4 3"/>',
             f'<text x="{SIZE / 2}" y="{SIZE - 14}" text-anchor="middle">1 - specificity</text>',
             f'<text x="14" y="{SIZE / 2}" text-anchor="middle" '
             f'transform="rotate(-90 14 {SIZE / 2})">sensitivity</text>']
    for i, (name, text) in enumerate(curves.items()):
        pts = read_roc_csv(text)
        if pts[-1] != (1.0, 1.0):
            pts.append((1.0, 1.0))
        # straight segments between points: tied scores move diagonally, as in the midrank AUC
        path = [("M" if j == 0 else "L") + "{:.2f},{:.2f}".format(*xy(fpr, tpr))
                for j, (fpr, tpr) in enumerate(pts)]
        color = COLORS[i % len(COLORS)]
        parts.append(f'<path d="{" ".join(path)}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        parts.append(f'<text x="{SIZE - MARGIN - 6}" y="{SIZE - MARGIN - 8 - 14 * i}" '
                     f'text-anchor="end" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
