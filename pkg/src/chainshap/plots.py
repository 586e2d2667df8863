"""Small dependency-free SVG charts for importance and robustness reports."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .analysis import ImportanceReport, RobustnessReport

DARK = "#1f4e79"    # positive effect
LIGHT = "#9dc3e6"   # negative effect
GREY = "#bfbfbf"    # neutral


def _svg(width, height, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def importance_bar_svg(report: ImportanceReport, title: str = "") -> str:
    """Horizontal bars of mean |phi|, most important on top.

    Dark bars mark a positive effect and light bars a negative one.
    """
    order = np.argsort(report.s_index)
    n = len(order)
    bar_h, gap, left, plot_w = 18, 6, 80, 360
    top = 30
    height = top + n * (bar_h + gap) + 30
    vmax = float(report.mean_abs_shap.max()) if n and report.mean_abs_shap.max() > 0 else 1.0
    body = [f'<text x="{left}" y="18" font-weight="bold">{escape(title)}</text>']
    for row, j in enumerate(order):
        y = top + row * (bar_h + gap)
        w = plot_w * float(report.mean_abs_shap[j]) / vmax
        colour = {"+": DARK, "-": LIGHT}.get(report.sign[j], GREY)
        name = escape(report.features[j])
        body.append(
            f'<g class="feature" data-feature="{name}">'
            f'<text x="{left - 6}" y="{y + 13}" text-anchor="end">{name}</text>'
            f'<rect class="bar" x="{left}" y="{y}" width="{w:.2f}" height="{bar_h}" fill="{colour}"/>'
            f'<text x="{left + w + 4:.2f}" y="{y + 13}">{report.mean_abs_shap[j]:.3g}</text>'
            "</g>"
        )
    body.append(f'<text x="{left}" y="{height - 8}">mean |causal Shapley value|</text>')
    return _svg(left + plot_w + 80, height, body)


def robustness_strip_svg(report: RobustnessReport, title: str = "") -> str:
    """S_I per feature across shuffled orderings; the base ordering in red."""
    feats = report.features
    n = len(feats)
    col_w, left, top, plot_h = 48, 50, 40, 260
    width = left + n * col_w + 20
    height = top + plot_h + 60
    ypos = lambda r: top + (r - 1) * plot_h / max(n - 1, 1)
    body = [f'<text x="{left}" y="20" font-weight="bold">{escape(title)}</text>']
    for r in range(1, n + 1):
        body.append(f'<text x="{left - 8}" y="{ypos(r) + 4:.1f}" text-anchor="end">{r}</text>')
    for j, f in enumerate(feats):
        cx = left + j * col_w + col_w / 2
        ranks, counts = np.unique(report.s_index[:, j], return_counts=True)
        parts = [f'<g class="feature" data-feature="{escape(f)}">']
        for r, c in zip(ranks, counts):
            half = 4 + 16 * c / report.s_index.shape[0]
            parts.append(f'<rect x="{cx - half:.1f}" y="{ypos(r) - 3:.1f}" width="{2 * half:.1f}" height="6" fill="{LIGHT}"/>')
        parts.append(f'<circle cx="{cx:.1f}" cy="{ypos(report.reference[j]):.1f}" r="4" fill="red"/>')
        parts.append(f'<text x="{cx:.1f}" y="{top + plot_h + 20}" text-anchor="middle">{escape(f)}</text>')
        parts.append("</g>")
        body.append("".join(parts))
    body.append(f'<text x="{left}" y="{height - 8}">Shapley index across {report.s_index.shape[0]} shuffled orderings</text>')
    return _svg(width, height, body)
