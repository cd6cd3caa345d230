"""Dependency-free SVG line charts for sweep summaries.

Output is byte-stable: coordinates are formatted with fixed precision and
series are emitted in the order given.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .metrics import MetricsRecord, aggregate

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=56, right=120, top=36, bottom=44)


def _f(x: float) -> str:
    return f"{x:.2f}"


def line_chart(
    series: Mapping[str, Sequence[tuple[float, float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    y_range: tuple[float, float] = (0.0, 1.0),
) -> str:
    """Render ``{name: [(x, y), ...]}`` as an SVG document string."""
    xs = sorted({x for pts in series.values() for x, _ in pts}) or [0.0, 1.0]
    x0, x1 = xs[0], xs[-1]
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = y_range
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        y = min(max(y, y0), y1)
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
    ]
    # axes and ticks
    left, bottom = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{left + pw}" y2="{bottom}" stroke="black"/>')
    for i in range(6):
        y = y0 + (y1 - y0) * i / 5
        out.append(f'<line x1="{left - 4}" y1="{_f(py(y))}" x2="{left + pw}" y2="{_f(py(y))}" stroke="#dddddd"/>')
        out.append(
            f'<text x="{left - 6}" y="{_f(py(y) + 4)}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.1f}</text>'
        )
    for x in xs:
        out.append(
            f'<text x="{_f(px(x))}" y="{bottom + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{x:g}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="14" y="{MARGIN["top"] + ph / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {MARGIN["top"] + ph / 2:.0f})">{escape(ylabel)}</text>'
    )
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        if pts:
            path = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            for x, y in pts:
                out.append(f'<circle cx="{_f(px(x))}" cy="{_f(py(y))}" r="3" fill="{color}"/>')
        ly = MARGIN["top"] + 14 * i + 6
        lx = left + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_charts(records: Sequence[MetricsRecord], modes: Sequence[str] | None = None) -> dict[str, str]:
    """One chart per (disease, metric): ``{"effusion_kappa.svg": svg, ...}``.

    ``modes`` filters and orders the plotted lines; an empty list yields
    charts with axes only.
    """
    agg = aggregate(records)
    diseases = sorted({d for d, _, _ in agg})
    present = []
    for _, m, _ in agg:
        if m not in present:
            present.append(m)
    order = present if modes is None else [m for m in modes if m in present]
    labels = {"tpr": "true positive rate", "tnr": "true negative rate", "kappa": "Cohen's kappa"}
    charts = {}
    for d in diseases:
        for metric, ylabel in labels.items():
            series = {
                m: [(k, s[metric].mean) for (dd, mm, k), s in agg.items() if dd == d and mm == m]
                for m in order
            }
            y_range = (-0.2, 1.0) if metric == "kappa" else (0.0, 1.0)
            charts[f"{d}_{metric}.svg"] = line_chart(series, f"{d}: {ylabel}", "positive training samples", ylabel, y_range)
    return charts


def write_charts(charts: Mapping[str, str], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(charts):
        p = out_dir / name
        p.write_text(charts[name], encoding="utf-8")
        paths.append(p)
    return paths
