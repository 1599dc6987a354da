"""Reporting on explorer results: Markdown Pareto tables, scatter CSV,
dependency-free SVG scatter plots with the front polyline, and the
Top / Size-L / Size-H / MAC-L / MAC-H model selection summary."""

from __future__ import annotations

import csv
import math
import os
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .explore import ResultRecord, pareto_front

SELECTION_NAMES = ("Top", "Size-H", "MAC-H", "Size-L", "MAC-L")
_ACC_DROP = 0.05  # "-H" rule: cheapest model within 5 points of Top


def _finite(records):
    return [r for r in records if r.status == "ok" and np.isfinite(r.bal_acc)]


def select_models(records, precision: str = "float") -> dict[str, ResultRecord]:
    """Deployment candidates from the Pareto curves of one precision.

    Top is the accuracy maximum; Size-L / MAC-L are the smallest model
    and the fewest-MAC model on the respective front; Size-H / MAC-H are
    the cheapest front members whose accuracy drop from Top is below 5
    points.
    """
    pool = [r for r in _finite(records) if r.precision == precision]
    if not pool:
        raise ValueError(f"no usable {precision} records")
    top = max(pool, key=lambda r: (r.bal_acc, -r.macs, r.spec))
    floor = top.bal_acc - _ACC_DROP
    size_front = pareto_front(pool, "params")
    mac_front = pareto_front(pool, "macs")

    def cheapest(front, cost, keep_all):
        members = front if keep_all else [r for r in front if r.bal_acc > floor]
        return min(members, key=lambda r: (cost(r), r.spec))

    return {
        "Top": top,
        "Size-H": cheapest(size_front, lambda r: r.size_bytes, False),
        "MAC-H": cheapest(mac_front, lambda r: r.macs, False),
        "Size-L": cheapest(size_front, lambda r: r.size_bytes, True),
        "MAC-L": cheapest(mac_front, lambda r: r.macs, True),
    }


def _fmt(x, digits=4):
    return f"{x:.{digits}f}" if np.isfinite(x) else "-"


def pareto_table_md(records, axis: str, precision: str) -> str:
    """Markdown table of one precision's Pareto front along one axis."""
    pool = [r for r in _finite(records) if r.precision == precision]
    front = pareto_front(pool, axis)
    lines = [
        f"| spec | {axis} | params | size (B) | bal. acc. | std |",
        "| --- | ---: | ---: | ---: | ---: | ---: |",
    ]
    for r in front:
        lines.append(
            f"| `{r.spec}` | {getattr(r, axis)} | {r.params} | {r.size_bytes} "
            f"| {_fmt(r.bal_acc)} | {_fmt(r.bal_acc_std)} |"
        )
    return "\n".join(lines)


def selection_table_md(records, precision: str) -> str:
    selected = select_models(records, precision)
    lines = [
        "| selection | spec | bal. acc. | acc | MAE | size (B) | MACs |",
        "| --- | --- | ---: | ---: | ---: | ---: | ---: |",
    ]
    for name in SELECTION_NAMES:
        r = selected[name]
        lines.append(
            f"| {name} | `{r.spec}` | {_fmt(r.bal_acc)} | {_fmt(r.acc)} "
            f"| {_fmt(r.mae)} | {r.size_bytes} | {r.macs} |"
        )
    return "\n".join(lines)


def write_scatter_csv(records, path, digest: str | None = None) -> None:
    """Every record as one scatter point, with front-membership flags."""
    records = sorted(_finite(records), key=lambda r: (r.precision, r.spec))
    fronts = {}
    for precision in {r.precision for r in records}:
        pool = [r for r in records if r.precision == precision]
        for axis in ("macs", "params"):
            fronts[(precision, axis)] = {r.spec for r in pareto_front(pool, axis)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if digest:
            fh.write(f"# ircount-config-digest: {digest}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["spec", "precision", "family", "window", "params", "macs",
             "size_bytes", "bal_acc", "bal_acc_std", "on_macs_front",
             "on_params_front"]
        )
        for r in records:
            writer.writerow(
                [r.spec, r.precision, r.family, r.window, r.params, r.macs,
                 r.size_bytes, _fmt(r.bal_acc, 6), _fmt(r.bal_acc_std, 6),
                 int(r.spec in fronts[(r.precision, "macs")]),
                 int(r.spec in fronts[(r.precision, "params")])]
            )


_SVG_W, _SVG_H = 640, 480
_MARGIN = 56
_FAMILY_COLORS = {
    "sf": "#1f77b4",
    "mc": "#ff7f0e",
    "mv": "#2ca02c",
    "cat": "#d62728",
    "lstm": "#9467bd",
    "tcn": "#8c564b",
}


def render_svg(records, axis: str, precision: str) -> str:
    """Accuracy-versus-cost scatter (log cost axis) with the Pareto
    polyline; each record appears exactly once, tagged with its spec."""
    pool = [r for r in _finite(records) if r.precision == precision]
    if not pool:
        raise ValueError(f"no usable {precision} records")
    front = pareto_front(pool, axis)
    costs = [getattr(r, axis) for r in pool]
    lo, hi = math.log10(max(min(costs), 1)), math.log10(max(max(costs), 2))
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5

    def xpos(cost):
        t = (math.log10(max(cost, 1)) - lo) / (hi - lo)
        return _MARGIN + t * (_SVG_W - 2 * _MARGIN)

    def ypos(acc):
        return _SVG_H - _MARGIN - acc * (_SVG_H - 2 * _MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
        f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f"<title>{escape(f'balanced accuracy vs {axis} ({precision})')}</title>",
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        # axes
        f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<text x="{_SVG_W // 2}" y="{_SVG_H - 16}" text-anchor="middle" '
        f'font-size="14">{escape(axis)} (log scale)</text>',
        f'<text x="16" y="{_SVG_H // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 16 {_SVG_H // 2})">balanced accuracy</text>',
    ]
    pts = " ".join(
        f"{xpos(getattr(r, axis)):.1f},{ypos(r.bal_acc):.1f}" for r in front
    )
    parts.append(
        f'<polyline points="{pts}" fill="none" stroke="black" '
        f'stroke-dasharray="6 4" stroke-width="1.5"/>'
    )
    for r in sorted(pool, key=lambda q: q.spec):
        color = _FAMILY_COLORS.get(r.family, "#333333")
        parts.append(
            f'<circle cx="{xpos(getattr(r, axis)):.1f}" '
            f'cy="{ypos(r.bal_acc):.1f}" r="4" fill="{color}" '
            f"fill-opacity=\"0.7\" data-spec={quoteattr(r.spec)}/>"
        )
    parts.append("</svg>")
    return "\n".join(parts)


def write_report(records, out_dir, axis: str = "macs", digest: str | None = None):
    """Emit report.md, scatter.csv and per-precision SVG plots.

    Returns the list of files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = list(records)
    if not _finite(records):
        raise ValueError("no usable records")
    precisions = [p for p in ("float", "int8") if any(
        r.precision == p for r in _finite(records)
    )]
    written = []

    scatter_path = os.path.join(out_dir, "scatter.csv")
    write_scatter_csv(records, scatter_path, digest=digest)
    written.append(scatter_path)

    sections = ["# Architecture exploration report"]
    if digest:
        sections.append(f"Config digest: `{digest}`")
    for precision in precisions:
        sections.append(f"## Pareto front ({precision}, by {axis})")
        sections.append(pareto_table_md(records, axis, precision))
        sections.append(f"## Selected models ({precision})")
        sections.append(selection_table_md(records, precision))
        svg_path = os.path.join(out_dir, f"pareto_{axis}_{precision}.svg")
        with open(svg_path, "w", encoding="utf-8") as fh:
            if digest:
                fh.write(f"<!-- ircount-config-digest: {digest} -->\n")
            fh.write(render_svg(records, axis, precision))
        written.append(svg_path)
        sections.append(f"![pareto {precision}](pareto_{axis}_{precision}.svg)")
    md_path = os.path.join(out_dir, "report.md")
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(sections) + "\n")
    written.append(md_path)
    return written
