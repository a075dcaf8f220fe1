"""Report bundle: loss-table CSV, one SVG bar chart per dimension, eval CSV, metadata."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping
from xml.sax.saxutils import escape

from .dataset import DIMENSIONS, SCHEMA
from .errors import IoError
from .evaluation import EvalReport
from .style import DEFAULT_K, LossTable

NO_EVAL_CSV = "metric,value\nno eval,\n"

_BAR = "#4c72b0"
_MARKED = "#ff7f0e"  # smallest-loss bars
_W, _H = 480, 260
_LEFT, _BOTTOM, _TOP = 48, 40, 30


def _value_text(loss: float | None) -> str:
    # identical to the string LossTable.to_csv writes
    return "" if loss is None else repr(loss)


def marked_values(table: LossTable, dimension: str, k: int) -> set:
    present = [(e.loss, SCHEMA.index(dimension, e.value), e.value)
               for e in table.entries[dimension] if e.present]
    present.sort(key=lambda t: (t[0], t[1]))
    return {v for _, _, v in present[:k]}


def bar_chart_svg(table: LossTable, dimension: str, k: int) -> str:
    """Bars in schema order, height linear in loss, the k smallest drawn in orange."""
    entries = table.entries[dimension]
    marked = marked_values(table, dimension, k)
    top = max((e.loss for e in entries if e.present), default=0.0)
    plot_h = _H - _BOTTOM - _TOP
    slot = (_W - _LEFT - 10) / len(entries)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<title>attribute-style loss: {escape(dimension)}</title>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">'
        f'{escape(dimension)}</text>',
        f'<line x1="{_LEFT}" y1="{_H - _BOTTOM}" x2="{_W - 10}" y2="{_H - _BOTTOM}" stroke="black"/>',
    ]
    for i, e in enumerate(entries):
        x = _LEFT + i * slot + slot * 0.15
        bw = slot * 0.7
        label = escape(str(e.value))
        bh = 0.0 if not e.present or top == 0 else plot_h * e.loss / top
        if e.present:
            is_min = e.value in marked
            colour = _MARKED if is_min else _BAR
            flag = ' data-marked="1"' if is_min else ""
            parts.append(
                f'<rect class="bar" x="{x:.2f}" y="{_H - _BOTTOM - bh:.2f}" width="{bw:.2f}" '
                f'height="{bh:.2f}" fill="{colour}" data-label="{label}" '
                f'data-value="{_value_text(e.loss)}"{flag}/>')
        shown = _value_text(e.loss) if e.present else "absent"
        parts.append(
            f'<text class="value" x="{x + bw / 2:.2f}" y="{_H - _BOTTOM - 4 - bh:.2f}" '
            f'text-anchor="middle" font-size="7">{shown}</text>')
        parts.append(
            f'<text class="label" x="{x + bw / 2:.2f}" y="{_H - _BOTTOM + 14}" '
            f'text-anchor="middle" font-size="10">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


_RECT = re.compile(r'<rect class="bar"[^>]*data-label="([^"]*)" data-value="([^"]*)"')


def chart_values(svg: str) -> dict[str, str]:
    """Parse an emitted chart back into {label: value string}."""
    return {label: value for label, value in _RECT.findall(svg)}


@dataclass(frozen=True)
class ReportBundle:
    loss_table: Path
    charts: Mapping[str, Path]
    eval_report: Path
    metadata: Path


def emit_report(table: LossTable, eval_report: EvalReport | None, out_dir,
                k: Mapping[str, int] | None = None, metadata: Mapping | None = None) -> ReportBundle:
    k = dict(DEFAULT_K if k is None else k)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        table_path = out / "loss_table.csv"
        table_path.write_text(table.to_csv())
        charts = {}
        for dim in table.dimensions():
            path = out / f"loss_{dim}.svg"
            kd = min(k.get(dim, 1), sum(e.present for e in table.entries[dim]))
            path.write_text(bar_chart_svg(table, dim, kd))
            charts[dim] = path
        eval_path = out / "eval.csv"
        eval_path.write_text(NO_EVAL_CSV if eval_report is None else eval_report.to_csv())
        meta_path = out / "metadata.json"
        meta = {"k": {d: k[d] for d in DIMENSIONS if d in k}, **(metadata or {})}
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise IoError(f"cannot write report to {out}: {err}") from None
    return ReportBundle(table_path, charts, eval_path, meta_path)
