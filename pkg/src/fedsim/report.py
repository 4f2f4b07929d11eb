"""Metric tables (CSV) and dependency-free SVG line charts."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .orchestrator import RoundRecord

BASE_COLUMNS = [
    "round", "policy", "seed", "train_loss", "test_loss", "test_acc", "eta",
    "n_labeled", "n_excluded", "selected_ids", "labeled_ids", "excluded_ids", "divergence",
]
NUMERIC_COLUMNS = ["train_loss", "test_loss", "test_acc", "eta", "n_labeled", "n_excluded", "divergence"]
FINAL_WINDOW = 10


def header(num_nodes: int) -> list[str]:
    return BASE_COLUMNS + [f"p_{i}" for i in range(num_nodes)]


def _ids(ids) -> str:
    return ";".join(str(i) for i in ids)


def _num(x) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class MetricsTable:
    columns: list[str]
    rows: list[list[str]]

    @classmethod
    def from_records(cls, records: Sequence[RoundRecord], policy: str, seed: int) -> "MetricsTable":
        if not records:
            raise ValueError("no records")
        K = len(records[0].prob)
        rows = []
        for r in records:
            rows.append([
                str(r.round), policy, str(seed), _num(r.train_loss), _num(r.test_loss), _num(r.test_acc),
                _num(r.lr), str(len(r.labeled)), str(len(r.excluded)), _ids(r.selected),
                _ids(r.labeled), _ids(r.excluded), _num(r.divergence),
            ] + [_num(p) for p in r.prob])
        return cls(header(K), rows)

    def column(self, name: str) -> list[float]:
        if name not in self.columns:
            raise KeyError(f"unknown column '{name}'; valid columns: {', '.join(self.columns)}")
        j = self.columns.index(name)
        return [float(row[j]) if row[j] != "" else math.nan for row in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "MetricsTable":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        return cls(rows[0], rows[1:])

    def final_mean(self, name: str, window: int = FINAL_WINDOW) -> float:
        vals = self.column(name)[-window:]
        return sum(vals) / len(vals)


# --- SVG -------------------------------------------------------------------

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
WIDTH, HEIGHT = 720, 420
MARGIN = dict(left=70, right=160, top=40, bottom=55)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _fmt_tick(v: float) -> str:
    return f"{v:.4g}"


def render_svg(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str, ylabel: str) -> str:
    """One polyline per named (x, y) series, with axes and a legend."""
    if not series:
        raise ValueError("no series to plot")
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv if not math.isnan(y)]
    if not xs or not ys:
        raise ValueError("series are empty")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    left, bottom = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{left + pw}" y2="{bottom}" stroke="black"/>')
    for v in _ticks(x0, x1):
        out.append(f'<line x1="{px(v):.2f}" y1="{bottom}" x2="{px(v):.2f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{px(v):.2f}" y="{bottom + 18}" text-anchor="middle">{_fmt_tick(v)}</text>')
    for v in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{py(v):.2f}" x2="{left}" y2="{py(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(v) + 4:.2f}" text-anchor="end">{_fmt_tick(v)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">round</text>')
    out.append(
        f'<text x="18" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, (name, (xv, yv)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xv, yv) if not math.isnan(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN["top"] + 10 + 18 * k
        lx = left + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(tables: Mapping[str, MetricsTable], metric: str, path) -> None:
    """Plot ``metric`` against round for every table (one line each)."""
    series = {name: (t.column("round"), t.column(metric)) for name, t in tables.items()}
    Path(path).write_text(render_svg(series, title=metric, ylabel=metric))
