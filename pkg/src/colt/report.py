"""Trace CSV files and static SVG line charts."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

from .tickets import RoundRecord, TicketTrace

CSV_HEADER = ("method,round,sparsity_all_pct,sparsity_eligible_pct,partition1_acc_pct,partition2_acc_pct,"
              "full_acc_pct,similarity_pct,wall_s,seed")
COLUMNS = tuple(CSV_HEADER.split(","))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def trace_rows(trace: TicketTrace) -> list[dict]:
    return [row_for(trace.method, rec) for rec in trace.records]


def row_for(method: str, rec: RoundRecord) -> dict:
    return {
        "method": method, "round": rec.round,
        "sparsity_all_pct": rec.sparsity_all_pct, "sparsity_eligible_pct": rec.sparsity_eligible_pct,
        "partition1_acc_pct": rec.partition1_acc_pct, "partition2_acc_pct": rec.partition2_acc_pct,
        "full_acc_pct": rec.full_acc_pct, "similarity_pct": rec.similarity_pct,
        "wall_s": rec.wall_s, "seed": rec.seed,
    }


def format_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in COLUMNS])
    return buf.getvalue()


def write_csv(rows: Iterable[dict], path) -> None:
    Path(path).write_text(format_csv(rows), encoding="utf-8")


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {header!r}")
        rows = []
        for raw in csv.reader(fh):
            row = dict(zip(COLUMNS, raw))
            for key in COLUMNS[1:]:
                val = row.get(key, "")
                row[key] = None if val == "" else (int(val) if key in ("round", "seed") else float(val))
            rows.append(row)
    return rows


# -- SVG -------------------------------------------------------------------
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart(series: dict[str, Sequence[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
               width: int = 480, height: int = 320) -> str:
    """One ``<polyline>`` per series; axes scaled to the data range."""
    pad_l, pad_r, pad_t, pad_b = 56, 110, 30, 44
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
        f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        out.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{pad_l - 4}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" stroke-width="2" '
                   f'points="{coords}"/>')
        ly = pad_t + 14 * i + 8
        out.append(f'<text x="{pad_l + pw + 10}" y="{ly}" font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _by_method(rows: Iterable[dict]) -> dict[str, list[dict]]:
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row["method"], []).append(row)
    return groups


def _accuracy(row: dict):
    if row.get("full_acc_pct") is not None:
        return row["full_acc_pct"]
    parts = [row.get(k) for k in ("partition1_acc_pct", "partition2_acc_pct") if row.get(k) is not None]
    return sum(parts) / len(parts) if parts else None


def render_report(rows: Sequence[dict], basis: str = "sparsity_all_pct") -> dict[str, str]:
    """Two charts from trace rows: sparsity vs accuracy and sparsity vs rounds.

    Accuracy is the full-dataset figure when present, otherwise the mean of
    the per-partition validation accuracies.
    """
    groups = _by_method(rows)
    acc = {m: [(r[basis], _accuracy(r)) for r in rs if _accuracy(r) is not None] for m, rs in groups.items()}
    rounds = {m: [(r[basis], float(r["round"])) for r in rs] for m, rs in groups.items()}
    return {
        "sparsity_accuracy.svg": line_chart({m: s for m, s in acc.items() if s}, "Accuracy vs sparsity",
                                            "sparsity (%)", "accuracy (%)"),
        "sparsity_rounds.svg": line_chart(rounds, "Pruning rounds vs sparsity", "sparsity (%)", "rounds"),
    }
