"""Human-readable summaries and SVG heatmaps built from scores/matrix CSVs."""

from __future__ import annotations

import csv
import io
import logging
from html import escape
from pathlib import Path

from .checkpoint import atomic_write_text
from .evaluation import read_matrix, read_scores

log = logging.getLogger(__name__)


def pct(v: float) -> str:
    return f"{100 * v:.1f}"


def summary_rows(scores: list[dict]) -> tuple[list[str], list[list[str]]]:
    """Method x split-mode Disentangle, averaged over attributes (one row per method)."""
    modes = sorted({r["split_mode"] for r in scores})
    methods = sorted({r["method"] for r in scores})
    header = ["method"] + modes
    rows = []
    for m in methods:
        row = [m]
        for mode in modes:
            vals = [float(r["disentangle"]) for r in scores if r["method"] == m and r["split_mode"] == mode]
            row.append(pct(sum(vals) / len(vals)) if vals else "")
        rows.append(row)
    return header, rows


def summary_text(header: list[str], rows: list[list[str]]) -> str:
    table = [header] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    return "\n".join(lines) + "\n"


def summary_csv(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cell_color(v: float) -> str:
    """White at 0, dark blue at 1, linear per channel."""
    v = min(max(v, 0.0), 1.0)
    lo, hi = (255, 255, 255), (8, 48, 107)
    r, g, b = (round(a + (c - a) * v) for a, c in zip(lo, hi))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(matrix: dict[str, dict[str, float]], title: str = "") -> str:
    attrs = sorted(matrix)
    cell, left, top = 48, 90, 60
    size_w = left + cell * len(attrs) + 10
    size_h = top + cell * len(attrs) + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_w}" height="{size_h}" font-family="sans-serif" font-size="11">',
        f'<text x="4" y="14">{escape(title)}</text>',
    ]
    for j, b in enumerate(attrs):
        out.append(f'<text x="{left + j * cell + 4}" y="{top - 8}">{escape(b)}</text>')
    for i, a in enumerate(attrs):
        y = top + i * cell
        out.append(f'<text x="4" y="{y + cell // 2 + 4}">{escape(a)}</text>')
        for j, b in enumerate(attrs):
            v = matrix[a][b]
            x = left + j * cell
            fg = "#ffffff" if v > 0.5 else "#000000"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{cell_color(v)}"/>')
            out.append(f'<text x="{x + 8}" y="{y + cell // 2 + 4}" fill="{fg}">{pct(v)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def build_report(run_dir: str | Path, out: str | Path) -> list[Path]:
    """Collect every scores.csv / matrix*.csv under ``run_dir`` into ``out``."""
    run_dir, out = Path(run_dir), Path(out)
    scores = []
    for p in sorted(run_dir.rglob("scores.csv")):
        scores.extend(read_scores(p))
    written = []
    if not scores:
        log.warning("no scores found under %s; writing an empty report", run_dir)
    header, rows = summary_rows(scores)
    atomic_write_text(out / "summary.txt", summary_text(header, rows) if scores else "")
    atomic_write_text(out / "summary.csv", summary_csv(header, rows) if scores else "")
    written += [out / "summary.txt", out / "summary.csv"]
    for p in sorted(run_dir.rglob("matrix*.csv")):
        name = p.relative_to(run_dir).with_suffix("").as_posix().replace("/", "_")
        target = out / f"{name}.svg"
        atomic_write_text(target, heatmap_svg(read_matrix(p), name))
        written.append(target)
    return written
