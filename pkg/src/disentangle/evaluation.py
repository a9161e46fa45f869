"""Cause / Iso / Disentangle scores, cross-attribute matrices and sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .checkpoint import atomic_write_text
from .interventions import FeatureHandle, TupleBatch, predict_tuples

log = logging.getLogger(__name__)

SCORE_COLUMNS = (
    "method",
    "split_mode",
    "attribute",
    "layer",
    "k_or_eps",
    "cause",
    "iso",
    "disentangle",
    "n_cause",
    "n_iso",
    "recon_error",
)


def _check_unit(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name}={v} outside [0, 1]")


def score_disentangle(cause: float, iso: float) -> float:
    _check_unit("cause", cause)
    _check_unit("iso", iso)
    return (cause + iso) / 2


def _kind_indices(tb: TupleBatch, kind: str) -> list[int]:
    return [i for i, t in enumerate(tb.tuples) if t.kind == kind]


def _match_rate(pred: torch.Tensor, labels: torch.Tensor) -> float:
    return float((pred == labels).sum().item()) / len(labels)


def score_cause(model, handle: FeatureHandle, tb: TupleBatch) -> float:
    """Fraction of cause tuples whose first predicted token is the source value."""
    if len(tb) == 0:
        raise ValueError("no cause tuples to score")
    if any(t.kind != "cause" for t in tb.tuples):
        raise ValueError("score_cause expects cause tuples only")
    return _match_rate(predict_tuples(model, handle, tb), tb.labels)


def score_iso(model, handle: FeatureHandle, tb: TupleBatch) -> float:
    """Per-distractor match rates, averaged uniformly over distractors."""
    if len(tb) == 0:
        raise ValueError("no iso tuples to score")
    if any(t.kind != "iso" for t in tb.tuples):
        raise ValueError("score_iso expects iso tuples only")
    hit = (predict_tuples(model, handle, tb) == tb.labels).tolist()
    groups: dict[str, list[bool]] = {}
    for t, h in zip(tb.tuples, hit):
        groups.setdefault(t.target, []).append(h)
    return sum(sum(g) / len(g) for _, g in sorted(groups.items())) / len(groups)


@dataclass
class ScoreTable:
    """Scores for one (method, attribute, site, k) cell."""

    method: str
    split_mode: str
    attribute: str
    layer: int
    k_or_eps: float | int
    cause: float
    iso: float
    n_cause: int
    n_iso: int
    recon_error: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_unit("cause", self.cause)
        _check_unit("iso", self.iso)

    @property
    def disentangle(self) -> float:
        return (self.cause + self.iso) / 2

    def row(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k in SCORE_COLUMNS}
        out["disentangle"] = self.disentangle
        return out


def evaluate_handle(
    model,
    handle: FeatureHandle,
    tb: TupleBatch,
    method: str,
    split_mode: str,
    attribute: str,
    k_or_eps: float | int | None = None,
) -> ScoreTable:
    """Score a mixed cause+iso batch for ``attribute``."""
    ci, ii = _kind_indices(tb, "cause"), _kind_indices(tb, "iso")
    cause = score_cause(model, handle, tb.select(ci))
    iso = score_iso(model, handle, tb.select(ii))
    return ScoreTable(
        method=method,
        split_mode=split_mode,
        attribute=attribute,
        layer=handle.site.layer,
        k_or_eps=handle.k if k_or_eps is None else k_or_eps,
        cause=cause,
        iso=iso,
        n_cause=len(ci),
        n_iso=len(ii),
        recon_error=getattr(handle.featurizer, "recon_error", None),
    )


def cross_attribute_matrix(
    model,
    handles: dict[str, FeatureHandle],
    cause_batches: dict[str, TupleBatch],
) -> dict[str, dict[str, float]]:
    """C[A][B]: how often intervening on F_A flips B queries to the source's B value.

    Column B reuses B's cause tuples, so the diagonal is score_cause itself.
    """
    missing = sorted(set(cause_batches) - set(handles))
    if missing:
        raise KeyError(f"no handle for attribute(s) {missing}")
    attrs = sorted(cause_batches)
    return {a: {b: score_cause(model, handles[a], cause_batches[b]) for b in attrs} for a in attrs}


def cause_only(tb: TupleBatch) -> TupleBatch:
    return tb.select(_kind_indices(tb, "cause"))


# sweeps ----------------------------------------------------------------------


@dataclass
class SweepCell:
    layer: int
    k: int
    dev: ScoreTable
    test: ScoreTable


def select_best(cells: list[SweepCell]) -> SweepCell:
    """Highest dev Disentangle; ties go to smaller k, then the lower layer."""
    if not cells:
        raise ValueError("empty sweep")
    return min(cells, key=lambda c: (-c.dev.disentangle, c.k, c.layer))


def sweep(
    model,
    fit: Callable[[int, int], FeatureHandle],
    layers,
    ks,
    dev: TupleBatch,
    test: TupleBatch,
    method: str,
    split_mode: str,
    attribute: str,
) -> tuple[list[SweepCell], SweepCell]:
    """Fit and score every (layer, k) cell; return all cells and the dev-selected one."""
    layers, ks = sorted(set(layers)), sorted(set(ks))
    if not layers or not ks:
        raise ValueError("sweep grids must be non-empty")
    cells = []
    for layer in layers:
        for k in ks:
            handle = fit(layer, k)
            d = evaluate_handle(model, handle, dev, method, split_mode, attribute, k)
            t = evaluate_handle(model, handle, test, method, split_mode, attribute, k)
            log.info("%s %s L%d k=%d dev D=%.3f test D=%.3f", method, attribute, layer, k, d.disentangle, t.disentangle)
            cells.append(SweepCell(layer, k, d, t))
    return cells, select_best(cells)


def trend_violations(tables: list[ScoreTable]) -> dict[str, int]:
    """Count steps (in k order) where Cause drops or Iso rises."""
    ts = sorted(tables, key=lambda t: t.k_or_eps)
    pairs = list(zip(ts, ts[1:]))
    return {
        "steps": len(pairs),
        "cause_drops": sum(b.cause < a.cause for a, b in pairs),
        "iso_rises": sum(b.iso > a.iso for a, b in pairs),
    }


# csv -------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def scores_csv(tables: list[ScoreTable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for t in tables:
        row = t.row()
        w.writerow([_fmt(row[c]) for c in SCORE_COLUMNS])
    return buf.getvalue()


def write_scores(path: str | Path, tables: list[ScoreTable]) -> None:
    atomic_write_text(path, scores_csv(tables))


def read_scores(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def matrix_csv(matrix: dict[str, dict[str, float]]) -> str:
    attrs = sorted(matrix)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["intervened"] + attrs)
    for a in attrs:
        w.writerow([a] + [f"{matrix[a][b]:.3f}" for b in attrs])
    return buf.getvalue()


def write_matrix(path: str | Path, matrix: dict[str, dict[str, float]]) -> None:
    atomic_write_text(path, matrix_csv(matrix))


def read_matrix(path: str | Path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    cols = rows[0][1:]
    return {r[0]: {c: float(v) for c, v in zip(cols, r[1:])} for r in rows[1:]}
