"""Per-sample point error, evaluation over a test split, and the comparison report."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_ERROR = math.sqrt(2.0)
REGIMES = ("chained", "composite", "baseline")
REGIME_LABELS = {"chained": "Chained models", "composite": "Composite model", "baseline": "CNN (baseline)"}
CSV_HEADER = [
    "source", "regime", "mean_err", "std_err", "n", "decode_failures",
    "wall_seconds", "label_formula", "label_T", "label_N", "label_total",
]
FOOTER = (
    "Error is the Euclidean distance between predicted and true target points in "
    "normalized coordinates, so it lies in [0, sqrt(2)]. Mean and sample standard "
    "deviation (n-1) are taken over test samples; malformed decodes count as sqrt(2)."
)


@dataclass(frozen=True)
class EvalResult:
    mean_err: float
    std_err: float
    n: int
    decode_failures: int = 0
    per_sample: tuple[float, ...] | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"mean_err": self.mean_err, "std_err": self.std_err, "n": self.n,
                "decode_failures": self.decode_failures}


def point_error(pred, truth) -> float:
    px, py = _xy(pred)
    tx, ty = _xy(truth)
    if not all(math.isfinite(v) for v in (px, py, tx, ty)):
        raise ValueError("point_error needs finite coordinates")
    return math.hypot(px - tx, py - ty)


def _xy(p) -> tuple[float, float]:
    if hasattr(p, "x"):
        return float(p.x), float(p.y)
    x, y = p
    return float(x), float(y)


def summarize(errors: Sequence[float], decode_failures: int = 0) -> EvalResult:
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        raise ValueError("cannot summarize an empty error list")
    std = float(errs.std(ddof=1)) if errs.size > 1 else 0.0
    return EvalResult(float(errs.mean()), std, int(errs.size), decode_failures, tuple(errs.tolist()))


def evaluate(predict: Callable[[Sequence], Sequence], records: Sequence) -> EvalResult:
    """Score ``predict`` on ``records``.

    ``predict`` maps a list of records to one prediction per record: an ``(x, y)``
    pair or Point, or None when the model's output could not be decoded.
    """
    if len(records) == 0:
        raise ValueError("evaluate needs a non-empty test set")
    preds = list(predict(records))
    if len(preds) != len(records):
        raise ValueError(f"predict returned {len(preds)} predictions for {len(records)} records")
    errors, failures = [], 0
    for rec, pred in zip(records, preds):
        truth = rec.scene.target
        if pred is None:
            failures += 1
            errors.append(MAX_ERROR)
        else:
            errors.append(point_error(pred, truth))
    return summarize(errors, failures)


@dataclass(frozen=True)
class TableRow:
    source: str
    regime: str
    mean_err: float
    std_err: float
    n: int | None
    decode_failures: int | None
    wall_seconds: float | None
    label_formula: str
    label_T: int | None
    label_N: int | None
    label_total: int | None


@dataclass
class ComparisonTable:
    rows: list[TableRow] = field(default_factory=list)

    def regimes(self, source: str | None = None) -> list[str]:
        return [r.regime for r in self.rows if source is None or r.source == source]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_to_csv(table: ComparisonTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in table.rows:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    return buf.getvalue()


def _opt(cast, s: str):
    return None if s == "" else cast(s)


def table_from_csv(text: str) -> ComparisonTable:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise ValueError(f"unexpected comparison header {reader.fieldnames}")
    rows = []
    for d in reader:
        rows.append(TableRow(
            source=d["source"], regime=d["regime"],
            mean_err=float(d["mean_err"]), std_err=float(d["std_err"]),
            n=_opt(int, d["n"]), decode_failures=_opt(int, d["decode_failures"]),
            wall_seconds=_opt(float, d["wall_seconds"]), label_formula=d["label_formula"],
            label_T=_opt(int, d["label_T"]), label_N=_opt(int, d["label_N"]),
            label_total=_opt(int, d["label_total"]),
        ))
    return ComparisonTable(rows)


def read_baseline(path: str | Path) -> ComparisonTable:
    return table_from_csv(Path(path).read_text())


def _run_row(run) -> TableRow:
    res = run.final
    lc = run.label_cost
    return TableRow(
        source="measured", regime=run.regime, mean_err=res.mean_err, std_err=res.std_err,
        n=res.n, decode_failures=res.decode_failures, wall_seconds=round(run.wall_seconds, 3),
        label_formula=lc.formula, label_T=lc.T, label_N=lc.N, label_total=lc.total,
    )


def comparison_table(runs: Sequence, baseline: ComparisonTable | None = None) -> tuple[ComparisonTable, list[str]]:
    """One measured row per regime (latest run wins), then any baseline rows."""
    warnings = []
    latest: dict[str, object] = {}
    for run in runs:
        if run.regime not in REGIMES or run.final is None:
            continue
        prev = latest.get(run.regime)
        if prev is not None:
            keep = run if (run.finished_at, run.run_id) >= (prev.finished_at, prev.run_id) else prev
            drop = prev if keep is run else run
            warnings.append(f"duplicate regime {run.regime}: kept {keep.run_id}, ignored {drop.run_id}")
            run = keep
        latest[run.regime] = run
    rows = [_run_row(latest[r]) for r in REGIMES if r in latest]
    if baseline is not None:
        rows += [r for r in baseline.rows]
    for w in warnings:
        log.warning(w)
    return ComparisonTable(rows), warnings


def render_svg(table: ComparisonTable) -> str:
    """Mean error with ±std whiskers per row, data table embedded in <desc>."""
    width, height = 480, 320
    left, right, top, bottom = 60, 20, 20, 60
    ymax = max([0.23] + [r.mean_err + r.std_err for r in table.rows]) * 1.05
    n = max(len(table.rows), 1)
    step = (width - left - right) / n

    def ys(v: float) -> float:
        return top + (height - top - bottom) * (1 - v / ymax)

    desc = "\n".join(f"{r.source},{r.regime},{r.mean_err!r},{r.std_err!r}" for r in table.rows)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<desc>source,regime,mean_err,std_err\n{desc}</desc>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{ys(0):.2f}" x2="{width - right}" y2="{ys(0):.2f}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{ys(0):.2f}" stroke="black"/>',
    ]
    for k in range(6):
        v = ymax * k / 5
        parts.append(f'<text x="{left - 6}" y="{ys(v) + 4:.2f}" font-size="10" text-anchor="end">{v:.3f}</text>')
    for i, r in enumerate(table.rows):
        cx = left + step * (i + 0.5)
        lo, hi = max(r.mean_err - r.std_err, 0.0), r.mean_err + r.std_err
        colour = "orange" if r.source == "measured" else "steelblue"
        parts += [
            f'<line x1="{cx:.2f}" y1="{ys(lo):.2f}" x2="{cx:.2f}" y2="{ys(hi):.2f}" stroke="{colour}"/>',
            f'<line x1="{cx - 6:.2f}" y1="{ys(hi):.2f}" x2="{cx + 6:.2f}" y2="{ys(hi):.2f}" stroke="{colour}"/>',
            f'<line x1="{cx - 6:.2f}" y1="{ys(lo):.2f}" x2="{cx + 6:.2f}" y2="{ys(lo):.2f}" stroke="{colour}"/>',
            f'<rect x="{cx - 4:.2f}" y="{ys(r.mean_err) - 4:.2f}" width="8" height="8" fill="{colour}"/>',
            f'<text x="{cx:.2f}" y="{height - bottom + 16}" font-size="10" text-anchor="middle">{r.regime}</text>',
            f'<text x="{cx:.2f}" y="{height - bottom + 30}" font-size="9" text-anchor="middle">{r.source}</text>',
        ]
    parts.append(f'<text x="14" y="{top + (height - top - bottom) / 2:.2f}" font-size="11" '
                 f'transform="rotate(-90 14 {top + (height - top - bottom) / 2:.2f})" text-anchor="middle">'
                 "mean error</text>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _label_text(r: TableRow) -> str:
    if r.label_total is None or r.label_T is None:
        return r.label_formula
    factor = "N" if r.label_T == 1 else f"{r.label_T}·N"
    return f"{factor} = {r.label_total} (N = {r.label_N})"


def render_markdown(table: ComparisonTable, warnings: Sequence[str] = ()) -> str:
    lines = [
        "# Model comparison", "",
        "| Model | Source | Error (mean ± std) | Training time | Training labels |",
        "|---|---|---|---|---|",
    ]
    for r in table.rows:
        wall = "" if r.wall_seconds is None else f"{r.wall_seconds / 3600:.2f} h"
        labels = _label_text(r)
        lines.append(f"| {REGIME_LABELS.get(r.regime, r.regime)} | {r.source} | "
                     f"{r.mean_err:.3f} ± {r.std_err:.3f} | {wall} | {labels} |")
    lines += ["", FOOTER]
    if warnings:
        lines += ["", "Warnings:", *(f"- {w}" for w in warnings)]
    return "\n".join(lines) + "\n"


def build_report(runs: Sequence, out: str | Path, baseline: ComparisonTable | None = None) -> ComparisonTable:
    """Write ``comparison.csv``, ``comparison.svg`` and ``report.md`` into ``out``."""
    if not runs and baseline is None:
        raise ValueError("build_report needs at least one run")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table, warnings = comparison_table(runs, baseline)
    (out / "comparison.csv").write_text(table_to_csv(table))
    (out / "comparison.svg").write_text(render_svg(table))
    (out / "report.md").write_text(render_markdown(table, warnings))
    return table
