"""Deterministic CSV / JSON output for coverage, tier, metrics and scale reports.

Rows are sorted, floats have a fixed number of decimals rounded half-up from
their exact binary value, and files end with a newline, so identical inputs
give byte-identical files on every platform.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .dataset import TIER_NAMES
from .evaluate import EvalRun, ScaleSummary
from .probe import KINDS, CoverageReport, format_pct
from .recsys import COLUMNS


class ReportError(ValueError):
    pass


def fmt_float(x: float, places: int = 4) -> str:
    return str(Decimal(x).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


@dataclass
class TierReport:
    """Per-tier (matched, probed) counts for one model's item campaign."""

    model: str
    counts: dict[str, tuple[int, int]]

    def rows(self):
        for name in TIER_NAMES:
            matched, total = self.counts.get(name, (0, 0))
            pct = format_pct(matched, total) if total else ""
            yield [self.model, name, matched, total, pct]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def coverage_csv(reports: list[CoverageReport]) -> str:
    order = {k: n for n, k in enumerate(KINDS)}
    rows = sorted(
        ([r.model, r.kind, r.total, r.matched, r.coverage_pct if r.total else ""] for r in reports),
        key=lambda row: (row[0], order[row[1]]),
    )
    return _csv(["model", "kind", "total", "matched", "coverage_pct"], rows)


def tier_csv(reports: list[TierReport]) -> str:
    rows = [row for r in sorted(reports, key=lambda r: r.model) for row in r.rows()]
    return _csv(["model", "tier", "matched", "total", "coverage_pct"], rows)


def metrics_csv(runs: list[EvalRun]) -> str:
    rows = [[run.model] + [fmt_float(run.metrics[c]) for c in COLUMNS] for run in sorted(runs, key=lambda r: r.model)]
    return _csv(["model", *COLUMNS], rows)


def scale_csv(summary: ScaleSummary) -> str:
    rows = []
    for d in summary.deltas:
        rows.append([
            d["from"],
            d["to"],
            fmt_float(d["memorization"]),
            fmt_float(d["ndcg"]) if "ndcg" in d else "",
            fmt_float(d["hr"]) if "hr" in d else "",
        ])
    rows.sort(key=lambda r: (r[0], r[1]))
    head = _csv(["model", "mean_memorization"], [[m, fmt_float(v)] for m, v in sorted(summary.mean_memorization.items())])
    return head + "\n" + _csv(["from", "to", "memorization_delta", "ndcg_delta", "hr_delta"], rows)


def _json_doc(reports) -> dict:
    first = reports[0]
    if isinstance(first, CoverageReport):
        items = sorted(reports, key=lambda r: (r.model, KINDS.index(r.kind)))
        return {"coverage": [r.to_dict() for r in items]}
    if isinstance(first, TierReport):
        return {
            "tiers": [
                {"model": r.model, "tiers": {n: list(r.counts.get(n, (0, 0))) for n in TIER_NAMES}}
                for r in sorted(reports, key=lambda r: r.model)
            ]
        }
    if isinstance(first, EvalRun):
        return {"runs": [r.to_dict() for r in sorted(reports, key=lambda r: r.model)]}
    if isinstance(first, ScaleSummary):
        return first.to_dict()
    raise ReportError(f"cannot emit {type(first).__name__}")


def render_report(reports, fmt: str = "csv") -> str:
    """Text of a report file for a homogeneous, non-empty list of reports."""
    reports = list(reports)
    if not reports:
        raise ReportError("nothing to report")
    kinds = {type(r) for r in reports}
    if len(kinds) != 1:
        raise ReportError("reports of mixed types")
    if fmt == "json":
        return json.dumps(_json_doc(reports), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if fmt != "csv":
        raise ReportError(f"unknown format {fmt!r}")
    first = reports[0]
    if isinstance(first, CoverageReport):
        return coverage_csv(reports)
    if isinstance(first, TierReport):
        return tier_csv(reports)
    if isinstance(first, EvalRun):
        return metrics_csv(reports)
    if isinstance(first, ScaleSummary):
        if len(reports) != 1:
            raise ReportError("one scale summary per file")
        return scale_csv(first)
    raise ReportError(f"cannot emit {type(first).__name__}")


def emit_report(reports, fmt: str, out: str | Path) -> Path:
    text = render_report(reports, fmt)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return out
