"""Consolidated report over every trace in a run directory."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from moeforge.harness import (
    EvalReport,
    distinct_token_ratio,
    majority_agreement,
    repeated_bigram_rate,
)
from moeforge.models import GenerationTrace
from moeforge.plots import eval_comparison_plot, orthogonality_plot, plots_available

logger = logging.getLogger(__name__)

REPORT_DIR = "report"
CSV_COLUMNS = (
    "task_index",
    "expert_count",
    "variant",
    "runs",
    "mean_steps",
    "mean_orthogonality",
    "distinct_token_ratio",
    "repeated_bigram_rate",
    "majority_agreement",
)
EVAL_CSV_COLUMNS = (
    "path",
    "variant",
    "expert_count",
    "total",
    "hallucinated",
    "rate",
    "mean_latency_s",
)

GroupKey = tuple[int, int, str]


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _cell(value: Any) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def _stepwise_mean(series: list[list[float]]) -> list[float]:
    """Position-wise mean over series of possibly unequal length."""
    length = max((len(s) for s in series), default=0)
    out: list[float] = []
    for i in range(length):
        column = [s[i] for s in series if i < len(s)]
        out.append(sum(column) / len(column))
    return out


def _collect(run_dir: Path) -> tuple[dict[GroupKey, list[GenerationTrace]], list[dict[str, str]]]:
    groups: dict[GroupKey, list[GenerationTrace]] = {}
    warnings: list[dict[str, str]] = []
    for path in sorted(run_dir.rglob("*.trace.jsonl")):
        rel = path.relative_to(run_dir).as_posix()
        if rel.startswith(f"{REPORT_DIR}/"):
            continue
        try:
            trace = GenerationTrace.read(path)
        except (OSError, ValueError, ValidationError) as e:
            warnings.append({"path": rel, "reason": f"unreadable trace: {e}"})
            continue
        if not trace.complete:
            warnings.append({"path": rel, "reason": f"incomplete trace: {trace.error}"})
            continue
        key = (trace.task_index, trace.expert_count, trace.variant)
        groups.setdefault(key, []).append(trace)
    return groups, warnings


def _collect_eval(run_dir: Path, warnings: list[dict[str, str]]) -> list[dict[str, Any]]:
    """One row per ``eval/<variant>.json`` anywhere under the run directory."""
    rows: list[dict[str, Any]] = []
    for path in sorted(run_dir.rglob("eval/*.json")):
        rel = path.relative_to(run_dir).as_posix()
        if rel.startswith(f"{REPORT_DIR}/"):
            continue
        try:
            report = EvalReport.model_validate_json(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            warnings.append({"path": rel, "reason": f"unreadable eval report: {e}"})
            continue
        rows.append(
            {
                "path": rel,
                "variant": report.variant.value,
                "expert_count": report.expert_count,
                "total": report.total,
                "hallucinated": report.hallucinated,
                "rate": report.rate,
                "mean_latency_s": report.mean_latency_s,
            }
        )
    return rows


def _summarize(key: GroupKey, traces: list[GenerationTrace]) -> dict[str, Any]:
    task_index, expert_count, variant = key
    orthogonality = [
        [s.orthogonality for s in t.steps if s.orthogonality is not None] for t in traces
    ]
    flat = [o for series in orthogonality for o in series]
    return {
        "task_index": task_index,
        "expert_count": expert_count,
        "variant": variant,
        "runs": len(traces),
        "mean_steps": _mean([float(len(t.steps)) for t in traces]),
        "mean_orthogonality": _mean(flat),
        "distinct_token_ratio": _mean([distinct_token_ratio(t.tokens) for t in traces]),
        "repeated_bigram_rate": _mean([repeated_bigram_rate(t.tokens) for t in traces]),
        "majority_agreement": _mean([majority_agreement(t.steps) for t in traces]),
        "orthogonality_by_step": _stepwise_mean([s for s in orthogonality if s]),
    }


def emit_report(run_dir: Path, *, plots: bool = True) -> Path:
    """Write ``report.json``, ``report.csv`` and ``report.svg`` under ``report/``.

    Eval reports found under the run directory go to ``eval.csv`` and the bar chart
    ``eval.svg``, and under ``eval`` in ``report.json``. Incomplete or unreadable
    inputs are listed under ``warnings`` and left out of the aggregates. Identical
    inputs give byte-identical files.
    """
    run_dir = Path(run_dir)
    out = run_dir / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)

    groups, warnings = _collect(run_dir)
    rows = [_summarize(key, groups[key]) for key in sorted(groups)]
    evals = _collect_eval(run_dir, warnings)
    for warning in warnings:
        logger.warning("%s: %s", warning["path"], warning["reason"])

    document = {
        "empty": not rows and not evals,
        "runs": sum(r["runs"] for r in rows),
        "groups": rows,
        "eval": evals,
        "warnings": warnings,
    }
    (out / "report.json").write_text(
        json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in CSV_COLUMNS])

    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EVAL_CSV_COLUMNS)
        for row in evals:
            writer.writerow([_cell(row[c]) for c in EVAL_CSV_COLUMNS])

    series = {
        f"task {r['task_index']}, N={r['expert_count']}, {r['variant']}": r["orthogonality_by_step"]
        for r in rows
        if r["orthogonality_by_step"]
    }
    svg = out / "report.svg"
    if series and plots_available(plots):
        orthogonality_plot(series, svg)
    elif svg.exists():
        svg.unlink()

    bars = [
        (f"{r['variant']} N={r['expert_count']}", r["rate"], r["mean_latency_s"]) for r in evals
    ]
    eval_svg = out / "eval.svg"
    if bars and plots_available(plots):
        eval_comparison_plot(bars, eval_svg)
    elif eval_svg.exists():
        eval_svg.unlink()

    logger.info("report for %s: %d groups, %d warnings", run_dir, len(rows), len(warnings))
    return out
