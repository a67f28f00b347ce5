"""Experiment orchestration: generation runs, the expert-count sweep, the ablation and
the fixture-scale factuality evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from moeforge.backends.base import BaseBackend, DecodingContext, ExpertPool, build_pool, load_pool
from moeforge.diversity import OrthogonalityTrace
from moeforge.embeddings import EmbeddingTable, Vocabulary
from moeforge.errors import BackendError, ConfigurationError, FixtureError
from moeforge.experts import default_prompts, predict_all
from moeforge.fusion import fuse_step, truncation_stats
from moeforge.models import (
    BackendConfig,
    BackendKind,
    FusionConfig,
    GenerationTrace,
    StepRecord,
)
from moeforge.noise import apply_noise_to_step
from moeforge.plots import heatmap_export, orthogonality_plot, plots_available
from moeforge.registry import get_backend
from moeforge.rng import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_TASKS = ["Tell a story", "Predict the 2025 world economic outlook"]

_T = TypeVar("_T")
_R = TypeVar("_R")


class AblationVariant(str, Enum):
    BASELINE = "baseline"
    FUSION_FULL = "fusion_full"
    FUSION_NO_TRUNCATION = "fusion_no_truncation"
    FUSION_NO_NOISE = "fusion_no_noise"


def variant_config(config: FusionConfig, variant: AblationVariant) -> FusionConfig:
    """Config-only overrides; every variant runs through the same code path."""
    if variant is AblationVariant.BASELINE:
        return config.model_copy(
            update={
                "num_experts": 1,
                "top_k": 1,
                "threshold_multiplier": float("inf"),
                "base_noise_scale": 0.0,
            }
        )
    if variant is AblationVariant.FUSION_NO_TRUNCATION:
        return config.model_copy(update={"threshold_multiplier": float("inf")})
    if variant is AblationVariant.FUSION_NO_NOISE:
        return config.model_copy(update={"base_noise_scale": 0.0})
    return config


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "moeforge"
    expert_counts: list[int] = Field(default_factory=lambda: [128, 32, 3])
    tasks: list[str] = Field(default_factory=lambda: list(DEFAULT_TASKS))
    steps: int = Field(default=10, ge=1)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    output_dir: Path = Path("runs")
    variant: AblationVariant = AblationVariant.FUSION_FULL

    expert_prompts_path: Path | None = None
    embedding_path: Path | None = None
    vocabulary_path: Path | None = None
    eval_path: Path | None = None

    # expert_count -> mock_consensus, emulating larger pools converging.
    consensus_by_count: dict[int, float] = Field(default_factory=dict)
    # Ablation and eval pool size; defaults to the smallest sweep count.
    ablation_experts: int | None = Field(default=None, ge=1)
    runs: int = Field(default=1, ge=1)
    window: int = Field(default=10, ge=1)
    answer_steps: int = Field(default=1, ge=1)
    max_parallel_runs: int = Field(default=1, ge=1)

    @field_validator("expert_counts")
    @classmethod
    def _counts(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("expert_counts must be non-empty")
        if any(c < 1 for c in value):
            raise ValueError("every expert count must be >= 1")
        return value

    @field_validator("tasks")
    @classmethod
    def _tasks(cls, value: list[str]) -> list[str]:
        if not value or any(not t for t in value):
            raise ValueError("tasks must be a non-empty list of non-empty prompts")
        return value

    @field_validator("consensus_by_count")
    @classmethod
    def _consensus(cls, value: dict[int, float]) -> dict[int, float]:
        if any(not 0.0 <= c <= 1.0 for c in value.values()):
            raise ValueError("consensus values must lie in [0, 1]")
        return value

    @model_validator(mode="after")
    def _fusion_fits(self) -> ExperimentSpec:
        # The sweep rescales the fusion config per count; each rescaling must validate.
        for count in self.expert_counts:
            self.fusion.for_experts(count)
        return self

    @classmethod
    def from_file(cls, path: Path) -> ExperimentSpec:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"Cannot read experiment config {path}: {e}") from e
        return cls.model_validate_json(text)

    def override(self, **fields: Any) -> ExperimentSpec:
        """Validated copy with top-level fields replaced; None values are ignored."""
        data = self.model_dump()
        data.update({k: v for k, v in fields.items() if v is not None})
        return type(self).model_validate(data)

    def with_seed(self, seed: int) -> ExperimentSpec:
        return self.override(
            fusion={**self.fusion.model_dump(), "noise_seed": seed},
            backend={**self.backend.model_dump(), "mock_seed": seed},
        )

    @property
    def fused_expert_count(self) -> int:
        return self.ablation_experts or min(self.expert_counts)

    def fusion_for(self, expert_count: int, variant: AblationVariant) -> FusionConfig:
        return variant_config(self.fusion.for_experts(expert_count), variant)

    def backend_for(self, expert_count: int) -> BackendConfig:
        consensus = self.consensus_by_count.get(expert_count)
        if consensus is None:
            return self.backend
        return self.backend.model_copy(update={"mock_consensus": consensus})


@dataclass(frozen=True)
class RunResources:
    table: EmbeddingTable
    vocabulary: Vocabulary
    pool: ExpertPool

    def experts(self, count: int) -> ExpertPool:
        return self.pool.head(count)


def load_resources(spec: ExperimentSpec) -> RunResources:
    """Embedding table, vocabulary and expert prompts for a spec.

    The mock decodes over a synthetic ``tok<i>`` vocabulary unless one is given. An
    HTTP backend without a vocabulary file starts empty and interns the server's token
    text; without an embedding file it gets an open-ended seeded table, so every id
    and every interned token has a vector.
    """
    http = spec.backend.kind is BackendKind.HTTP
    if spec.vocabulary_path is not None:
        vocabulary = Vocabulary.load(spec.vocabulary_path)
    elif http:
        vocabulary = Vocabulary()
    else:
        vocabulary = Vocabulary.synthetic(spec.backend.mock_vocab_size)

    if spec.embedding_path is not None:
        table = EmbeddingTable.load(spec.embedding_path)
    else:
        table = EmbeddingTable.seeded(
            len(vocabulary),
            spec.backend.mock_embedding_dim,
            seed=spec.backend.mock_seed,
            open_ended=http,
        )
    if len(table) < len(vocabulary):
        raise ConfigurationError(
            f"embedding table has {len(table)} rows but the vocabulary has {len(vocabulary)}"
        )
    if not http and len(table) < 2:
        raise ConfigurationError(
            f"the mock backend needs at least 2 tokens to dissent, got {len(table)}"
        )

    largest = max([*spec.expert_counts, spec.fused_expert_count])
    if spec.expert_prompts_path is not None:
        pool = load_pool(spec.expert_prompts_path)
    else:
        pool = build_pool(default_prompts(largest))
    if len(pool) < largest:
        raise ConfigurationError(f"{largest} experts requested but only {len(pool)} prompts exist")
    return RunResources(table=table, vocabulary=vocabulary, pool=pool)


def _decode(
    pool: ExpertPool,
    config: FusionConfig,
    context: DecodingContext,
    steps: int,
    backend: BaseBackend,
    records: list[StepRecord] | None = None,
) -> list[StepRecord]:
    """The decoding loop: fan out, fuse, perturb the winner's embedding, feed it back.

    Records are appended to ``records`` as they complete, so a caller holding the
    list still sees the finished steps when a later step raises.
    """
    records = [] if records is None else records
    for step in range(steps):
        predictions = predict_all(pool, context, backend)
        record = fuse_step(predictions, config, step)
        embedding, params = apply_noise_to_step(record, config)
        record = record.model_copy(update={"noise_sigma": params.sigma})
        records.append(record)
        context = context.extend(record.winner, embedding)
    return records


def run_generation(
    spec: ExperimentSpec,
    task_index: int,
    expert_count: int,
    *,
    variant: AblationVariant | None = None,
    resources: RunResources | None = None,
    backend: BaseBackend | None = None,
    trace_path: Path | None = None,
) -> GenerationTrace:
    """Generate ``spec.steps`` fused tokens for one task with ``expert_count`` experts.

    The baseline variant always uses a single expert. If the backend fails, the
    partial trace is written to ``trace_path`` marked incomplete and the error re-raised.
    """
    if not 0 <= task_index < len(spec.tasks):
        raise ConfigurationError(f"task index {task_index} outside 0..{len(spec.tasks) - 1}")
    variant = variant or spec.variant
    if variant is AblationVariant.BASELINE:
        expert_count = 1
    config = spec.fusion_for(expert_count, variant)
    resources = resources or load_resources(spec)
    pool = resources.experts(expert_count)
    prompt = spec.tasks[task_index]

    owned = backend is None
    if backend is None:
        backend = get_backend(spec.backend_for(expert_count), resources.table, resources.vocabulary)

    logger.info(
        "run %s: task=%d experts=%d variant=%s steps=%d",
        spec.name, task_index, expert_count, variant.value, spec.steps,
    )
    fields: dict[str, Any] = {
        "config": config,
        "prompt": prompt,
        "task_index": task_index,
        "expert_count": expert_count,
        "variant": variant.value,
    }
    records: list[StepRecord] = []
    try:
        _decode(pool, config, DecodingContext(prompt), spec.steps, backend, records)
    except BackendError as e:
        partial = tuple(records)
        trace = GenerationTrace(
            **fields,
            tokens=tuple(r.winner for r in partial),
            steps=partial,
            complete=False,
            error=str(e),
        )
        if trace_path is not None:
            trace.write(trace_path)
            logger.warning(
                "run aborted after %d steps; partial trace at %s", len(partial), trace_path
            )
        raise
    finally:
        if owned:
            backend.close()

    trace = GenerationTrace(**fields, tokens=tuple(r.winner for r in records), steps=tuple(records))
    if trace_path is not None:
        trace.write(trace_path)
    return trace


def _map(fn: Callable[[_T], _R], items: Sequence[_T], workers: int) -> list[_R]:
    """Ordered map; results are keyed by input position, never by completion order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


# --- Orthogonality sweep ---


class OrthogonalityCell(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_index: int
    expert_count: int
    trace: OrthogonalityTrace
    mean_orthogonality: float


class OrthogonalityReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    window: int
    cells: list[OrthogonalityCell]

    def ranking(self, task_index: int) -> list[int]:
        """Expert counts ordered from most to least orthogonal for one task."""
        cells = [c for c in self.cells if c.task_index == task_index]
        return [
            c.expert_count
            for c in sorted(cells, key=lambda c: (-c.mean_orthogonality, c.expert_count))
        ]


def run_orthogonality_experiment(
    spec: ExperimentSpec,
    *,
    plots: bool = True,
) -> OrthogonalityReport:
    """Run every (task, expert_count) cell and export traces, CSVs, heatmaps and a summary."""
    if any(c < 2 for c in spec.expert_counts):
        raise ConfigurationError("orthogonality needs at least two experts per configuration")
    if spec.variant is AblationVariant.BASELINE:
        raise ConfigurationError("the baseline variant has a single expert and no orthogonality")
    plots = plots_available(plots)
    resources = load_resources(spec)
    out = Path(spec.output_dir)
    cell_dir = out / "orthogonality"
    grid = [(t, c) for t in range(len(spec.tasks)) for c in spec.expert_counts]

    def run_cell(cell: tuple[int, int]) -> tuple[OrthogonalityCell, StepRecord]:
        task_index, count = cell
        stem = f"task{task_index}_n{count}"
        trace = run_generation(
            spec,
            task_index,
            count,
            resources=resources,
            trace_path=cell_dir / f"{stem}.trace.jsonl",
        )
        series = OrthogonalityTrace.from_steps(trace.steps, spec.window)
        series.to_csv(cell_dir / f"{stem}.csv")
        cell_result = OrthogonalityCell(
            task_index=task_index,
            expert_count=count,
            trace=series,
            mean_orthogonality=series.mean,
        )
        return cell_result, trace.steps[len(trace.steps) // 2]

    results = _map(run_cell, grid, spec.max_parallel_runs)
    cells = [cell for cell, _ in results]
    report = OrthogonalityReport(name=spec.name, window=spec.window, cells=cells)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "orthogonality.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["task", "expert_count", "step", "score", "smoothed"])
        for cell in cells:
            for step, (score, smoothed) in enumerate(zip(cell.trace.raw, cell.trace.smoothed)):
                writer.writerow(
                    [cell.task_index, cell.expert_count, step, repr(score), repr(smoothed)]
                )

    summary = {
        "name": spec.name,
        "window": spec.window,
        "cells": [
            {
                "task_index": c.task_index,
                "task": spec.tasks[c.task_index],
                "expert_count": c.expert_count,
                "steps": len(c.trace.raw),
                "mean_orthogonality": c.mean_orthogonality,
            }
            for c in cells
        ],
        "ranking": {str(t): report.ranking(t) for t in range(len(spec.tasks))},
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    if plots:
        # Matplotlib rc state is global, so SVGs are drawn after the parallel section.
        for cell, middle in results:
            if middle.similarity is not None:
                heatmap_export(
                    middle.similarity,
                    cell_dir / f"task{cell.task_index}_n{cell.expert_count}.heatmap.svg",
                    title=f"task {cell.task_index}, N={cell.expert_count}, step {middle.step}",
                )
        orthogonality_plot(
            {f"task {c.task_index}, N={c.expert_count}": c.trace.smoothed for c in cells},
            out / "orthogonality.svg",
        )
    logger.info("orthogonality sweep %s: %d cells written to %s", spec.name, len(cells), out)
    return report


# --- Ablation metrics ---


def distinct_token_ratio(tokens: Sequence[int]) -> float:
    return len(set(tokens)) / len(tokens) if tokens else 0.0


def repeated_bigram_rate(tokens: Sequence[int]) -> float:
    """Share of bigram occurrences that repeat an earlier bigram."""
    bigrams = list(zip(tokens, tokens[1:]))
    if not bigrams:
        return 0.0
    return 1.0 - len(set(bigrams)) / len(bigrams)


def fused_probability_variance(steps: Sequence[StepRecord]) -> float:
    """Mean over steps of the population variance of the probabilities that voted."""
    if not steps:
        return 0.0
    total = 0.0
    for record in steps:
        std = truncation_stats([p.probability for p in record.subset(record.filtered)], 0.0).std
        total += std * std
    return total / len(steps)


def plurality_token(record: StepRecord) -> int:
    """Most frequent token over all experts; ties to the lowest token id."""
    counts = Counter(p.token for p in record.predictions)
    top = max(counts.values())
    return min(t for t, n in counts.items() if n == top)


def majority_agreement(steps: Sequence[StepRecord]) -> float:
    if not steps:
        return 0.0
    return sum(1 for r in steps if r.winner == plurality_token(r)) / len(steps)


def mean_removed(steps: Sequence[StepRecord]) -> float:
    if not steps:
        return 0.0
    return sum(len(r.selected) - len(r.filtered) for r in steps) / len(steps)


class AblationRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: AblationVariant
    expert_count: int
    generations: int
    distinct_token_ratio: float
    repeated_bigram_rate: float
    fused_probability_variance: float
    majority_agreement: float
    # None when truncation is disabled for the variant.
    mean_removed: float | None
    eval_accuracy: float | None = None


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def run_ablation(
    spec: ExperimentSpec,
    eval_cases: Sequence[EvalCase] | None = None,
    *,
    write_traces: bool = True,
) -> list[AblationRow]:
    """Run every variant over ``spec.runs`` repetitions of every task.

    Repetition r uses the same derived seeds for all variants, so variants differ
    only in configuration.
    """
    resources = load_resources(spec)
    out = Path(spec.output_dir)
    count = spec.fused_expert_count
    rows: list[AblationRow] = []

    for variant in AblationVariant:
        jobs = [(r, t) for r in range(spec.runs) for t in range(len(spec.tasks))]

        def run_job(job: tuple[int, int], variant: AblationVariant = variant) -> GenerationTrace:
            run, task_index = job
            run_spec = spec.override(
                fusion={
                    **spec.fusion.model_dump(),
                    "noise_seed": derive_seed(spec.fusion.noise_seed, "noise", run),
                },
                backend={
                    **spec.backend.model_dump(),
                    "mock_seed": derive_seed(spec.backend.mock_seed, "mock", run),
                },
            )
            path = None
            if write_traces:
                path = out / "ablation" / variant.value / f"task{task_index}_run{run}.trace.jsonl"
            return run_generation(
                run_spec,
                task_index,
                count,
                variant=variant,
                resources=resources,
                trace_path=path,
            )

        traces = _map(run_job, jobs, spec.max_parallel_runs)
        config = spec.fusion_for(count, variant)
        accuracy = None
        if eval_cases:
            accuracy = 1.0 - run_eval(spec, eval_cases, variant, resources=resources).rate
        rows.append(
            AblationRow(
                variant=variant,
                expert_count=config.num_experts,
                generations=len(traces),
                distinct_token_ratio=_mean([distinct_token_ratio(t.tokens) for t in traces]),
                repeated_bigram_rate=_mean([repeated_bigram_rate(t.tokens) for t in traces]),
                fused_probability_variance=_mean(
                    [fused_probability_variance(t.steps) for t in traces]
                ),
                majority_agreement=_mean([majority_agreement(t.steps) for t in traces]),
                mean_removed=_mean([mean_removed(t.steps) for t in traces])
                if config.truncation_enabled
                else None,
                eval_accuracy=accuracy,
            )
        )
        logger.info("ablation %s: %d generations", variant.value, len(traces))

    write_ablation_csv(rows, out / "ablation.csv")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(AblationRow.model_fields)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            data = row.model_dump(mode="json")
            writer.writerow(["" if data[c] is None else data[c] for c in columns])
    return path


# --- Factuality evaluation ---


class Verdict(str, Enum):
    FACTUAL = "factual"
    HALLUCINATED = "hallucinated"


class EvalCase(BaseModel):
    model_config = ConfigDict(frozen=True)

    question: str = Field(min_length=1)
    references: tuple[str, ...]
    output: str | None = None
    verdict: Verdict | None = None

    @field_validator("references")
    @classmethod
    def _non_empty(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        if not value or any(not r for r in value):
            raise ValueError("references must be a non-empty list of non-empty strings")
        return value

    @model_validator(mode="after")
    def _judged(self) -> EvalCase:
        if self.verdict is not None and self.output is None:
            raise ValueError("a verdict requires a judged output")
        return self


def load_eval_cases(path: Path) -> list[EvalCase]:
    """JSONL with one ``{"question": str, "references": [str, ...]}`` per line."""
    cases: list[EvalCase] = []
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("expected a JSON object")
            cases.append(EvalCase(question=obj["question"], references=tuple(obj["references"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FixtureError(line_number, f"malformed eval case: {e}") from e
    if not cases:
        raise FixtureError(1, f"no eval cases in {path}")
    return cases


def normalize(text: str) -> str:
    return " ".join(text.casefold().split())


def judge(output: str, references: Sequence[str]) -> Verdict:
    """Factual if a normalized reference equals the output or occurs in it as whole words."""
    padded = f" {normalize(output)} "
    for reference in references:
        if f" {normalize(reference)} " in padded:
            return Verdict.FACTUAL
    return Verdict.HALLUCINATED


class EvalReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: AblationVariant
    expert_count: int
    total: int
    hallucinated: int
    rate: float
    mean_latency_s: float
    cases: list[EvalCase]


def run_eval(
    spec: ExperimentSpec,
    cases: Sequence[EvalCase],
    variant: AblationVariant | None = None,
    *,
    resources: RunResources | None = None,
) -> EvalReport:
    """Answer every question and judge it; returns hallucination rate and mean latency.

    The first reference known to the vocabulary is passed to the backend as an answer
    hint (only the mock reads it).
    """
    if not cases:
        raise ConfigurationError("no eval cases")
    variant = variant or spec.variant
    count = 1 if variant is AblationVariant.BASELINE else spec.fused_expert_count
    config = spec.fusion_for(count, variant)
    resources = resources or load_resources(spec)
    pool = resources.experts(count)
    backend = get_backend(spec.backend_for(count), resources.table, resources.vocabulary)

    judged: list[EvalCase] = []
    elapsed = 0.0
    try:
        for case in cases:
            encoded = (resources.vocabulary.encode(r) for r in case.references)
            hint = next((t for t in encoded if t is not None), None)
            context = DecodingContext(case.question, answer_hint=hint)
            start = time.perf_counter()
            records = _decode(pool, config, context, spec.answer_steps, backend)
            elapsed += time.perf_counter() - start
            output = "".join(resources.vocabulary.decode(r.winner) for r in records)
            judged.append(
                case.model_copy(
                    update={"output": output, "verdict": judge(output, case.references)}
                )
            )
    finally:
        backend.close()

    hallucinated = sum(1 for c in judged if c.verdict is Verdict.HALLUCINATED)
    report = EvalReport(
        variant=variant,
        expert_count=count,
        total=len(judged),
        hallucinated=hallucinated,
        rate=hallucinated / len(judged),
        mean_latency_s=elapsed / len(judged),
        cases=judged,
    )
    logger.info(
        "eval %s: %d/%d hallucinated, %.4fs per query",
        variant.value, hallucinated, len(judged), report.mean_latency_s,
    )
    return report


# Variants the eval compares when none is named.
EVAL_COMPARISON = (AblationVariant.BASELINE, AblationVariant.FUSION_FULL)


def compare_eval(
    spec: ExperimentSpec,
    cases: Sequence[EvalCase],
    variants: Sequence[AblationVariant] = EVAL_COMPARISON,
    *,
    resources: RunResources | None = None,
) -> list[EvalReport]:
    """Run the same cases through each variant over one set of resources."""
    resources = resources or load_resources(spec)
    return [run_eval(spec, cases, variant, resources=resources) for variant in variants]


def write_eval_report(report: EvalReport, output_dir: Path) -> Path:
    path = Path(output_dir) / "eval" / f"{report.variant.value}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
