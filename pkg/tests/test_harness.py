"""Tests for generation runs, the orthogonality sweep, the ablation and the eval harness."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any

import httpx
import numpy as np
import pytest
from pydantic import ValidationError

from moeforge.backends.http import HttpBackend
from moeforge.errors import ConfigurationError, FixtureError, StepError
from moeforge.harness import (
    AblationVariant,
    EvalCase,
    ExperimentSpec,
    Verdict,
    compare_eval,
    distinct_token_ratio,
    judge,
    load_eval_cases,
    load_resources,
    majority_agreement,
    mean_removed,
    normalize,
    repeated_bigram_rate,
    run_ablation,
    run_eval,
    run_generation,
    run_orthogonality_experiment,
    variant_config,
    write_eval_report,
)
from moeforge.fusion import fuse_step
from moeforge.models import FusionConfig, GenerationTrace, StepRecord
from tests.conftest import FlakyBackend, predictions_from


def _with_backend(spec: ExperimentSpec, **updates: object) -> ExperimentSpec:
    return spec.override(backend={**spec.backend.model_dump(), **updates})


class TestVariantConfig:
    def test_baseline(self) -> None:
        config = variant_config(FusionConfig(num_experts=9, top_k=5), AblationVariant.BASELINE)
        assert (config.num_experts, config.top_k) == (1, 1)
        assert not config.truncation_enabled
        assert config.base_noise_scale == 0.0

    def test_no_truncation(self) -> None:
        base = FusionConfig(num_experts=9, top_k=5)
        config = variant_config(base, AblationVariant.FUSION_NO_TRUNCATION)
        assert math.isinf(config.threshold_multiplier)
        assert config.base_noise_scale == base.base_noise_scale

    def test_no_noise(self) -> None:
        config = variant_config(FusionConfig(), AblationVariant.FUSION_NO_NOISE)
        assert config.base_noise_scale == 0.0
        assert config.truncation_enabled

    def test_full_is_unchanged(self) -> None:
        base = FusionConfig(num_experts=9, top_k=5)
        assert variant_config(base, AblationVariant.FUSION_FULL) == base


class TestExperimentSpec:
    def test_defaults(self) -> None:
        spec = ExperimentSpec()
        assert spec.expert_counts == [128, 32, 3]
        assert spec.fused_expert_count == 3

    @pytest.mark.parametrize(
        "fields",
        [
            {"expert_counts": []},
            {"expert_counts": [3, 0]},
            {"tasks": []},
            {"tasks": ["ok", ""]},
            {"consensus_by_count": {3: 1.5}},
            {"steps": 0},
        ],
    )
    def test_invalid(self, fields: dict[str, object]) -> None:
        with pytest.raises(ValidationError):
            ExperimentSpec(**fields)  # type: ignore[arg-type]

    def test_override_ignores_none(self, small_spec: ExperimentSpec) -> None:
        spec = small_spec.override(steps=2, output_dir=None)
        assert spec.steps == 2
        assert spec.output_dir == small_spec.output_dir

    def test_with_seed(self, small_spec: ExperimentSpec) -> None:
        spec = small_spec.with_seed(99)
        assert spec.fusion.noise_seed == 99
        assert spec.backend.mock_seed == 99

    def test_from_file(self, tmp_path: Path, small_spec: ExperimentSpec) -> None:
        path = tmp_path / "experiment.json"
        path.write_text(small_spec.model_dump_json())
        assert ExperimentSpec.from_file(path) == small_spec

    def test_from_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError):
            ExperimentSpec.from_file(tmp_path / "missing.json")

    def test_consensus_override(self, small_spec: ExperimentSpec) -> None:
        spec = small_spec.override(consensus_by_count={3: 0.9})
        assert spec.backend_for(3).mock_consensus == 0.9
        assert spec.backend_for(5) == spec.backend

    def test_fusion_rescaled_per_count(self) -> None:
        spec = ExperimentSpec(fusion=FusionConfig(num_experts=3, top_k=3))
        assert spec.fusion_for(128, AblationVariant.FUSION_FULL).top_k == 128


class TestRunGeneration:
    def test_trace_shape(self, small_spec: ExperimentSpec) -> None:
        trace = run_generation(small_spec, 0, 3)
        assert len(trace.tokens) == len(trace.steps) == 6
        assert trace.complete
        assert trace.prompt == "Tell a story"
        assert [s.step for s in trace.steps] == list(range(6))
        assert all(s.orthogonality is not None for s in trace.steps)

    def test_reproducible_files(self, small_spec: ExperimentSpec, tmp_path: Path) -> None:
        first = run_generation(small_spec, 1, 3, trace_path=tmp_path / "a.trace.jsonl")
        second = run_generation(small_spec, 1, 3, trace_path=tmp_path / "b.trace.jsonl")
        assert first == second
        a, b = tmp_path / "a.trace.jsonl", tmp_path / "b.trace.jsonl"
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_output(self, small_spec: ExperimentSpec) -> None:
        assert run_generation(small_spec, 0, 3) != run_generation(small_spec.with_seed(1), 0, 3)

    def test_single_expert_wins_its_own_token(self, small_spec: ExperimentSpec) -> None:
        trace = run_generation(small_spec, 0, 1)
        for record in trace.steps:
            assert record.winner == record.predictions[0].token
            assert record.similarity is None

    def test_baseline_forces_one_expert(self, small_spec: ExperimentSpec) -> None:
        trace = run_generation(small_spec, 0, 3, variant=AblationVariant.BASELINE)
        assert trace.expert_count == 1
        assert all(len(s.predictions) == 1 for s in trace.steps)
        assert all(s.noise_sigma == 0.0 for s in trace.steps)

    def test_full_consensus_has_zero_orthogonality(self, small_spec: ExperimentSpec) -> None:
        spec = _with_backend(small_spec, mock_consensus=1.0)
        trace = run_generation(spec, 0, 3)
        for record in trace.steps:
            assert record.orthogonality == pytest.approx(0.0, abs=1e-9)

    def test_noise_sigma_recorded(self, small_spec: ExperimentSpec) -> None:
        trace = run_generation(small_spec, 0, 3)
        for record in trace.steps:
            p_max = max(p.probability for p in record.predictions)
            assert record.noise_sigma == pytest.approx(0.1 * (p_max - 0.5) ** 2)

    def test_task_out_of_range(self, small_spec: ExperimentSpec) -> None:
        with pytest.raises(ConfigurationError):
            run_generation(small_spec, 2, 3)

    def test_backend_failure_writes_partial_trace(
        self, small_spec: ExperimentSpec, tmp_path: Path
    ) -> None:
        resources = load_resources(small_spec)
        backend = FlakyBackend(small_spec.backend, resources.table, resources.vocabulary)
        path = tmp_path / "partial.trace.jsonl"
        with pytest.raises(StepError) as exc_info:
            run_generation(small_spec, 0, 3, resources=resources, backend=backend, trace_path=path)
        assert exc_info.value.expert_ids == [0, 1, 2]

        partial = GenerationTrace.read(path)
        assert not partial.complete
        assert partial.error is not None and "server went away" in partial.error
        assert len(partial.steps) == FlakyBackend.fail_after

        full = run_generation(small_spec, 0, 3, resources=resources)
        assert partial.steps == full.steps[: FlakyBackend.fail_after]


class TestLoadResources:
    def test_mock_uses_synthetic_vocabulary(self, small_spec: ExperimentSpec) -> None:
        resources = load_resources(small_spec)
        assert len(resources.vocabulary) == len(resources.table) == 50
        assert not resources.table.open_ended

    def test_mock_needs_two_tokens(self, small_spec: ExperimentSpec, tmp_path: Path) -> None:
        path = tmp_path / "vocab.json"
        path.write_text('["only"]', encoding="utf-8")
        with pytest.raises(ConfigurationError, match="at least 2"):
            load_resources(small_spec.override(vocabulary_path=str(path)))

    def test_table_shorter_than_vocabulary(
        self, small_spec: ExperimentSpec, tmp_path: Path
    ) -> None:
        path = tmp_path / "e.npy"
        np.save(path, np.ones((1, 4)))
        with pytest.raises(ConfigurationError):
            load_resources(small_spec.override(embedding_path=str(path)))

    def test_http_starts_with_empty_vocabulary(self, small_spec: ExperimentSpec) -> None:
        resources = load_resources(_http_spec(small_spec))
        assert len(resources.vocabulary) == 0
        assert resources.table.open_ended


def _http_spec(spec: ExperimentSpec, **updates: object) -> ExperimentSpec:
    return _with_backend(spec, kind="http", base_url="http://experts.test", **updates)


def _serve(top: dict[str, float], seen: list[dict[str, Any]]) -> httpx.MockTransport:
    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(json.loads(request.content))
        body = {"choices": [{"text": "", "logprobs": {"top_logprobs": [top]}}]}
        return httpx.Response(200, json=body)

    return httpx.MockTransport(handler)


class TestHttpGeneration:
    def test_plain_token_text(self, small_spec: ExperimentSpec) -> None:
        spec = _http_spec(small_spec)
        resources = load_resources(spec)
        seen: list[dict[str, Any]] = []
        transport = _serve({" Paris": -0.1}, seen)
        backend = HttpBackend(
            spec.backend, resources.table, resources.vocabulary, transport=transport
        )
        trace = run_generation(spec, 0, 3, resources=resources, backend=backend)
        backend.close()

        assert trace.complete
        assert len(trace.tokens) == 6
        assert {resources.vocabulary.decode(t) for t in trace.tokens} == {" Paris"}
        assert seen[-1]["prompt"].endswith("Tell a story" + " Paris" * 5)
        assert not any("return_tokens_as_token_ids" in s for s in seen)

    def test_token_ids_with_vocabulary_file(
        self, small_spec: ExperimentSpec, tmp_path: Path
    ) -> None:
        path = tmp_path / "vocab.json"
        path.write_text(json.dumps([f" w{i}" for i in range(2000)]), encoding="utf-8")
        spec = _http_spec(small_spec).override(vocabulary_path=str(path))
        resources = load_resources(spec)
        seen: list[dict[str, Any]] = []
        backend = HttpBackend(
            spec.backend,
            resources.table,
            resources.vocabulary,
            transport=_serve({"token_id:1234": -0.1}, seen),
        )
        trace = run_generation(spec, 0, 3, resources=resources, backend=backend)
        backend.close()

        assert trace.tokens == (1234,) * 6
        assert all(s["return_tokens_as_token_ids"] is True for s in seen)
        assert seen[-1]["prompt"].endswith(" w1234" * 5)

    def test_token_ids_need_a_vocabulary(self, small_spec: ExperimentSpec) -> None:
        spec = _http_spec(small_spec, max_retries=0)
        resources = load_resources(spec)
        transport = _serve({"token_id:1234": -0.1}, [])
        backend = HttpBackend(
            spec.backend, resources.table, resources.vocabulary, transport=transport
        )
        with pytest.raises(StepError, match="vocabulary_path"):
            run_generation(spec, 0, 3, resources=resources, backend=backend)
        backend.close()


class TestOrthogonalityExperiment:
    def test_writes_cell_files(self, small_spec: ExperimentSpec) -> None:
        report = run_orthogonality_experiment(small_spec, plots=False)
        out = Path(small_spec.output_dir)
        assert len(report.cells) == 2
        for task in (0, 1):
            assert (out / "orthogonality" / f"task{task}_n3.trace.jsonl").exists()
            assert (out / "orthogonality" / f"task{task}_n3.csv").exists()
        assert not list(out.rglob("*.svg"))

        with open(out / "orthogonality.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["task", "expert_count", "step", "score", "smoothed"]
        assert len(rows) == 2 * small_spec.steps

        summary = json.loads((out / "summary.json").read_text())
        assert summary["window"] == small_spec.window
        assert summary["ranking"] == {"0": [3], "1": [3]}

    def test_consensus_orders_expert_counts(self, small_spec: ExperimentSpec) -> None:
        spec = small_spec.override(expert_counts=[8, 3], consensus_by_count={8: 0.95, 3: 0.0})
        report = run_orthogonality_experiment(spec, plots=False)
        for task in (0, 1):
            assert report.ranking(task) == [3, 8]

    def test_higher_consensus_lowers_orthogonality_across_seeds(
        self, small_spec: ExperimentSpec
    ) -> None:
        spec = small_spec.override(expert_counts=[8], steps=3)
        wins = 0
        for seed in range(50):
            scores = []
            for consensus in (0.2, 0.9):
                seeded = _with_backend(spec.with_seed(seed), mock_consensus=consensus)
                trace = run_generation(seeded, 0, 8)
                scores.append(sum(s.orthogonality or 0.0 for s in trace.steps) / len(trace.steps))
            wins += scores[1] < scores[0]
        assert wins == 50

    def test_cell_order_is_stable_under_parallelism(self, small_spec: ExperimentSpec) -> None:
        spec = small_spec.override(expert_counts=[3, 4, 5])
        serial = run_orthogonality_experiment(spec, plots=False)
        parallel = run_orthogonality_experiment(spec.override(max_parallel_runs=4), plots=False)
        assert serial == parallel

    def test_single_expert_rejected(self, small_spec: ExperimentSpec) -> None:
        with pytest.raises(ConfigurationError):
            run_orthogonality_experiment(small_spec.override(expert_counts=[3, 1]), plots=False)

    def test_baseline_rejected(self, small_spec: ExperimentSpec) -> None:
        with pytest.raises(ConfigurationError):
            run_orthogonality_experiment(small_spec.override(variant="baseline"), plots=False)


def _records(
    pairs_per_step: list[list[tuple[int, float]]], config: FusionConfig
) -> list[StepRecord]:
    return [fuse_step(predictions_from(pairs), config, i) for i, pairs in enumerate(pairs_per_step)]


class TestAblationMetrics:
    def test_distinct_token_ratio(self) -> None:
        assert distinct_token_ratio([1, 2, 2, 3]) == pytest.approx(0.75)
        assert distinct_token_ratio([]) == 0.0

    def test_repeated_bigram_rate(self) -> None:
        assert repeated_bigram_rate([1, 2, 1, 2, 1, 2]) == pytest.approx(1.0 - 2 / 5)
        assert repeated_bigram_rate([1, 2, 3, 4]) == 0.0
        assert repeated_bigram_rate([7]) == 0.0

    def test_majority_agreement(self) -> None:
        config = FusionConfig(num_experts=3, top_k=3, threshold_multiplier=math.inf)
        steps = _records([[(0, 0.3), (0, 0.4), (1, 0.9)], [(2, 0.5), (1, 0.6), (2, 0.2)]], config)
        assert majority_agreement(steps) == 1.0

    def test_mean_removed(self) -> None:
        config = FusionConfig(num_experts=4, top_k=4, threshold_multiplier=1.0)
        steps = _records([[(0, 0.1), (0, 0.1), (0, 0.1), (1, 0.9)]], config)
        assert mean_removed(steps) == 1.0


class TestAblation:
    def test_rows_and_csv(self, small_spec: ExperimentSpec) -> None:
        rows = run_ablation(small_spec.override(runs=2))
        assert [r.variant for r in rows] == list(AblationVariant)

        by_variant = {r.variant: r for r in rows}
        baseline = by_variant[AblationVariant.BASELINE]
        assert baseline.expert_count == 1
        assert baseline.mean_removed is None
        assert baseline.majority_agreement == 1.0
        assert by_variant[AblationVariant.FUSION_NO_TRUNCATION].mean_removed is None
        assert by_variant[AblationVariant.FUSION_FULL].mean_removed is not None
        assert all(r.generations == 4 for r in rows)
        assert all(r.eval_accuracy is None for r in rows)

        out = Path(small_spec.output_dir)
        with open(out / "ablation.csv", newline="") as f:
            table = list(csv.DictReader(f))
        assert [row["variant"] for row in table] == [v.value for v in AblationVariant]
        assert table[0]["mean_removed"] == ""
        traces = sorted((out / "ablation" / "fusion_full").glob("*.trace.jsonl"))
        assert [p.name for p in traces] == [
            "task0_run0.trace.jsonl",
            "task0_run1.trace.jsonl",
            "task1_run0.trace.jsonl",
            "task1_run1.trace.jsonl",
        ]

    def test_bundle_is_byte_identical(self, small_spec: ExperimentSpec, tmp_path: Path) -> None:
        bundles = []
        for name in ("first", "second"):
            out = tmp_path / name
            run_ablation(small_spec.override(output_dir=out))
            files = [p for p in out.rglob("*") if p.is_file()]
            bundles.append({p.relative_to(out).as_posix(): p.read_bytes() for p in files})
        assert bundles[0] == bundles[1]
        assert "ablation.csv" in bundles[0]

    def test_variants_share_seeds(self, small_spec: ExperimentSpec) -> None:
        run_ablation(small_spec)
        out = Path(small_spec.output_dir) / "ablation"
        full = GenerationTrace.read(out / "fusion_full" / "task0_run0.trace.jsonl")
        no_trunc = GenerationTrace.read(out / "fusion_no_truncation" / "task0_run0.trace.jsonl")
        # Identical predictions at step 0; only the fusion config differs.
        assert full.steps[0].predictions == no_trunc.steps[0].predictions

    def test_noise_breaks_cycles(self, small_spec: ExperimentSpec) -> None:
        spec = small_spec.override(steps=60, runs=3)
        rows = {r.variant: r for r in run_ablation(spec, write_traces=False)}
        full = rows[AblationVariant.FUSION_FULL]
        quiet = rows[AblationVariant.FUSION_NO_NOISE]
        assert quiet.distinct_token_ratio < full.distinct_token_ratio
        assert quiet.repeated_bigram_rate > full.repeated_bigram_rate

    def test_truncation_removes_dissenters(self, small_spec: ExperimentSpec) -> None:
        spec = _with_backend(
            small_spec.override(
                fusion=FusionConfig(num_experts=9, top_k=9, threshold_multiplier=1.0),
                ablation_experts=9,
                expert_counts=[9],
            ),
            mock_consensus=1.0,
            mock_dissenters=2,
        )
        rows = {r.variant: r for r in run_ablation(spec, write_traces=False)}
        full = rows[AblationVariant.FUSION_FULL]
        assert full.mean_removed is not None and full.mean_removed >= 2.0
        assert full.majority_agreement == 1.0
        assert full.fused_probability_variance < rows[
            AblationVariant.FUSION_NO_TRUNCATION
        ].fused_probability_variance

    def test_dissenter_lowers_agreement_without_truncation(
        self, small_spec: ExperimentSpec
    ) -> None:
        # Top 3 of 9: the 0.99 dissenter is always selected. When the two best honest
        # experts split, it wins the three-way tie unless truncation removes it first.
        spec = _with_backend(
            small_spec.override(
                fusion=FusionConfig(num_experts=9, top_k=3, threshold_multiplier=1.0),
                ablation_experts=9,
                expert_counts=[9],
                steps=100,
                runs=3,
            ),
            mock_consensus=0.8,
            mock_dissenters=1,
        )
        rows = {r.variant: r for r in run_ablation(spec, write_traces=False)}
        full = rows[AblationVariant.FUSION_FULL]
        no_trunc = rows[AblationVariant.FUSION_NO_TRUNCATION]
        assert full.mean_removed is not None and full.mean_removed > 0.8
        assert no_trunc.majority_agreement < full.majority_agreement

    def test_eval_accuracy_column(self, small_spec: ExperimentSpec) -> None:
        spec = _with_backend(small_spec, mock_error_rate=0.0)
        cases = [EvalCase(question="Capital of tok3?", references=("tok3",))]
        rows = run_ablation(spec, cases, write_traces=False)
        assert all(r.eval_accuracy == 1.0 for r in rows)


class TestJudge:
    def test_exact_match(self) -> None:
        assert judge("Paris", ["Paris"]) is Verdict.FACTUAL

    def test_whole_word_containment(self) -> None:
        assert judge("The answer is  PARIS today", ["paris"]) is Verdict.FACTUAL
        assert judge("Parisian", ["Paris"]) is Verdict.HALLUCINATED

    def test_any_reference(self) -> None:
        assert judge("tok17", ["tok1", "tok17"]) is Verdict.FACTUAL
        assert judge("tok17", ["tok1"]) is Verdict.HALLUCINATED

    def test_normalization_is_symmetric(self) -> None:
        assert normalize("  New\tYork ") == "new york"
        assert judge("new york", ["New  York"]) is judge("New  York", ["new york"])


class TestLoadEvalCases:
    def test_loads(self, tmp_path: Path) -> None:
        path = tmp_path / "cases.jsonl"
        path.write_text(
            '{"question": "q1", "references": ["a"]}\n\n{"question": "q2", "references": ["b"]}\n'
        )
        cases = load_eval_cases(path)
        assert [c.question for c in cases] == ["q1", "q2"]
        assert cases[0].verdict is None

    @pytest.mark.parametrize(
        "line",
        [
            "not json",
            '{"question": "q"}',
            '{"question": "q", "references": []}',
            '["q", "a"]',
        ],
    )
    def test_malformed_line_number(self, tmp_path: Path, line: str) -> None:
        path = tmp_path / "cases.jsonl"
        path.write_text('{"question": "q1", "references": ["a"]}\n' + line + "\n")
        with pytest.raises(FixtureError) as exc_info:
            load_eval_cases(path)
        assert exc_info.value.line_number == 2

    def test_empty_file(self, tmp_path: Path) -> None:
        path = tmp_path / "cases.jsonl"
        path.write_text("\n")
        with pytest.raises(FixtureError):
            load_eval_cases(path)


class TestRunEval:
    CASES = [
        EvalCase(question="Which token is third?", references=("tok3",)),
        EvalCase(question="Which token is seventeenth?", references=("tok17",)),
        EvalCase(question="Which token is first?", references=("tok1",)),
    ]

    def test_perfect_experts(self, small_spec: ExperimentSpec) -> None:
        spec = _with_backend(small_spec, mock_error_rate=0.0)
        report = run_eval(spec, self.CASES)
        assert report.total == 3
        assert report.hallucinated == 0
        assert report.rate == 0.0
        assert [c.output for c in report.cases] == ["tok3", "tok17", "tok1"]
        assert all(c.verdict is Verdict.FACTUAL for c in report.cases)

    def test_always_wrong_experts(self, small_spec: ExperimentSpec) -> None:
        spec = _with_backend(small_spec, mock_error_rate=1.0)
        report = run_eval(spec, self.CASES)
        assert report.rate == 1.0

    def test_baseline_uses_one_expert(self, small_spec: ExperimentSpec) -> None:
        report = run_eval(small_spec, self.CASES, AblationVariant.BASELINE)
        assert report.expert_count == 1

    def test_latency_grows_with_serial_experts(self, small_spec: ExperimentSpec) -> None:
        spec = _with_backend(
            small_spec.override(ablation_experts=9),
            mock_error_rate=0.0,
            mock_latency_ms=1.0,
            max_concurrent_requests=1,
        )
        fused = run_eval(spec, self.CASES)
        single = run_eval(spec, self.CASES, AblationVariant.BASELINE)
        assert fused.expert_count == 9
        assert fused.mean_latency_s >= single.mean_latency_s
        assert fused.mean_latency_s >= 0.009

    def test_no_cases(self, small_spec: ExperimentSpec) -> None:
        with pytest.raises(ConfigurationError):
            run_eval(small_spec, [])

    def test_compare_baseline_with_fusion(self, small_spec: ExperimentSpec) -> None:
        spec = _with_backend(small_spec, mock_error_rate=0.0)
        reports = compare_eval(spec, self.CASES)
        assert [(r.variant, r.expert_count) for r in reports] == [
            (AblationVariant.BASELINE, 1),
            (AblationVariant.FUSION_FULL, 3),
        ]
        assert all(r.rate == 0.0 for r in reports)

    def test_write_eval_report(self, small_spec: ExperimentSpec, tmp_path: Path) -> None:
        report = run_eval(small_spec, self.CASES, AblationVariant.BASELINE)
        path = write_eval_report(report, tmp_path)
        assert path == tmp_path / "eval" / "baseline.json"
        assert json.loads(path.read_text())["total"] == 3
