"""Tests for the shared models and the trace codec."""

from __future__ import annotations

import json
import math
from pathlib import Path

import pytest
from pydantic import ValidationError

from moeforge.fusion import fuse_step
from moeforge.models import (
    ExpertPrediction,
    FusionConfig,
    GenerationTrace,
    StepRecord,
)
from tests.conftest import predictions_from


def _trace(config: FusionConfig) -> GenerationTrace:
    steps = (
        fuse_step(predictions_from([(1, 0.4), (1, 0.3), (2, 0.6)]), config, step=0),
        fuse_step(predictions_from([(3, 0.9), (2, 0.2), (2, 0.2)]), config, step=1),
    )
    return GenerationTrace(
        config=config,
        prompt="Tell a story",
        tokens=tuple(s.winner for s in steps),
        steps=steps,
        expert_count=3,
    )


class TestExpertPrediction:
    def test_probability_range(self) -> None:
        with pytest.raises(ValidationError):
            ExpertPrediction(expert_id=0, token=1, probability=1.5, embedding=(1.0,))

    def test_non_finite_embedding_rejected(self) -> None:
        with pytest.raises(ValidationError):
            ExpertPrediction(expert_id=0, token=1, probability=0.5, embedding=(math.nan,))

    def test_empty_embedding_rejected(self) -> None:
        with pytest.raises(ValidationError):
            ExpertPrediction(expert_id=0, token=1, probability=0.5, embedding=())

    def test_frozen(self) -> None:
        p = ExpertPrediction(expert_id=0, token=1, probability=0.5, embedding=(1.0,))
        with pytest.raises(ValidationError):
            p.probability = 0.7  # type: ignore[misc]


class TestFusionConfig:
    def test_defaults(self) -> None:
        config = FusionConfig()
        assert config.top_k <= config.num_experts
        assert config.truncation_enabled

    def test_top_k_above_num_experts(self) -> None:
        with pytest.raises(ValidationError):
            FusionConfig(num_experts=3, top_k=4)

    def test_negative_noise_rejected(self) -> None:
        with pytest.raises(ValidationError):
            FusionConfig(base_noise_scale=-0.1)

    def test_infinite_multiplier_disables_truncation(self) -> None:
        assert not FusionConfig(threshold_multiplier=math.inf).truncation_enabled

    def test_for_experts_keeps_full_selection(self) -> None:
        config = FusionConfig(num_experts=3, top_k=3).for_experts(128)
        assert (config.num_experts, config.top_k) == (128, 128)

    def test_for_experts_caps_partial_selection(self) -> None:
        config = FusionConfig(num_experts=9, top_k=5)
        assert config.for_experts(32).top_k == 5
        assert config.for_experts(3).top_k == 3


class TestStepRecord:
    def test_filtered_must_be_subset(self) -> None:
        config = FusionConfig(num_experts=2, top_k=1)
        record = fuse_step(predictions_from([(1, 0.4), (2, 0.6)]), config)
        data = record.model_dump()
        data["filtered"] = (0, 1)
        with pytest.raises(ValidationError):
            StepRecord.model_validate(data)

    def test_orthogonality_is_serialized(self) -> None:
        config = FusionConfig(num_experts=2, top_k=2)
        record = fuse_step(predictions_from([(0, 0.4), (1, 0.6)]), config)
        line = json.loads(record.model_dump_json())
        assert line["orthogonality"] == pytest.approx(1.0)
        for name in ("step", "mean", "std", "threshold", "winner", "noise_sigma"):
            assert name in line
        assert {"expert_id", "token", "probability"} <= set(line["predictions"][0])


class TestGenerationTrace:
    def test_jsonl_round_trip(self) -> None:
        trace = _trace(FusionConfig())
        assert GenerationTrace.from_jsonl(trace.to_jsonl()) == trace

    def test_header_then_one_line_per_step(self) -> None:
        trace = _trace(FusionConfig())
        lines = trace.to_jsonl().splitlines()
        assert len(lines) == 1 + len(trace.steps)
        header = json.loads(lines[0])
        assert header["config"]["top_k"] == 3
        assert header["complete"] is True

    def test_infinite_multiplier_round_trip(self, tmp_path: Path) -> None:
        trace = _trace(FusionConfig(threshold_multiplier=math.inf))
        path = trace.write(tmp_path / "t.trace.jsonl")
        loaded = GenerationTrace.read(path)
        assert math.isinf(loaded.config.threshold_multiplier)
        assert loaded == trace

    def test_infinity_is_strict_json(self) -> None:
        def reject(constant: str) -> float:
            raise ValueError(f"non-standard JSON constant {constant}")

        trace = _trace(FusionConfig(threshold_multiplier=math.inf))
        lines = [json.loads(ln, parse_constant=reject) for ln in trace.to_jsonl().splitlines()]
        assert lines[0]["config"]["threshold_multiplier"] == "inf"
        assert all(step["threshold"] == "inf" for step in lines[1:])

    def test_inf_string_parses_back(self) -> None:
        config = FusionConfig.model_validate_json('{"threshold_multiplier": "inf"}')
        assert not config.truncation_enabled
        assert FusionConfig.model_validate({"threshold_multiplier": 2.0}).truncation_enabled

    def test_tokens_must_match_steps(self) -> None:
        trace = _trace(FusionConfig())
        with pytest.raises(ValidationError):
            GenerationTrace(config=trace.config, prompt="x", tokens=(), steps=trace.steps)
        with pytest.raises(ValidationError):
            GenerationTrace(
                config=trace.config,
                prompt="x",
                tokens=tuple(t + 1 for t in trace.tokens),
                steps=trace.steps,
            )

    def test_empty_text_rejected(self) -> None:
        with pytest.raises(ValueError):
            GenerationTrace.from_jsonl("\n\n")
