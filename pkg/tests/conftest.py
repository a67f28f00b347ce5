"""Shared test fixtures: synthetic predictions, mock resources and small experiment specs."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import pytest

from moeforge.backends.base import DecodingContext, ExpertPool, ExpertPrompt, build_pool
from moeforge.backends.mock import MockBackend
from moeforge.embeddings import EmbeddingTable, Vocabulary
from moeforge.errors import ProtocolError
from moeforge.harness import ExperimentSpec
from moeforge.models import BackendConfig, ExpertPrediction, FusionConfig


def one_hot(index: int, dim: int = 4) -> tuple[float, ...]:
    return tuple(1.0 if i == index else 0.0 for i in range(dim))


def predictions_from(pairs: Sequence[tuple[int, float]]) -> list[ExpertPrediction]:
    """(token, probability) pairs to predictions with expert ids 0..n-1."""
    return [
        ExpertPrediction(expert_id=i, token=t, probability=p, embedding=one_hot(t % 4))
        for i, (t, p) in enumerate(pairs)
    ]


class FlakyBackend(MockBackend):
    """Mock backend that fails every request once the context holds ``fail_after`` tokens."""

    fail_after = 3

    def predict(self, expert: ExpertPrompt, context: DecodingContext) -> ExpertPrediction:
        if len(context.tokens) >= self.fail_after:
            raise ProtocolError("server went away")
        return super().predict(expert, context)


@pytest.fixture
def vocabulary() -> Vocabulary:
    return Vocabulary.synthetic(50)


@pytest.fixture
def table() -> EmbeddingTable:
    return EmbeddingTable.seeded(50, 16, seed=3)


@pytest.fixture
def backend_config() -> BackendConfig:
    return BackendConfig(mock_seed=7, mock_vocab_size=50, mock_embedding_dim=16)


@pytest.fixture
def mock_backend(
    backend_config: BackendConfig, table: EmbeddingTable, vocabulary: Vocabulary
) -> MockBackend:
    return MockBackend(backend_config, table, vocabulary)


@pytest.fixture
def context() -> DecodingContext:
    return DecodingContext("Tell a story")


@pytest.fixture
def pool3() -> ExpertPool:
    return build_pool(["You are a historian:", "You are an economist:", "You are a poet:"])


@pytest.fixture
def small_spec(tmp_path: Path) -> ExperimentSpec:
    """Three experts, two tasks, six steps, everything written under tmp_path."""
    return ExperimentSpec(
        name="test",
        expert_counts=[3],
        tasks=["Tell a story", "Predict the 2025 world economic outlook"],
        steps=6,
        fusion=FusionConfig(num_experts=3, top_k=3, noise_seed=11),
        backend=BackendConfig(mock_seed=5, mock_vocab_size=50, mock_embedding_dim=16),
        output_dir=tmp_path / "run",
    )
