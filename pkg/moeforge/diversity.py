"""Expert-orthogonality metrics over chosen-token embeddings."""

from __future__ import annotations

import csv
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, model_validator

from moeforge.errors import ConfigurationError, MetricError
from moeforge.models import EmbeddingVector, SimilarityRecord, StepRecord
from moeforge.plots import heatmap_export  # noqa: F401  (re-exported)

DEFAULT_WINDOW = 10


def cosine_similarity_matrix(
    embeddings: Sequence[EmbeddingVector],
    expert_ids: Sequence[int] | None = None,
) -> np.ndarray:
    """Symmetric n x n cosine matrix with the diagonal pinned to exactly 1."""
    n = len(embeddings)
    if n < 2:
        raise ConfigurationError("cosine similarity needs at least two embeddings")
    if len({len(e) for e in embeddings}) != 1:
        raise ConfigurationError("embeddings must share one dimension")

    ids = list(expert_ids) if expert_ids is not None else list(range(n))
    vectors = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        expert_id = ids[int(zero[0])]
        raise MetricError(expert_id, f"expert {expert_id} has a zero-norm embedding")

    unit = vectors / norms[:, None]
    matrix = np.clip(unit @ unit.T, -1.0, 1.0)
    upper = np.triu_indices(n, k=1)
    matrix[upper[1], upper[0]] = matrix[upper]
    np.fill_diagonal(matrix, 1.0)
    return matrix


def mean_upper_similarity(matrix: np.ndarray) -> float:
    """Mean of the strictly upper triangle; the diagonal is excluded."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if n < 2:
        raise ConfigurationError("need at least a 2 x 2 matrix")
    return float(np.mean(matrix[np.triu_indices(n, k=1)]))


def orthogonality_score(matrix: np.ndarray) -> float:
    return 1.0 - mean_upper_similarity(matrix)


def similarity_record(
    embeddings: Sequence[EmbeddingVector],
    step: int = 0,
    expert_ids: Sequence[int] | None = None,
) -> SimilarityRecord:
    matrix = cosine_similarity_matrix(embeddings, expert_ids)
    mean_upper = mean_upper_similarity(matrix)
    return SimilarityRecord(
        step=step,
        matrix=tuple(tuple(float(x) for x in row) for row in matrix),
        mean_upper=mean_upper,
        orthogonality=1.0 - mean_upper,
    )


def rolling_average(series: Sequence[float], window: int = DEFAULT_WINDOW) -> list[float]:
    """Trailing mean; the first ``window - 1`` points average over what exists so far."""
    if window < 1:
        raise ConfigurationError("window must be >= 1")
    values = np.asarray(series, dtype=np.float64)
    return [
        float(np.mean(values[max(0, t - window + 1) : t + 1])) for t in range(len(values))
    ]


class OrthogonalityTrace(BaseModel):
    raw: list[float]
    smoothed: list[float]
    window: int = Field(default=DEFAULT_WINDOW, ge=1)

    @model_validator(mode="after")
    def _same_length(self) -> OrthogonalityTrace:
        if len(self.raw) != len(self.smoothed):
            raise ValueError("smoothed series must match raw series length")
        return self

    @classmethod
    def from_series(cls, raw: Sequence[float], window: int = DEFAULT_WINDOW) -> OrthogonalityTrace:
        return cls(raw=list(raw), smoothed=rolling_average(raw, window), window=window)

    @classmethod
    def from_steps(
        cls, steps: Sequence[StepRecord], window: int = DEFAULT_WINDOW
    ) -> OrthogonalityTrace:
        raw = [s.orthogonality for s in steps if s.orthogonality is not None]
        return cls.from_series(raw, window)

    @property
    def mean(self) -> float:
        return float(np.mean(self.raw)) if self.raw else float("nan")

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["step", "score", "smoothed"])
            for step, (score, smoothed) in enumerate(zip(self.raw, self.smoothed)):
                writer.writerow([step, repr(score), repr(smoothed)])
        return path
