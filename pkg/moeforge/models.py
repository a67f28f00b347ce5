"""Pydantic v2 models shared by every moeforge module, plus the trace JSONL codec."""

from __future__ import annotations

import math
from enum import Enum
from pathlib import Path
from typing import Annotated

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    computed_field,
    field_validator,
    model_validator,
)

# One row of an embedding table; dimension is constant across a run.
EmbeddingVector = tuple[float, ...]


def _decode_unbounded(value: object) -> object:
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return value


def _encode_unbounded(value: float) -> float | str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


# A float that may be infinite; infinity is written to JSON as the string "inf".
UnboundedFloat = Annotated[
    float,
    BeforeValidator(_decode_unbounded),
    PlainSerializer(_encode_unbounded, return_type=float | str, when_used="json"),
]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True)


class EmptyTruncationPolicy(str, Enum):
    KEEP_ALL = "keep_all"
    KEEP_MAX_PROBABILITY = "keep_max_probability"


class FinalTieBreak(str, Enum):
    LOWEST_TOKEN_ID = "lowest_token_id"


class BackendKind(str, Enum):
    MOCK = "mock"
    HTTP = "http"


class ExpertPrediction(_Frozen):
    expert_id: int = Field(ge=0)
    token: int = Field(ge=0)
    probability: float = Field(ge=0.0, le=1.0)
    embedding: EmbeddingVector

    @field_validator("embedding")
    @classmethod
    def _finite(cls, value: EmbeddingVector) -> EmbeddingVector:
        if not value:
            raise ValueError("embedding must have dimension >= 1")
        if not all(math.isfinite(c) for c in value):
            raise ValueError("embedding components must be finite")
        return value


class FusionConfig(_Frozen):
    num_experts: int = Field(default=3, ge=1)
    top_k: int = Field(default=3, ge=1)
    # k in theta = mu + k * sigma; float("inf") disables truncation.
    threshold_multiplier: UnboundedFloat = Field(default=1.0, ge=0.0)
    base_noise_scale: float = Field(default=0.1, ge=0.0)
    noise_seed: int = Field(default=0, ge=0, lt=2**64)
    empty_truncation_policy: EmptyTruncationPolicy = EmptyTruncationPolicy.KEEP_ALL
    tie_break_final: FinalTieBreak = FinalTieBreak.LOWEST_TOKEN_ID

    @field_validator("base_noise_scale")
    @classmethod
    def _finite_noise(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("base_noise_scale must be finite")
        return value

    @model_validator(mode="after")
    def _check_top_k(self) -> FusionConfig:
        if self.top_k > self.num_experts:
            raise ValueError(
                f"top_k ({self.top_k}) must not exceed num_experts ({self.num_experts})"
            )
        return self

    @property
    def truncation_enabled(self) -> bool:
        return not math.isinf(self.threshold_multiplier)

    def for_experts(self, num_experts: int) -> FusionConfig:
        """Rescale to a different pool size.

        A config that selects every expert keeps selecting every expert; otherwise
        top_k is capped at the new pool size.
        """
        if self.top_k >= self.num_experts:
            top_k = num_experts
        else:
            top_k = min(self.top_k, num_experts)
        return self.model_copy(update={"num_experts": num_experts, "top_k": top_k})


class BackendConfig(_Frozen):
    kind: BackendKind = BackendKind.MOCK
    base_url: str = "http://localhost:8000"
    model_name: str = "Qwen/Qwen1.5-0.5B"
    request_timeout_ms: int = Field(default=30_000, gt=0)
    max_retries: int = Field(default=2, ge=0)
    max_concurrent_requests: int = Field(default=4, ge=1)
    logprobs: int = Field(default=5, ge=1)
    mock_seed: int = Field(default=0, ge=0, lt=2**64)
    mock_consensus: float = Field(default=0.5, ge=0.0, le=1.0)
    mock_vocab_size: int = Field(default=50, ge=2)
    mock_embedding_dim: int = Field(default=64, ge=1)
    mock_latency_ms: float = Field(default=0.0, ge=0.0)
    mock_dissenters: int = Field(default=0, ge=0)
    mock_dissent_probability: float = Field(default=0.99, ge=0.0, le=1.0)
    mock_error_rate: float | None = Field(default=None, ge=0.0, le=1.0)


class TruncationStats(_Frozen):
    mean: float
    std: float = Field(ge=0.0)
    threshold: UnboundedFloat


class VoteTally(_Frozen):
    counts: dict[int, int]
    max_probability: dict[int, float]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class SimilarityRecord(_Frozen):
    step: int = 0
    matrix: tuple[tuple[float, ...], ...]
    mean_upper: float
    orthogonality: float


class StepRecord(_Frozen):
    step: int = Field(ge=0)
    # Sorted by expert_id.
    predictions: tuple[ExpertPrediction, ...]
    # Expert ids of S (descending probability) and S' (same order, filtered).
    selected: tuple[int, ...]
    filtered: tuple[int, ...]
    mean: float
    std: float
    threshold: UnboundedFloat
    winner: int
    tie_broken: bool = False
    noise_sigma: float = 0.0
    similarity: SimilarityRecord | None = None

    @model_validator(mode="after")
    def _check_subsets(self) -> StepRecord:
        ids = {p.expert_id for p in self.predictions}
        if not set(self.filtered) <= set(self.selected) <= ids:
            raise ValueError("filtered must be a subset of selected, selected of predictions")
        if not self.filtered:
            raise ValueError("filtered subset must be non-empty")
        return self

    @computed_field  # type: ignore[prop-decorator]
    @property
    def orthogonality(self) -> float | None:
        return self.similarity.orthogonality if self.similarity else None

    def subset(self, expert_ids: tuple[int, ...]) -> list[ExpertPrediction]:
        by_id = {p.expert_id: p for p in self.predictions}
        return [by_id[i] for i in expert_ids]


class _TraceHeader(_Frozen):
    config: FusionConfig
    prompt: str
    tokens: tuple[int, ...]
    task_index: int = 0
    expert_count: int = 1
    variant: str = "fusion_full"
    complete: bool = True
    error: str | None = None


class GenerationTrace(_Frozen):
    config: FusionConfig
    prompt: str
    tokens: tuple[int, ...] = ()
    steps: tuple[StepRecord, ...] = ()
    task_index: int = 0
    expert_count: int = 1
    variant: str = "fusion_full"
    complete: bool = True
    error: str | None = None

    @model_validator(mode="after")
    def _check_tokens(self) -> GenerationTrace:
        if len(self.tokens) != len(self.steps):
            raise ValueError("token sequence length must equal the number of steps")
        if any(t != s.winner for t, s in zip(self.tokens, self.steps)):
            raise ValueError("token sequence must match the step winners")
        return self

    def to_jsonl(self) -> str:
        """One header line (config, prompt, tokens, status) then one line per step."""
        header = _TraceHeader(
            **self.model_dump(exclude={"steps"}),
        )
        lines = [header.model_dump_json()]
        lines.extend(step.model_dump_json() for step in self.steps)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> GenerationTrace:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty trace")
        header = _TraceHeader.model_validate_json(lines[0])
        steps = tuple(StepRecord.model_validate_json(ln) for ln in lines[1:])
        return cls(**header.model_dump(), steps=steps)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> GenerationTrace:
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))
