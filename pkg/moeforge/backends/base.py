"""Base backend ABC, expert pools and the shared decoding context."""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from types import TracebackType

from moeforge.embeddings import EmbeddingTable, Vocabulary
from moeforge.errors import ConfigurationError, FixtureError
from moeforge.models import BackendConfig, EmbeddingVector, ExpertPrediction


@dataclass(frozen=True)
class ExpertPrompt:
    expert_id: int
    prompt_text: str


@dataclass(frozen=True)
class ExpertPool:
    experts: tuple[ExpertPrompt, ...]

    def __len__(self) -> int:
        return len(self.experts)

    def __iter__(self):  # type: ignore[no-untyped-def]
        return iter(self.experts)

    def head(self, count: int) -> ExpertPool:
        """The first ``count`` experts, i.e. a reduced expert set."""
        if not 1 <= count <= len(self.experts):
            raise ConfigurationError(
                f"Requested {count} experts but the pool only has {len(self.experts)}"
            )
        return ExpertPool(self.experts[:count])


@dataclass(frozen=True)
class DecodingContext:
    """What every expert sees at one step: the task prompt and the fused tokens so far.

    ``embeddings[i]`` is the (possibly noise-perturbed) embedding fed back for
    ``tokens[i]``. ``answer_hint`` is only read by the mock backend's answer mode.
    """

    prompt: str
    tokens: tuple[int, ...] = ()
    embeddings: tuple[EmbeddingVector, ...] = field(default=(), repr=False)
    answer_hint: int | None = None

    def is_empty(self) -> bool:
        return not self.prompt and not self.tokens

    def extend(self, token: int, embedding: EmbeddingVector) -> DecodingContext:
        return DecodingContext(
            prompt=self.prompt,
            tokens=self.tokens + (token,),
            embeddings=self.embeddings + (embedding,),
            answer_hint=self.answer_hint,
        )

    def text(self, vocabulary: Vocabulary) -> str:
        return self.prompt + "".join(vocabulary.decode(t) for t in self.tokens)


def build_pool(prompts: list[str]) -> ExpertPool:
    """Assign expert ids 0..N-1 in input order."""
    if not prompts:
        raise ConfigurationError("An expert pool needs at least one prompt")
    if any(not p for p in prompts):
        raise ConfigurationError("Expert prompts must be non-empty")
    return ExpertPool(tuple(ExpertPrompt(i, text) for i, text in enumerate(prompts)))


def load_pool(path: Path) -> ExpertPool:
    """Load expert prompts from JSONL lines ``{"expert_id": int, "prompt": str}``."""
    experts: list[ExpertPrompt] = []
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            expert = ExpertPrompt(int(obj["expert_id"]), str(obj["prompt"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FixtureError(line_number, f"malformed expert prompt: {e}") from e
        if not expert.prompt_text:
            raise FixtureError(line_number, "empty expert prompt")
        experts.append(expert)

    ids = sorted(e.expert_id for e in experts)
    if ids != list(range(len(experts))):
        raise ConfigurationError(f"Expert ids in {path} must be exactly 0..N-1, got {ids}")
    if not experts:
        raise ConfigurationError(f"No expert prompts in {path}")
    return ExpertPool(tuple(sorted(experts, key=lambda e: e.expert_id)))


class BaseBackend(ABC):
    def __init__(
        self,
        config: BackendConfig,
        table: EmbeddingTable,
        vocabulary: Vocabulary,
        **options: object,
    ) -> None:
        self.config = config
        self.table = table
        self.vocabulary = vocabulary

    @abstractmethod
    def predict(self, expert: ExpertPrompt, context: DecodingContext) -> ExpertPrediction:
        """Return one expert's next-token prediction for the context."""
        ...

    def close(self) -> None:
        pass

    def __enter__(self) -> BaseBackend:
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()
