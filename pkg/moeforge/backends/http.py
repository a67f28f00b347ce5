"""Client for OpenAI-compatible ``/v1/completions`` servers that expose log-probabilities."""

from __future__ import annotations

import logging
import math
import re
from typing import Any

import httpx

from moeforge.backends.base import BaseBackend, DecodingContext, ExpertPrompt
from moeforge.embeddings import EmbeddingTable, Vocabulary
from moeforge.errors import BackendError, ProtocolError, RetryableBackendError
from moeforge.models import BackendConfig, BackendKind, EmbeddingVector, ExpertPrediction
from moeforge.registry import register

logger = logging.getLogger(__name__)

# vLLM's return_tokens_as_token_ids renders tokens this way.
_TOKEN_ID_RE = re.compile(r"^token_id:(\d+)$")

_RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


@register(BackendKind.HTTP)
class HttpBackend(BaseBackend):
    def __init__(
        self,
        config: BackendConfig,
        table: EmbeddingTable,
        vocabulary: Vocabulary,
        **options: object,
    ) -> None:
        super().__init__(config, table, vocabulary)
        # With a vocabulary to decode them, ask the server for ids rather than text.
        self._token_ids = len(vocabulary) > 0
        transport = options.get("transport")
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.request_timeout_ms / 1000.0,
            transport=transport,  # type: ignore[arg-type]
        )

    def close(self) -> None:
        self._client.close()

    def predict(self, expert: ExpertPrompt, context: DecodingContext) -> ExpertPrediction:
        return self.fetch_prediction(expert, context)

    def fetch_prediction(self, expert: ExpertPrompt, context: DecodingContext) -> ExpertPrediction:
        """One completion request (max_tokens=1), retried on transient failures.

        Embeddings on the context are not transmitted; the server only sees text.
        """
        prompt = expert.prompt_text + "\n" + context.text(self.vocabulary)
        attempts = self.config.max_retries + 1
        last_error: BackendError | None = None

        for attempt in range(1, attempts + 1):
            try:
                body = self._request(prompt)
                text, probability = self._parse(body)
                break
            except RetryableBackendError as e:
                last_error = e
                logger.debug(
                    "expert %d attempt %d/%d failed: %s", expert.expert_id, attempt, attempts, e
                )
        else:
            logger.warning("expert %d exhausted %d attempts", expert.expert_id, attempts)
            assert last_error is not None
            raise last_error

        token, embedding = self._resolve(text)

        return ExpertPrediction(
            expert_id=expert.expert_id,
            token=token,
            probability=probability,
            embedding=embedding,
        )

    def _request(self, prompt: str) -> Any:
        payload = {
            "model": self.config.model_name,
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": self.config.logprobs,
            "temperature": 0,
        }
        if self._token_ids:
            payload["return_tokens_as_token_ids"] = True
        try:
            resp = self._client.post("/v1/completions", json=payload)
        except httpx.TimeoutException as e:
            raise RetryableBackendError(f"request timed out: {e}") from e
        except httpx.TransportError as e:
            raise RetryableBackendError(f"transport error: {e}") from e

        if resp.status_code in _RETRYABLE_STATUS:
            raise RetryableBackendError(f"server returned {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"server returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as e:
            raise ProtocolError(f"response is not JSON: {e}") from e

    def _parse(self, body: Any) -> tuple[str, float]:
        """Pick the argmax of ``choices[0].logprobs.top_logprobs[0]``."""
        try:
            top = body["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError(f"response has no top_logprobs: {e!r}") from e
        if not isinstance(top, dict) or not top:
            raise ProtocolError("top_logprobs[0] must be a non-empty object")

        try:
            scored = {str(k): float(v) for k, v in top.items()}
        except (TypeError, ValueError) as e:
            raise ProtocolError(f"non-numeric log-probability: {e}") from e

        # Highest log-probability; ties resolved by token text for determinism.
        text, logprob = min(scored.items(), key=lambda kv: (-kv[1], kv[0]))
        if math.isnan(logprob):
            raise ProtocolError(f"log-probability for {text!r} is NaN")
        probability = math.exp(logprob)
        if not 0.0 <= probability <= 1.0:
            raise ProtocolError(f"probability {probability} for {text!r} is outside [0, 1]")

        return text, probability

    def _resolve(self, text: str) -> tuple[int, EmbeddingVector]:
        """Token id and embedding for a returned token.

        ``token_id:<n>`` keys must be covered by the vocabulary, so the context can be
        sent back as real text. Plain text not in the vocabulary is interned.
        """
        match = _TOKEN_ID_RE.match(text)
        try:
            if match:
                token = int(match.group(1))
                if token >= len(self.vocabulary):
                    raise ProtocolError(
                        f"token id {token} is not in the vocabulary of size "
                        f"{len(self.vocabulary)}; configure vocabulary_path"
                    )
                return token, self.table.vector(token)
            known = self.vocabulary.encode(text)
            if known is not None and known < len(self.table):
                return known, self.table.vector(known)
            return self.vocabulary.intern(text), self.table.text_vector(text)
        except IndexError as e:
            raise ProtocolError(str(e)) from e
