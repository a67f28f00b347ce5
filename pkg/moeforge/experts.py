"""Fan-out of one decoding step to every expert in a pool."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed

from moeforge.backends.base import BaseBackend, DecodingContext, ExpertPool
from moeforge.errors import BackendError, ConfigurationError, StepError
from moeforge.models import ExpertPrediction

logger = logging.getLogger(__name__)

# Prompt framings cycled when no prompt file is supplied.
DEFAULT_DOMAINS = (
    "historian",
    "economist",
    "physicist",
    "novelist",
    "biologist",
    "software engineer",
    "philosopher",
    "journalist",
)


def default_prompts(count: int) -> list[str]:
    """Synthesized domain framings, distinct per expert id."""
    return [
        f"You are expert #{i}, a {DEFAULT_DOMAINS[i % len(DEFAULT_DOMAINS)]}. "
        "Continue the text from your perspective:"
        for i in range(count)
    ]


def predict_all(
    pool: ExpertPool,
    context: DecodingContext,
    backend: BaseBackend,
) -> list[ExpertPrediction]:
    """Ask every expert for its next token; the result is sorted by expert_id.

    Requests run concurrently up to ``max_concurrent_requests``. Any expert that
    still fails after its retries fails the whole step: a partial set is never fused.
    """
    if context.is_empty():
        raise ConfigurationError("decoding context must not be empty")

    workers = min(backend.config.max_concurrent_requests, len(pool))
    results: dict[int, ExpertPrediction] = {}
    failures: dict[int, BackendError] = {}

    if workers <= 1:
        for expert in pool:
            try:
                results[expert.expert_id] = backend.predict(expert, context)
            except BackendError as e:
                failures[expert.expert_id] = e
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {
                executor.submit(backend.predict, expert, context): expert.expert_id
                for expert in pool
            }
            for future in as_completed(futures):
                expert_id = futures[future]
                try:
                    results[expert_id] = future.result()
                except BackendError as e:
                    failures[expert_id] = e

    if failures:
        first = failures[min(failures)]
        raise StepError(list(failures), f"Experts {sorted(failures)} failed: {first}")

    return [results[expert.expert_id] for expert in sorted(pool, key=lambda e: e.expert_id)]
