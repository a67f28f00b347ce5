"""Top-k selection, outlier truncation and fixed frequency voting for one decoding step."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

from pydantic import BaseModel, ConfigDict

from moeforge.diversity import similarity_record
from moeforge.errors import ConfigurationError
from moeforge.models import (
    EmptyTruncationPolicy,
    ExpertPrediction,
    FusionConfig,
    StepRecord,
    TruncationStats,
    VoteTally,
)

logger = logging.getLogger(__name__)


class VoteOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    winner: int
    tally: VoteTally
    tie_broken: bool = False


def _rank_key(p: ExpertPrediction) -> tuple[float, int]:
    return (-p.probability, p.expert_id)


def select_top_k(predictions: Sequence[ExpertPrediction], top_k: int) -> list[ExpertPrediction]:
    """The top_k predictions by descending probability, ties to the lower expert_id."""
    if not 1 <= top_k <= len(predictions):
        raise ConfigurationError(f"top_k={top_k} is outside [1, {len(predictions)}]")
    return sorted(predictions, key=_rank_key)[:top_k]


def truncation_stats(
    probabilities: Sequence[float],
    threshold_multiplier: float,
) -> TruncationStats:
    """Population mean and std of the values, and theta = mean + multiplier * std.

    Sums run left to right in the order given.
    """
    n = len(probabilities)
    if n == 0:
        raise ValueError("cannot compute truncation statistics of an empty subset")

    total = 0.0
    for p in probabilities:
        total += p
    mean = total / n

    squares = 0.0
    for p in probabilities:
        d = p - mean
        squares += d * d
    std = math.sqrt(squares / n)

    # inf * 0 is NaN.
    threshold = mean if std == 0.0 else mean + threshold_multiplier * std
    return TruncationStats(mean=mean, std=std, threshold=threshold)


def compute_truncation_stats(
    subset: Sequence[ExpertPrediction],
    threshold_multiplier: float,
) -> TruncationStats:
    ordered = sorted(subset, key=lambda p: p.expert_id)
    return truncation_stats([p.probability for p in ordered], threshold_multiplier)


def truncate_outliers(
    subset: Sequence[ExpertPrediction],
    stats: TruncationStats,
    policy: EmptyTruncationPolicy = EmptyTruncationPolicy.KEEP_ALL,
) -> list[ExpertPrediction]:
    """Drop predictions with p > theta (strict), preserving order."""
    if not subset:
        raise ValueError("cannot truncate an empty subset")
    kept = [p for p in subset if not p.probability > stats.threshold]
    if kept:
        return kept
    if policy is EmptyTruncationPolicy.KEEP_MAX_PROBABILITY:
        return [min(subset, key=_rank_key)]
    return list(subset)


def vote(filtered: Sequence[ExpertPrediction]) -> VoteOutcome:
    """Most frequent token wins; ties go to the highest member probability, then lowest id."""
    if not filtered:
        raise ValueError("cannot vote over an empty subset")

    counts: dict[int, int] = {}
    max_probability: dict[int, float] = {}
    for p in filtered:
        counts[p.token] = counts.get(p.token, 0) + 1
        if p.token not in max_probability or p.probability > max_probability[p.token]:
            max_probability[p.token] = p.probability

    tokens = sorted(counts)
    tally = VoteTally(
        counts={t: counts[t] for t in tokens},
        max_probability={t: max_probability[t] for t in tokens},
    )

    top = max(counts.values())
    tied = [t for t in tokens if counts[t] == top]
    if len(tied) == 1:
        return VoteOutcome(winner=tied[0], tally=tally, tie_broken=False)

    best = max(max_probability[t] for t in tied)
    winner = min(t for t in tied if max_probability[t] == best)
    return VoteOutcome(winner=winner, tally=tally, tie_broken=True)


def fuse_step(
    predictions: Sequence[ExpertPrediction],
    config: FusionConfig,
    step: int = 0,
) -> StepRecord:
    """select_top_k -> compute_truncation_stats -> truncate_outliers -> vote.

    The result does not depend on the order of ``predictions``.
    """
    if len(predictions) != config.num_experts:
        raise ConfigurationError(
            f"expected {config.num_experts} predictions, got {len(predictions)}"
        )
    ordered = sorted(predictions, key=lambda p: p.expert_id)
    if len({p.expert_id for p in ordered}) != len(ordered):
        raise ConfigurationError("duplicate expert_id in predictions")

    selected = select_top_k(ordered, config.top_k)
    stats = compute_truncation_stats(selected, config.threshold_multiplier)
    filtered = truncate_outliers(selected, stats, config.empty_truncation_policy)
    outcome = vote(filtered)

    similarity = None
    if len(ordered) >= 2:
        similarity = similarity_record(
            [p.embedding for p in ordered],
            step=step,
            expert_ids=[p.expert_id for p in ordered],
        )

    logger.debug(
        "step %d: |S|=%d |S'|=%d theta=%.4f winner=%d",
        step, len(selected), len(filtered), stats.threshold, outcome.winner,
    )
    return StepRecord(
        step=step,
        predictions=tuple(ordered),
        selected=tuple(p.expert_id for p in selected),
        filtered=tuple(p.expert_id for p in filtered),
        mean=stats.mean,
        std=stats.std,
        threshold=stats.threshold,
        winner=outcome.winner,
        tie_broken=outcome.tie_broken,
        similarity=similarity,
    )
