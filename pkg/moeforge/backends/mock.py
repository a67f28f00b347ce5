"""Seeded deterministic mock backend.

Each expert mixes two behaviours. With probability ``mock_consensus`` it emits the
step's consensus token (drawn once per context); otherwise it draws uniformly from
the vocabulary. Its probability comes from a fixed Beta(2, 2)-shaped table.

Experts condition on the last fused token and the embedding fed back for it, so a
noiseless run walks a deterministic map over the vocabulary and settles into a cycle,
while a perturbed embedding reseeds the walk.
"""

from __future__ import annotations

import time

import numpy as np

from moeforge.backends.base import BaseBackend, DecodingContext, ExpertPrompt
from moeforge.models import BackendKind, ExpertPrediction
from moeforge.registry import register
from moeforge.rng import CounterStream, hash_to_u64, mix

# Quantiles of Beta(2, 2), without 0.5.
PROBABILITY_TABLE: tuple[float, ...] = (
    0.14, 0.21, 0.26, 0.30, 0.34, 0.38, 0.42, 0.46,
    0.54, 0.58, 0.62, 0.66, 0.70, 0.74, 0.79, 0.86,
)

_CONSENSUS_LANE = 0
_EXPERT_LANE = 1


def context_key(context: DecodingContext) -> int:
    if not context.tokens:
        return mix(hash_to_u64(context.prompt))
    last = context.embeddings[-1] if context.embeddings else ()
    raw = np.asarray(last, dtype="<f8").tobytes()
    return mix(context.tokens[-1], hash_to_u64(raw))


@register(BackendKind.MOCK)
class MockBackend(BaseBackend):
    def predict(self, expert: ExpertPrompt, context: DecodingContext) -> ExpertPrediction:
        cfg = self.config
        vocab_size = len(self.table)
        key = context_key(context)

        if cfg.mock_latency_ms:
            time.sleep(cfg.mock_latency_ms / 1000.0)

        shared = CounterStream(cfg.mock_seed, _CONSENSUS_LANE, key)
        consensus = shared.below(vocab_size)
        dissent = (consensus + 1 + shared.below(vocab_size - 1)) % vocab_size

        own = CounterStream(cfg.mock_seed, _EXPERT_LANE, key, expert.expert_id)

        if expert.expert_id < cfg.mock_dissenters:
            token = dissent
            probability = cfg.mock_dissent_probability
        else:
            if cfg.mock_error_rate is not None and context.answer_hint is not None:
                hint = context.answer_hint
                if own.chance(1.0 - cfg.mock_error_rate):
                    token = hint
                else:
                    token = (hint + 1 + own.below(vocab_size - 1)) % vocab_size
            elif own.chance(cfg.mock_consensus):
                token = consensus
            else:
                token = own.below(vocab_size)
            probability = PROBABILITY_TABLE[own.below(len(PROBABILITY_TABLE))]

        return ExpertPrediction(
            expert_id=expert.expert_id,
            token=token,
            probability=probability,
            embedding=self.table.vector(token),
        )
