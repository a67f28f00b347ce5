"""Gaussian noise injection on the winning token's embedding."""

from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from moeforge.errors import ConfigurationError
from moeforge.models import EmbeddingVector, FusionConfig, StepRecord


class NoiseParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_noise_scale: float = Field(ge=0.0)
    p_max: float = Field(ge=0.0, le=1.0)
    # Standard deviation, not variance.
    sigma: float = Field(ge=0.0)
    seed: int = 0
    step: int = 0


def noise_sigma(base_noise_scale: float, p_max: float) -> float:
    """base_noise_scale * (p_max - 0.5) ** 2"""
    if not (math.isfinite(base_noise_scale) and base_noise_scale >= 0.0):
        raise ConfigurationError(
            f"base_noise_scale must be finite and >= 0, got {base_noise_scale}"
        )
    if not 0.0 <= p_max <= 1.0:
        raise ConfigurationError(f"p_max must lie in [0, 1], got {p_max}")
    return base_noise_scale * (p_max - 0.5) ** 2


def noise_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream for one step; component j uses the j-th normal draw."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))


def inject_noise(
    embedding: EmbeddingVector,
    params: NoiseParams,
    rng: np.random.Generator | None = None,
) -> EmbeddingVector:
    """e' = e + eps with eps ~ N(0, sigma^2) per component. sigma = 0 returns e itself."""
    if params.sigma == 0.0:
        return embedding
    if rng is None:
        rng = noise_rng(params.seed, params.step)
    noise = rng.normal(0.0, params.sigma, size=len(embedding))
    perturbed = np.asarray(embedding, dtype=np.float64) + noise
    return tuple(float(x) for x in perturbed)


def apply_noise_to_step(
    record: StepRecord,
    config: FusionConfig,
) -> tuple[EmbeddingVector, NoiseParams]:
    """Perturb the winner's embedding; p_max is taken over all experts of the step."""
    p_max = max(p.probability for p in record.predictions)
    params = NoiseParams(
        base_noise_scale=config.base_noise_scale,
        p_max=p_max,
        sigma=noise_sigma(config.base_noise_scale, p_max),
        seed=config.noise_seed,
        step=record.step,
    )
    embedding = next(p.embedding for p in record.predictions if p.token == record.winner)
    return inject_noise(embedding, params), params
