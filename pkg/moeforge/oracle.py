"""Monte Carlo checks of the ensemble claims: variance reduction, its breakdown under
correlation, truncation's effect on spread, noise-driven vote flips and majority
amplification.

Every function is seed-pinned and draws from a single vectorized numpy stream, so
results are bit-reproducible and independent of scheduling.
"""

from __future__ import annotations

import logging
import math
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import binom

from moeforge.errors import ConfigurationError
from moeforge.fusion import fuse_step, truncation_stats, vote
from moeforge.models import ExpertPrediction, FusionConfig
from moeforge.noise import noise_sigma

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.05

# Placeholder embedding for synthetic predictions; orthogonality is not under test here.
_UNIT = (1.0,)


class SimulationSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(ge=1)
    sigma2: float = Field(ge=0.0)
    mu: float = 0.5
    rho: float = 0.0
    trials: int = Field(default=100_000, ge=1)
    seed: int = 0
    clip: bool = False


class OracleReport(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    claim: str
    theoretical: float | None
    empirical: float
    trials: int
    seed: int
    tolerance: float | None
    passed: bool = Field(alias="pass")

    @property
    def relative_error(self) -> float | None:
        if self.theoretical is None:
            return None
        if self.theoretical == 0.0:
            return abs(self.empirical)
        return abs(self.empirical - self.theoretical) / abs(self.theoretical)


def _compare(
    claim: str,
    theoretical: float,
    empirical: float,
    trials: int,
    seed: int,
    tolerance: float,
) -> OracleReport:
    if theoretical == 0.0:
        error = abs(empirical)
    else:
        error = abs(empirical - theoretical) / abs(theoretical)
    report = OracleReport(
        claim=claim,
        theoretical=theoretical,
        empirical=empirical,
        trials=trials,
        seed=seed,
        tolerance=tolerance,
        passed=error <= tolerance,
    )
    logger.info(
        "%s: theoretical=%.6g empirical=%.6g pass=%s",
        claim, theoretical, empirical, report.passed,
    )
    return report


def _ensemble_means(samples: np.ndarray, spec: SimulationSpec) -> np.ndarray:
    if spec.clip:
        samples = np.clip(samples, 0.0, 1.0)
    return samples.mean(axis=1)


def variance_of_mean_iid(
    spec: SimulationSpec,
    tolerance: float = DEFAULT_TOLERANCE,
) -> OracleReport:
    """Var of the k-expert average against sigma^2 / k."""
    if spec.rho != 0.0:
        raise ConfigurationError("variance_of_mean_iid requires rho = 0")
    rng = np.random.default_rng(spec.seed)
    samples = rng.normal(spec.mu, math.sqrt(spec.sigma2), size=(spec.trials, spec.k))
    empirical = float(np.var(_ensemble_means(samples, spec), ddof=1))
    return _compare(
        f"iid variance of the mean, k={spec.k}, sigma2={spec.sigma2}",
        spec.sigma2 / spec.k,
        empirical,
        spec.trials,
        spec.seed,
        tolerance,
    )


def correlated_variance(sigma2: float, k: int, rho: float) -> float:
    return sigma2 * (1.0 + (k - 1) * rho) / k


def variance_of_mean_correlated(
    spec: SimulationSpec,
    tolerance: float = DEFAULT_TOLERANCE,
) -> OracleReport:
    """Equicorrelated experts via one common factor: p_i = sqrt(rho) z + sqrt(1 - rho) w_i."""
    if not 0.0 <= spec.rho < 1.0:
        raise ConfigurationError(f"rho must lie in [0, 1), got {spec.rho}")
    rng = np.random.default_rng(spec.seed)
    common = rng.standard_normal((spec.trials, 1))
    own = rng.standard_normal((spec.trials, spec.k))
    scale = math.sqrt(spec.sigma2)
    samples = spec.mu + scale * (math.sqrt(spec.rho) * common + math.sqrt(1.0 - spec.rho) * own)
    empirical = float(np.var(_ensemble_means(samples, spec), ddof=1))
    return _compare(
        f"correlated variance of the mean, k={spec.k}, sigma2={spec.sigma2}, rho={spec.rho}",
        correlated_variance(spec.sigma2, spec.k, spec.rho),
        empirical,
        spec.trials,
        spec.seed,
        tolerance,
    )


class MixtureSpec(BaseModel):
    """Per-trial sample: a clean Gaussian component plus a fixed share of spikes.

    The spike count per trial is ``round(spike_weight * n)``, so every trial carries
    the same composition.
    """

    model_config = ConfigDict(frozen=True)

    n: int = Field(default=10, ge=1)
    clean_mean: float = 0.2
    clean_std: float = Field(default=0.02, ge=0.0)
    spike_weight: float = Field(default=0.1, ge=0.0, le=1.0)
    spike_value: float = 0.95
    spike_std: float = Field(default=0.005, ge=0.0)


class TruncationEffect(BaseModel):
    model_config = ConfigDict(frozen=True)

    trials: int
    seed: int
    threshold_multiplier: float
    fraction_variance_reduced: float
    mean_variance_ratio: float
    removal_rate: float
    mean_abs_deviation_before: float
    mean_abs_deviation_after: float


def _population_variance(values: list[float]) -> float:
    stats = truncation_stats(values, 0.0)
    return stats.std * stats.std


def truncation_effect(
    mixture: MixtureSpec,
    threshold_multiplier: float,
    trials: int = 10_000,
    seed: int = 0,
) -> TruncationEffect:
    """Apply theta-truncation to contaminated samples and measure spread and bias."""
    rng = np.random.default_rng(seed)
    spikes = int(round(mixture.spike_weight * mixture.n))
    clean = rng.normal(mixture.clean_mean, mixture.clean_std, size=(trials, mixture.n - spikes))
    spike = rng.normal(mixture.spike_value, mixture.spike_std, size=(trials, spikes))
    samples = np.clip(np.concatenate([clean, spike], axis=1), 0.0, 1.0)

    reduced = 0
    ratio_sum = 0.0
    removed_total = 0
    dev_before = 0.0
    dev_after = 0.0
    for row in samples:
        values = [float(x) for x in row]
        stats = truncation_stats(values, threshold_multiplier)
        kept = [p for p in values if not p > stats.threshold] or values
        removed_total += len(values) - len(kept)

        before = stats.std * stats.std
        after = _population_variance(kept)
        if len(kept) == len(values) or before == 0.0:
            ratio = 1.0
        else:
            ratio = after / before
        ratio_sum += ratio
        if after < before:
            reduced += 1

        dev_before += abs(stats.mean - mixture.clean_mean)
        dev_after += abs(sum(kept) / len(kept) - mixture.clean_mean)

    return TruncationEffect(
        trials=trials,
        seed=seed,
        threshold_multiplier=threshold_multiplier,
        fraction_variance_reduced=reduced / trials,
        mean_variance_ratio=ratio_sum / trials,
        removal_rate=removed_total / (trials * mixture.n),
        mean_abs_deviation_before=dev_before / trials,
        mean_abs_deviation_after=dev_after / trials,
    )


class PerturbationScenario(str, Enum):
    # Even split; one expert of the second half reports p=0.99.
    OVERCONFIDENT_DISSENTER = "overconfident_dissenter"
    # Every expert on token 0.
    UNANIMOUS = "unanimous"
    # Even split between tokens 0 and 1.
    CONTESTED = "contested"


def _scenario(
    scenario: PerturbationScenario,
    n_experts: int,
    rng: np.random.Generator,
) -> tuple[list[int], list[float]]:
    probs = [float(x) for x in rng.uniform(0.3, 0.8, size=n_experts)]
    if scenario is PerturbationScenario.UNANIMOUS:
        return [0] * n_experts, probs
    if scenario is PerturbationScenario.CONTESTED:
        return [i % 2 for i in range(n_experts)], probs
    half = n_experts // 2
    return [0] * half + [1] * half, probs[:-1] + [0.99]


def perturbation_dominance(
    trials: int,
    base_noise_scale: float,
    scenario: PerturbationScenario = PerturbationScenario.OVERCONFIDENT_DISSENTER,
    n_experts: int = 4,
    seed: int = 0,
) -> float:
    """Fraction of trials where voting on p + eps picks a different token than on p.

    eps is drawn per expert with std noise_sigma(base_noise_scale, p_max); perturbed
    probabilities are clipped to [0, 1].
    """
    if scenario is not PerturbationScenario.UNANIMOUS and (n_experts < 2 or n_experts % 2):
        raise ConfigurationError(f"{scenario.value} needs an even number of experts >= 2")
    rng = np.random.default_rng(seed)
    flips = 0
    for _ in range(trials):
        tokens, probs = _scenario(scenario, n_experts, rng)
        sigma = noise_sigma(base_noise_scale, max(probs))
        eps = rng.normal(0.0, 1.0, size=len(probs)) * sigma
        clean = [
            ExpertPrediction(expert_id=i, token=t, probability=p, embedding=_UNIT)
            for i, (t, p) in enumerate(zip(tokens, probs))
        ]
        noisy = [
            pred.model_copy(
                update={"probability": min(1.0, max(0.0, pred.probability + float(e)))}
            )
            for pred, e in zip(clean, eps)
        ]
        if vote(clean).winner != vote(noisy).winner:
            flips += 1
    return flips / trials


def binomial_majority_error(n_experts: int, error_rate: float) -> float:
    """P[more than half of n independent experts are wrong]."""
    if n_experts < 1 or n_experts % 2 == 0:
        raise ConfigurationError("majority error is defined here for an odd number of experts")
    return float(binom.sf(n_experts // 2, n_experts, error_rate))


def _two_token_error(wrong: np.ndarray, probs: np.ndarray, config: FusionConfig) -> float:
    errors = 0
    for mask, row in zip(wrong, probs):
        predictions = [
            ExpertPrediction(expert_id=i, token=int(w), probability=float(p), embedding=_UNIT)
            for i, (w, p) in enumerate(zip(mask, row))
        ]
        if fuse_step(predictions, config).winner == 1:
            errors += 1
    return errors / len(wrong)


def majority_amplification(
    n_experts: int = 9,
    error_rate: float = 0.4,
    trials: int = 10_000,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
) -> OracleReport:
    """Independent experts, token 0 correct and token 1 wrong, fused without truncation."""
    rng = np.random.default_rng(seed)
    wrong = rng.random((trials, n_experts)) < error_rate
    probs = rng.uniform(0.2, 0.8, size=(trials, n_experts))
    config = FusionConfig(
        num_experts=n_experts,
        top_k=n_experts,
        threshold_multiplier=float("inf"),
        base_noise_scale=0.0,
    )
    return _compare(
        f"majority-vote error, n={n_experts}, error_rate={error_rate}",
        binomial_majority_error(n_experts, error_rate),
        _two_token_error(wrong, probs, config),
        trials,
        seed,
        tolerance,
    )


def correlated_vote_error(
    n_experts: int = 9,
    error_rate: float = 0.4,
    shared_error: float = 0.5,
    trials: int = 10_000,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
) -> OracleReport:
    """Experts that err together: with probability shared_error all copy one draw.

    Closed form: shared_error * error_rate + (1 - shared_error) * majority error.
    """
    if not 0.0 <= shared_error <= 1.0:
        raise ConfigurationError(f"shared_error must lie in [0, 1], got {shared_error}")
    rng = np.random.default_rng(seed)
    independent = rng.random((trials, n_experts)) < error_rate
    common = rng.random((trials, 1)) < error_rate
    shared = rng.random((trials, 1)) < shared_error
    wrong = np.where(shared, np.broadcast_to(common, independent.shape), independent)
    probs = rng.uniform(0.2, 0.8, size=(trials, n_experts))
    config = FusionConfig(
        num_experts=n_experts,
        top_k=n_experts,
        threshold_multiplier=float("inf"),
        base_noise_scale=0.0,
    )
    theoretical = shared_error * error_rate + (1.0 - shared_error) * binomial_majority_error(
        n_experts, error_rate
    )
    return _compare(
        f"correlated-error vote, n={n_experts}, shared={shared_error}",
        theoretical,
        _two_token_error(wrong, probs, config),
        trials,
        seed,
        tolerance,
    )


def run_all(seed: int = 0) -> list[OracleReport]:
    """The full oracle suite behind the ``oracle`` command."""
    reports: list[OracleReport] = []
    for sigma2 in (0.04, 1.0):
        for k in (1, 4, 16):
            reports.append(variance_of_mean_iid(SimulationSpec(k=k, sigma2=sigma2, seed=seed)))
    reports.append(
        variance_of_mean_correlated(SimulationSpec(k=4, sigma2=1.0, rho=0.5, seed=seed))
    )

    effect = truncation_effect(MixtureSpec(), threshold_multiplier=1.0, trials=10_000, seed=seed)
    reports.append(
        OracleReport(
            claim="truncation reduces variance in >= 99% of contaminated samples",
            theoretical=0.99,
            empirical=effect.fraction_variance_reduced,
            trials=effect.trials,
            seed=seed,
            tolerance=None,
            passed=effect.fraction_variance_reduced >= 0.99
            and effect.mean_abs_deviation_after < effect.mean_abs_deviation_before,
        )
    )

    flips = perturbation_dominance(10_000, base_noise_scale=1.0, seed=seed)
    reports.append(
        OracleReport(
            claim="p + eps perturbation flips an overconfident tie-break",
            theoretical=None,
            empirical=flips,
            trials=10_000,
            seed=seed,
            tolerance=None,
            passed=0.0 < flips < 1.0,
        )
    )

    reports.append(majority_amplification(seed=seed))
    reports.append(correlated_vote_error(seed=seed))
    return reports
