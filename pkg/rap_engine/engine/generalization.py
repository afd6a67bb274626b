"""
Partial-Knowledge Setting

Feature distributions over thresholds, the drift transform between historical
and future distributions, i.i.d. threshold sampling, total-variation
diagnostics and future-error estimation.
"""

import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence, Union, runtime_checkable

import numpy as np
import structlog

from rap_engine.engine.dataset import Dataset, RelaxedDataset
from rap_engine.engine.surrogate import chunk_surrogate_answers
from rap_engine.engine.workload import TargetChunk, Threshold, Workload, chunk_match_counts, iter_target_chunks
from rap_engine.exceptions import WorkloadError
from rap_engine.utils.types import DistributionKind, DistributionSpec, DriftParams

logger = structlog.get_logger()

Z_95 = 1.959963984540054


@dataclass(frozen=True)
class FeatureDistribution:
    """Probability mass per feature index."""

    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise WorkloadError("Feature distribution must be a non-empty vector")
        if (probs < 0).any() or abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise WorkloadError("Feature distribution must be non-negative and sum to 1", {"sum": math.fsum(self.probs)})

    @property
    def d(self) -> int:
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)


def _normalized(weights: np.ndarray) -> FeatureDistribution:
    probs = weights / math.fsum(weights)
    return FeatureDistribution(tuple(float(p) for p in probs))


def make_distribution(spec: Union[DistributionSpec, DistributionKind, str], d: int) -> FeatureDistribution:
    """
    Feature masses in descending order of feature index.

    uniform: 1/d. zipf(s): proportional to i^-s. geometric(p): proportional to
    (1-p)^(i-1) p, truncated to d features.
    """
    if not isinstance(spec, DistributionSpec):
        spec = DistributionSpec(kind=DistributionKind(spec))
    if d < 1:
        raise WorkloadError("Distribution needs d >= 1", {"d": d})
    ranks = np.arange(1, d + 1, dtype=np.float64)
    if spec.kind == DistributionKind.ZIPF:
        weights = ranks ** (-spec.zipf_s)
    elif spec.kind == DistributionKind.GEOMETRIC:
        weights = (1.0 - spec.geometric_p) ** (ranks - 1) * spec.geometric_p
    else:
        weights = np.ones(d)
    return _normalized(weights)


def drift_keys(d: int, gamma: float, u: np.ndarray) -> np.ndarray:
    """Sort keys interpolating identity (0), random shuffle (0.5) and reversal (1)."""
    position = (d - 1 - np.arange(d)) / (d - 1) if d > 1 else np.zeros(d)
    return (1.0 - 2.0 * gamma) * position + (1.0 - abs(1.0 - 2.0 * gamma)) * u


def drift(historical: FeatureDistribution, params: DriftParams, rng: np.random.Generator) -> FeatureDistribution:
    """
    Reassign the historical masses to features by drift key.

    The feature with the j-th largest key receives the j-th largest mass.
    """
    probs = historical.as_array()
    if (np.diff(probs) > 0).any():
        raise WorkloadError("Historical distribution must be sorted in descending order")
    d = historical.d
    keys = drift_keys(d, params.gamma, rng.random(d))
    # Stable ranking keeps index order when keys tie
    by_key = np.argsort(-keys, kind="stable")
    drifted = np.empty(d)
    drifted[by_key] = probs
    return FeatureDistribution(tuple(float(p) for p in drifted))


def total_variation(p: FeatureDistribution, q: FeatureDistribution) -> float:
    if p.d != q.d:
        raise WorkloadError("Distributions differ in dimension", {"p": p.d, "q": q.d})
    return 0.5 * float(np.abs(p.as_array() - q.as_array()).sum())


@dataclass(frozen=True)
class ThresholdDistributionSpec:
    """Thresholds whose k features are drawn without replacement from a feature distribution."""

    features: FeatureDistribution
    r: int
    k: int

    def __post_init__(self) -> None:
        if not 1 <= self.r <= self.k <= self.features.d:
            raise WorkloadError("Need 1 <= r <= k <= d", {"r": self.r, "k": self.k, "d": self.features.d})
        if np.count_nonzero(self.features.as_array() > 0) < self.k:
            raise WorkloadError("Fewer than k features have positive mass", {"k": self.k})


def sample_threshold(spec: ThresholdDistributionSpec, rng: np.random.Generator) -> Threshold:
    """Successive draws proportional to the remaining mass."""
    weights = spec.features.as_array().copy()
    chosen = []
    for _ in range(spec.k):
        feature = int(rng.choice(weights.size, p=weights / weights.sum()))
        chosen.append(feature)
        weights[feature] = 0.0
    return Threshold.of(spec.r, chosen)


def sample_iid_workload(spec: ThresholdDistributionSpec, size: int, rng: np.random.Generator) -> Workload:
    if size < 1:
        raise WorkloadError("Workload size must be at least 1", {"size": size})
    return Workload(tuple(sample_threshold(spec, rng) for _ in range(size)))


# ========== Answer sources ==========


@runtime_checkable
class AnswerSource(Protocol):
    """Anything that answers a chunk of a threshold's consistent queries."""

    def answer_chunk(self, threshold: Threshold, chunk: TargetChunk) -> np.ndarray: ...


class SyntheticAnswerSource:
    """Clamped surrogate answers from a relaxed synthetic dataset."""

    def __init__(self, relaxed: RelaxedDataset):
        self.relaxed = relaxed

    def answer_chunk(self, threshold: Threshold, chunk: TargetChunk) -> np.ndarray:
        return np.clip(chunk_surrogate_answers(self.relaxed, threshold, chunk), 0.0, 1.0)


class AllZeroAnswerSource:
    def answer_chunk(self, threshold: Threshold, chunk: TargetChunk) -> np.ndarray:
        return np.zeros(chunk.size)


class ExactAnswerSource:
    """True answers; the zero-error oracle."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    def answer_chunk(self, threshold: Threshold, chunk: TargetChunk) -> np.ndarray:
        columns = self.dataset.records[:, threshold.features]
        return chunk_match_counts(columns, threshold, chunk).reshape(-1) / self.dataset.n


def as_answer_source(source: object) -> AnswerSource:
    """Accept an AnswerSource or anything carrying a relaxed `synthetic` dataset."""
    if isinstance(source, AnswerSource):
        return source
    synthetic = getattr(source, "synthetic", None)
    if isinstance(synthetic, RelaxedDataset):
        return SyntheticAnswerSource(synthetic)
    if isinstance(source, RelaxedDataset):
        return SyntheticAnswerSource(source)
    raise WorkloadError("Object cannot answer future queries", {"type": type(source).__name__})


@dataclass
class FutureErrorEstimate:
    mean: float
    halfwidth: float
    per_threshold: list[float]


def summarize_errors(errors: Sequence[float]) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width."""
    values = np.asarray(errors, dtype=np.float64)
    if values.size == 0:
        raise WorkloadError("No errors to summarize")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(Z_95 * values.std(ddof=1) / math.sqrt(values.size))


def threshold_error(source: AnswerSource, dataset: Dataset, threshold: Threshold, batch_cap: int) -> float:
    """l-infinity error over one threshold's consistent queries."""
    columns = dataset.records[:, threshold.features]
    worst = 0.0
    for chunk in iter_target_chunks(threshold, dataset.schema, batch_cap):
        truth = chunk_match_counts(columns, threshold, chunk).reshape(-1) / dataset.n
        worst = max(worst, float(np.max(np.abs(truth - source.answer_chunk(threshold, chunk)))))
    return worst


def future_error_on_workload(
    source: object, dataset: Dataset, workload: Workload, batch_cap: int = 2**20
) -> FutureErrorEstimate:
    """Mean per-threshold l-infinity error over a fixed future workload."""
    answer_source = as_answer_source(source)
    workload.validate_for(dataset.schema)
    errors = [threshold_error(answer_source, dataset, threshold, batch_cap) for threshold in workload]
    mean, halfwidth = summarize_errors(errors)
    return FutureErrorEstimate(mean, halfwidth, errors)


def estimate_future_error(
    answer_source: object,
    dataset: Dataset,
    future_spec: ThresholdDistributionSpec,
    num_future: int,
    rng: np.random.Generator,
    batch_cap: int = 2**20,
) -> tuple[float, float]:
    """
    Future error of a mechanism output.

    Samples num_future thresholds i.i.d. from the future distribution and
    returns the mean per-threshold l-infinity error with its 95% half-width.
    """
    if num_future < 2:
        raise WorkloadError("num_future must be at least 2", {"num_future": num_future})
    future = sample_iid_workload(future_spec, num_future, rng)
    estimate = future_error_on_workload(answer_source, dataset, future, batch_cap)
    return estimate.mean, estimate.halfwidth


def drift_tv_curve(
    historical: FeatureDistribution, gammas: Iterable[float], trials: int, rng: np.random.Generator
) -> list[dict]:
    """Mean TV distance between historical and drifted distributions, per gamma."""
    if trials < 1:
        raise WorkloadError("trials must be at least 1", {"trials": trials})
    rows = []
    for gamma in gammas:
        params = DriftParams(gamma=gamma)
        distances = [total_variation(historical, drift(historical, params, rng)) for _ in range(trials)]
        mean, halfwidth = summarize_errors(distances)
        rows.append({"gamma": float(gamma), "mean_tv": mean, "halfwidth": halfwidth, "trials": trials})
    return rows
