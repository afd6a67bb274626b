"""
Threshold Workloads

r-of-k thresholds, implicit enumeration of their consistent queries and
streaming true-answer evaluation on the sensitive dataset.

Enumeration order: thresholds in workload order; within a threshold, target
tuples in C order (last feature of S varies fastest).
"""

import bisect
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np
import structlog

from rap_engine.engine.dataset import Dataset, Schema
from rap_engine.exceptions import QueryCountOverflowError, WorkloadError

logger = structlog.get_logger()

MAX_QUERY_COUNT = int(np.iinfo(np.int64).max)


@dataclass(frozen=True)
class Threshold:
    """An r-of-k threshold over a canonical (ascending) feature set."""

    r: int
    k: int
    features: tuple[int, ...]

    def __post_init__(self) -> None:
        if not 1 <= self.r <= self.k:
            raise WorkloadError("Threshold needs 1 <= r <= k", {"r": self.r, "k": self.k})
        if len(self.features) != self.k:
            raise WorkloadError("Threshold needs exactly k features", {"k": self.k, "features": self.features})
        if any(a >= b for a, b in zip(self.features, self.features[1:])):
            raise WorkloadError("Threshold features must be distinct and ascending", {"features": self.features})
        if self.features[0] < 0:
            raise WorkloadError("Negative feature index", {"features": self.features})

    @classmethod
    def of(cls, r: int, features: Sequence[int]) -> "Threshold":
        """Canonicalize an arbitrary feature sequence."""
        canonical = tuple(sorted(int(f) for f in features))
        return cls(r=r, k=len(canonical), features=canonical)

    def validate_for(self, schema: Schema) -> None:
        if self.features[-1] >= schema.d:
            raise WorkloadError("Threshold feature outside schema", {"features": self.features, "d": schema.d})

    def cardinalities(self, schema: Schema) -> tuple[int, ...]:
        return tuple(schema.cardinalities[f] for f in self.features)

    def to_dict(self) -> dict:
        return {"r": self.r, "k": self.k, "features": list(self.features)}


@dataclass(frozen=True)
class Workload:
    """Ordered, non-empty list of thresholds."""

    thresholds: tuple[Threshold, ...]

    def __post_init__(self) -> None:
        if not self.thresholds:
            raise WorkloadError("Workload is empty")

    def __len__(self) -> int:
        return len(self.thresholds)

    def __iter__(self) -> Iterator[Threshold]:
        return iter(self.thresholds)

    def validate_for(self, schema: Schema) -> None:
        for threshold in self.thresholds:
            threshold.validate_for(schema)

    def to_records(self) -> list[dict]:
        return [t.to_dict() for t in self.thresholds]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "Workload":
        try:
            thresholds = [Threshold(r=int(e["r"]), k=int(e["k"]), features=tuple(int(f) for f in e["features"])) for e in records]
        except (KeyError, TypeError, ValueError) as e:
            raise WorkloadError("Malformed workload entry", {"error": str(e)}) from e
        return cls(tuple(thresholds))


@dataclass(frozen=True)
class ConsistentQuery:
    """A concrete target tuple for one threshold of a workload."""

    threshold: Threshold
    y: tuple[int, ...]
    position: int = 0

    def __post_init__(self) -> None:
        if len(self.y) != self.threshold.k:
            raise WorkloadError("Target length differs from k", {"k": self.threshold.k, "y": self.y})


@dataclass
class AnswerVector:
    """One answer per consistent query, in canonical enumeration order."""

    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def clamped(self) -> "AnswerVector":
        return AnswerVector(np.clip(self.values, 0.0, 1.0))


# ========== Counting and indexing ==========


def threshold_query_count(threshold: Threshold, schema: Schema) -> int:
    threshold.validate_for(schema)
    return math.prod(threshold.cardinalities(schema))


def consistent_query_count(workload: Workload, schema: Schema) -> int:
    """Number of consistent queries m of a workload."""
    total = sum(threshold_query_count(t, schema) for t in workload)
    if total > MAX_QUERY_COUNT:
        raise QueryCountOverflowError("Consistent query count exceeds int64", {"count": total})
    return total


def threshold_starts(workload: Workload, schema: Schema) -> list[int]:
    """Global index of each threshold's first query, plus m at the end."""
    starts = [0]
    for threshold in workload:
        starts.append(starts[-1] + threshold_query_count(threshold, schema))
    if starts[-1] > MAX_QUERY_COUNT:
        raise QueryCountOverflowError("Consistent query count exceeds int64", {"count": starts[-1]})
    return starts


def _unravel(local: int, shape: Sequence[int]) -> tuple[int, ...]:
    digits = []
    for size in reversed(shape):
        local, digit = divmod(local, size)
        digits.append(digit)
    return tuple(reversed(digits))


def _ravel(y: Sequence[int], shape: Sequence[int]) -> int:
    local = 0
    for digit, size in zip(y, shape):
        if not 0 <= digit < size:
            raise WorkloadError("Target component out of range", {"y": tuple(y), "shape": tuple(shape)})
        local = local * size + digit
    return local


def query_at(workload: Workload, schema: Schema, index: int, starts: Optional[list[int]] = None) -> ConsistentQuery:
    """Decode a global query index into its threshold and target tuple."""
    starts = starts or threshold_starts(workload, schema)
    if not 0 <= index < starts[-1]:
        raise WorkloadError("Query index out of range", {"index": index, "m": starts[-1]})
    position = bisect.bisect_right(starts, index) - 1
    threshold = workload.thresholds[position]
    y = _unravel(index - starts[position], threshold.cardinalities(schema))
    return ConsistentQuery(threshold, y, position)


def index_of(workload: Workload, schema: Schema, query: ConsistentQuery, starts: Optional[list[int]] = None) -> int:
    """Inverse of query_at."""
    starts = starts or threshold_starts(workload, schema)
    position = query.position
    if not (0 <= position < len(workload) and workload.thresholds[position] == query.threshold):
        try:
            position = workload.thresholds.index(query.threshold)
        except ValueError as e:
            raise WorkloadError("Query threshold not in workload", {"threshold": query.threshold}) from e
    return starts[position] + _ravel(query.y, query.threshold.cardinalities(schema))


def evaluate_predicate(record: Sequence[int], query: ConsistentQuery) -> int:
    """1 iff at least r of the threshold's features match the target."""
    matches = sum(int(record[f] == y) for f, y in zip(query.threshold.features, query.y))
    return int(matches >= query.threshold.r)


@lru_cache(maxsize=None)
def at_least_coefficients(r: int, k: int) -> tuple[tuple[int, int], ...]:
    """
    Inclusion-exclusion weights for "at least r of k".

    Returns (i, (-1)^(i-r) * C(i-1, i-r)) for i = r..k. Summing the weight times
    the number of matching i-subsets gives the 0/1 predicate.
    """
    if not 1 <= r <= k:
        raise WorkloadError("Need 1 <= r <= k", {"r": r, "k": k})
    return tuple((i, (-1) ** (i - r) * math.comb(i - 1, i - r)) for i in range(r, k + 1))


# ========== Chunked enumeration ==========


@dataclass(frozen=True)
class TargetChunk:
    """
    Contiguous run of a threshold's queries.

    Leading `fixed` positions of the target tuple are pinned; the remaining
    positions range over their full category sets.
    """

    start: int
    fixed: tuple[int, ...]
    cardinalities: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        p = len(self.fixed)
        return (1,) * p + self.cardinalities[p:]

    @property
    def size(self) -> int:
        return math.prod(self.cardinalities[len(self.fixed) :])

    def selection(self, position: int) -> np.ndarray:
        """Category indices covered at one target position."""
        if position < len(self.fixed):
            return np.array([self.fixed[position]], dtype=np.int64)
        return np.arange(self.cardinalities[position], dtype=np.int64)


def iter_target_chunks(threshold: Threshold, schema: Schema, batch_cap: int) -> Iterator[TargetChunk]:
    """Split a threshold's queries into chunks of at most batch_cap queries."""
    if batch_cap < 1:
        raise WorkloadError("batch_cap must be at least 1", {"batch_cap": batch_cap})
    cards = threshold.cardinalities(schema)
    prefix = 0
    while math.prod(cards[prefix:]) > batch_cap:
        prefix += 1
    suffix = math.prod(cards[prefix:])
    for offset, fixed in enumerate(itertools.product(*(range(t) for t in cards[:prefix]))):
        yield TargetChunk(start=offset * suffix, fixed=tuple(fixed), cardinalities=cards)


def iter_workload_chunks(
    workload: Workload, schema: Schema, batch_cap: int
) -> Iterator[tuple[int, Threshold, TargetChunk, int]]:
    """Yield (position, threshold, chunk, global start) over the whole workload."""
    starts = threshold_starts(workload, schema)
    for position, threshold in enumerate(workload):
        for chunk in iter_target_chunks(threshold, schema, batch_cap):
            yield position, threshold, chunk, starts[position] + chunk.start


def peak_query_buffer(workload: Workload, schema: Schema, batch_cap: int) -> int:
    """Largest per-chunk answer buffer the streaming evaluators allocate."""
    peak = 0
    for threshold in workload:
        chunk = next(iter_target_chunks(threshold, schema, batch_cap))
        peak = max(peak, chunk.size)
    return peak


# ========== True answers ==========


def chunk_match_counts(columns: np.ndarray, threshold: Threshold, chunk: TargetChunk) -> np.ndarray:
    """
    Number of records satisfying each query of a chunk.

    Args:
        columns: n x k record values restricted to the threshold's features
        threshold: the threshold
        chunk: the chunk of target tuples

    Returns:
        Integer counts with shape chunk.shape
    """
    k = threshold.k
    cards = chunk.cardinalities
    p = len(chunk.fixed)
    counts = np.zeros(chunk.shape, dtype=np.int64)

    for i, coefficient in at_least_coefficients(threshold.r, k):
        for subset in itertools.combinations(range(k), i):
            fixed_positions = [j for j in subset if j < p]
            free_positions = [j for j in subset if j >= p]

            rows = columns
            if fixed_positions:
                mask = np.all(columns[:, fixed_positions] == np.asarray([chunk.fixed[j] for j in fixed_positions]), axis=1)
                rows = columns[mask]
            if rows.shape[0] == 0:
                continue

            free_cards = [cards[j] for j in free_positions]
            if free_positions:
                flat = np.ravel_multi_index(tuple(rows[:, free_positions].T), free_cards)
                histogram = np.bincount(flat, minlength=math.prod(free_cards)).reshape(free_cards)
            else:
                histogram = np.asarray(rows.shape[0], dtype=np.int64)

            broadcast = [cards[j] if j in free_positions else 1 for j in range(k)]
            counts += coefficient * histogram.reshape(broadcast)

    return counts


def iter_true_answers(dataset: Dataset, workload: Workload, batch_cap: int) -> Iterator[tuple[int, np.ndarray]]:
    """Stream (global start, answers) chunk by chunk."""
    schema = dataset.schema
    workload.validate_for(schema)
    current = -1
    columns = None
    for position, threshold, chunk, start in iter_workload_chunks(workload, schema, batch_cap):
        if position != current:
            columns = dataset.records[:, threshold.features]
            current = position
        counts = chunk_match_counts(columns, threshold, chunk)
        yield start, counts.reshape(-1) / dataset.n


def true_answers(dataset: Dataset, workload: Workload, batch_cap: int = 2**20) -> AnswerVector:
    """
    Exact answers of every consistent query.

    Evaluated threshold by threshold through histograms over the threshold's
    feature subsets, so no m x n structure is ever formed.
    """
    m = consistent_query_count(workload, dataset.schema)
    values = np.empty(m, dtype=np.float64)
    for start, chunk in iter_true_answers(dataset, workload, batch_cap):
        values[start : start + chunk.size] = chunk
    return AnswerVector(values)


def true_answers_at(dataset: Dataset, workload: Workload, indices: Sequence[int]) -> np.ndarray:
    """Exact answers of selected queries, by direct predicate evaluation."""
    schema = dataset.schema
    starts = threshold_starts(workload, schema)
    records = dataset.records
    answers = np.empty(len(indices), dtype=np.float64)
    for out, index in enumerate(indices):
        query = query_at(workload, schema, int(index), starts)
        matches = (records[:, query.threshold.features] == np.asarray(query.y)[None, :]).sum(axis=1)
        answers[out] = np.count_nonzero(matches >= query.threshold.r) / dataset.n
    return answers


# ========== Sampling and filtering ==========


def sample_uniform_workload(
    r: int, k: int, size: int, schema: Schema, rng: np.random.Generator, max_queries: Optional[int] = None
) -> Workload:
    """
    Distinct k-subsets of the features, uniformly at random.

    Sampling is without replacement over subsets; draw order is kept. With
    `max_queries`, only subsets with at most that many consistent queries are
    eligible, so the workload keeps its requested size.
    """
    if not 1 <= r <= k <= schema.d:
        raise WorkloadError("Need 1 <= r <= k <= d", {"r": r, "k": k, "d": schema.d})
    total = math.comb(schema.d, k)
    if not 1 <= size <= total:
        raise WorkloadError("Workload size exceeds number of distinct k-subsets", {"size": size, "subsets": total})
    cards = schema.cardinalities

    def eligible(subset: tuple[int, ...]) -> bool:
        return max_queries is None or math.prod(cards[f] for f in subset) <= max_queries

    if total <= 100_000:
        subsets = [s for s in itertools.combinations(range(schema.d), k) if eligible(s)]
        if size > len(subsets):
            raise WorkloadError(
                "Workload size exceeds number of eligible k-subsets",
                {"size": size, "eligible": len(subsets), "max_queries": max_queries},
            )
        chosen = [subsets[i] for i in rng.choice(len(subsets), size=size, replace=False)]
    else:
        seen: dict[tuple[int, ...], None] = {}
        attempts = 0
        while len(seen) < size:
            attempts += 1
            if attempts > 1000 * size:
                raise WorkloadError("Too few eligible k-subsets found", {"size": size, "max_queries": max_queries})
            subset = tuple(sorted(int(f) for f in rng.choice(schema.d, size=k, replace=False)))
            if eligible(subset):
                seen.setdefault(subset, None)
        chosen = list(seen)

    return Workload(tuple(Threshold(r=r, k=k, features=tuple(int(f) for f in subset)) for subset in chosen))


def filter_large_thresholds(workload: Workload, schema: Schema, limit: int) -> Workload:
    """
    Drop thresholds with more than `limit` consistent queries.

    Only used to reproduce filtered comparison runs; results are biased.
    """
    kept = tuple(t for t in workload if threshold_query_count(t, schema) <= limit)
    if not kept:
        raise WorkloadError("Every threshold exceeds the size limit", {"limit": limit})
    if len(kept) < len(workload):
        logger.warning("Large thresholds filtered", dropped=len(workload) - len(kept), limit=limit)
    return Workload(kept)
