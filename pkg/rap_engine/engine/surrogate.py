"""
Surrogate Queries

Differentiable extensions of r-of-k threshold queries evaluated on relaxed
datasets: product queries, generalized products and polynomial threshold
queries, with analytic gradients.

Polynomial thresholds are evaluated in inclusion-exclusion form. When
r <= k/2 the complement r' = k - r + 1 is evaluated on 1 - x instead, which
has fewer terms.
"""

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import structlog

from rap_engine.engine.dataset import RelaxedDataset, Schema
from rap_engine.engine.workload import (
    AnswerVector,
    ConsistentQuery,
    Threshold,
    TargetChunk,
    Workload,
    at_least_coefficients,
    consistent_query_count,
    iter_workload_chunks,
)
from rap_engine.exceptions import SurrogateError

logger = structlog.get_logger()

MAX_K = 16


@dataclass(frozen=True)
class FeatureIndexSet:
    """Coordinates of the relaxed space selected by a query, one per feature block."""

    coords: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.coords)) != len(self.coords):
            raise SurrogateError("Coordinates must be distinct", {"coords": self.coords})

    def __len__(self) -> int:
        return len(self.coords)


def use_negation(r: int, k: int) -> bool:
    """Complement transform applies when r <= k/2."""
    return 2 * r <= k


@dataclass(frozen=True)
class PolyThresholdSpec:
    """A polynomial threshold query and how it is evaluated."""

    coords: FeatureIndexSet
    r: int
    negated: bool
    effective_r: int

    def __post_init__(self) -> None:
        k = len(self.coords)
        if not 1 <= self.r <= k:
            raise SurrogateError("Need 1 <= r <= k", {"r": self.r, "k": k})
        if k > MAX_K:
            raise SurrogateError("k exceeds supported maximum", {"k": k, "max": MAX_K})
        if self.negated:
            if self.effective_r != k - self.r + 1 or 2 * self.effective_r <= k:
                raise SurrogateError("Invalid negated spec", {"r": self.r, "effective_r": self.effective_r, "k": k})
        elif self.effective_r != self.r:
            raise SurrogateError("effective_r must equal r", {"r": self.r, "effective_r": self.effective_r})

    @property
    def k(self) -> int:
        return len(self.coords)

    @classmethod
    def build(cls, coords: Union[FeatureIndexSet, Sequence[int]], r: int, negate: Optional[bool] = None) -> "PolyThresholdSpec":
        """
        Build a spec; `negate=None` applies the r <= k/2 rule, a bool forces it.
        """
        if not isinstance(coords, FeatureIndexSet):
            coords = FeatureIndexSet(tuple(int(c) for c in coords))
        k = len(coords)
        negated = use_negation(r, k) if negate is None else negate
        return cls(coords=coords, r=r, negated=negated, effective_r=k - r + 1 if negated else r)


# ========== Single-row evaluators ==========


def target_coordinates(query: ConsistentQuery, schema: Schema) -> FeatureIndexSet:
    """Relaxed-space coordinate of each target value."""
    offsets = schema.block_offsets
    return FeatureIndexSet(tuple(offsets[f] + y for f, y in zip(query.threshold.features, query.y)))


def spec_for_query(query: ConsistentQuery, schema: Schema) -> PolyThresholdSpec:
    return PolyThresholdSpec.build(target_coordinates(query, schema), query.threshold.r)


def product_query(row: np.ndarray, T: FeatureIndexSet) -> float:
    return float(np.prod(np.asarray(row, dtype=np.float64)[list(T.coords)]))


def generalized_product(row: np.ndarray, T_plus: FeatureIndexSet, T_minus: FeatureIndexSet) -> float:
    if set(T_plus.coords) & set(T_minus.coords):
        raise SurrogateError("T_plus and T_minus overlap", {"plus": T_plus.coords, "minus": T_minus.coords})
    row = np.asarray(row, dtype=np.float64)
    return float(np.prod(row[list(T_plus.coords)]) * np.prod(1.0 - row[list(T_minus.coords)]))


@lru_cache(maxsize=None)
def _weighted_subsets(r: int, k: int) -> tuple[tuple[int, tuple[int, ...]], ...]:
    """(coefficient, subset) pairs of the inclusion-exclusion sum, lexicographic."""
    return tuple(
        (coefficient, subset)
        for i, coefficient in at_least_coefficients(r, k)
        for subset in itertools.combinations(range(k), i)
    )


def _inclusion_exclusion(values: np.ndarray, r: int) -> float:
    total = 0.0
    for coefficient, subset in _weighted_subsets(r, values.shape[0]):
        total += coefficient * np.prod(values[list(subset)])
    return float(total)


def poly_threshold(row: np.ndarray, spec: PolyThresholdSpec) -> float:
    """Polynomial threshold query on one relaxed row."""
    values = np.asarray(row, dtype=np.float64)[list(spec.coords.coords)]
    if spec.negated:
        return 1.0 - _inclusion_exclusion(1.0 - values, spec.effective_r)
    return _inclusion_exclusion(values, spec.r)


def poly_threshold_partition(row: np.ndarray, coords: FeatureIndexSet, r: int) -> float:
    """
    Polynomial threshold query as a sum of generalized products.

    One term per split of the coordinates into a matched part of size >= r and
    an unmatched remainder.
    """
    k = len(coords)
    total = 0.0
    for size in range(r, k + 1):
        for plus in itertools.combinations(coords.coords, size):
            minus = tuple(c for c in coords.coords if c not in plus)
            total += generalized_product(row, FeatureIndexSet(plus), FeatureIndexSet(minus))
    return total


# ========== Batched evaluation ==========


@dataclass
class SpecGroup:
    """Specs sharing (k, negated, effective_r), stored as coordinate arrays."""

    k: int
    negated: bool
    effective_r: int
    coords: np.ndarray
    positions: np.ndarray


class QueryBatch:
    """Compact storage of many PolyThresholdSpecs for vectorized evaluation."""

    def __init__(self, groups: Sequence[SpecGroup], size: int):
        self.groups = list(groups)
        self.size = size

    def __len__(self) -> int:
        return self.size

    @classmethod
    def from_specs(cls, specs: Sequence[PolyThresholdSpec]) -> "QueryBatch":
        buckets: dict[tuple[int, bool, int], list[int]] = {}
        for position, spec in enumerate(specs):
            buckets.setdefault((spec.k, spec.negated, spec.effective_r), []).append(position)
        groups = [
            SpecGroup(
                k=k,
                negated=negated,
                effective_r=effective_r,
                coords=np.array([specs[p].coords.coords for p in positions], dtype=np.int64).reshape(len(positions), k),
                positions=np.asarray(positions, dtype=np.int64),
            )
            for (k, negated, effective_r), positions in buckets.items()
        ]
        return cls(groups, len(specs))

    @classmethod
    def from_workload(cls, workload: Workload, schema: Schema) -> "QueryBatch":
        """Every consistent query of a workload, in canonical order."""
        offsets = np.asarray(schema.block_offsets, dtype=np.int64)
        groups: dict[tuple[int, bool, int], tuple[list[np.ndarray], list[np.ndarray]]] = {}
        start = 0
        for threshold in workload:
            cards = threshold.cardinalities(schema)
            targets = np.indices(cards).reshape(threshold.k, -1).T
            coords = targets + offsets[list(threshold.features)][None, :]
            negated = use_negation(threshold.r, threshold.k)
            key = (threshold.k, negated, threshold.k - threshold.r + 1 if negated else threshold.r)
            bucket = groups.setdefault(key, ([], []))
            bucket[0].append(coords)
            bucket[1].append(np.arange(start, start + coords.shape[0], dtype=np.int64))
            start += coords.shape[0]
        batch_groups = [
            SpecGroup(k=k, negated=negated, effective_r=effective_r, coords=np.concatenate(c), positions=np.concatenate(p))
            for (k, negated, effective_r), (c, p) in groups.items()
        ]
        return cls(batch_groups, start)


def as_query_batch(queries: Union[QueryBatch, Sequence[PolyThresholdSpec]]) -> QueryBatch:
    return queries if isinstance(queries, QueryBatch) else QueryBatch.from_specs(queries)


def _iter_slices(total: int, step: int) -> Iterator[slice]:
    for start in range(0, total, step):
        yield slice(start, min(start + step, total))


def _gathered(values: np.ndarray, group: SpecGroup, rows: slice) -> np.ndarray:
    gathered = values[:, group.coords[rows]]
    return 1.0 - gathered if group.negated else gathered


def _row_polynomial(G: np.ndarray, group: SpecGroup) -> np.ndarray:
    """Inclusion-exclusion sum per (row, query) for gathered values G (n' x q x k)."""
    psi = np.zeros(G.shape[:2])
    for coefficient, subset in _weighted_subsets(group.effective_r, group.k):
        psi += coefficient * np.prod(G[:, :, list(subset)], axis=2)
    return psi


def _row_polynomial_gradient(G: np.ndarray, group: SpecGroup) -> np.ndarray:
    """Derivative of the inclusion-exclusion sum in each gathered coordinate."""
    dG = np.zeros(G.shape)
    for coefficient, subset in _weighted_subsets(group.effective_r, group.k):
        for j in subset:
            others = [i for i in subset if i != j]
            dG[:, :, j] += coefficient * (np.prod(G[:, :, others], axis=2) if others else 1.0)
    return dG


def surrogate_answers(
    relaxed: RelaxedDataset, queries: Union[QueryBatch, Sequence[PolyThresholdSpec]], spec_batch: int = 2048
) -> np.ndarray:
    """Mean over rows of each polynomial threshold query."""
    batch = as_query_batch(queries)
    if len(batch) == 0:
        raise SurrogateError("Query batch is empty")
    answers = np.empty(len(batch))
    for group in batch.groups:
        for rows in _iter_slices(group.coords.shape[0], spec_batch):
            means = _row_polynomial(_gathered(relaxed.values, group, rows), group).mean(axis=0)
            answers[group.positions[rows]] = 1.0 - means if group.negated else means
    return answers


def _scatter_columns(gradient: np.ndarray, columns: np.ndarray, contributions: np.ndarray) -> None:
    """gradient[:, columns[i]] += contributions[:, i], with repeated columns summed."""
    order = np.argsort(columns, kind="stable")
    sorted_columns = columns[order]
    starts = np.flatnonzero(np.r_[True, sorted_columns[1:] != sorted_columns[:-1]])
    sums = np.add.reduceat(contributions[:, order], starts, axis=1)
    gradient[:, sorted_columns[starts]] += sums


def loss_and_gradient(
    relaxed: RelaxedDataset,
    queries: Union[QueryBatch, Sequence[PolyThresholdSpec]],
    targets: np.ndarray,
    spec_batch: int = 2048,
) -> tuple[float, np.ndarray]:
    """
    Squared-error loss against noisy targets and its exact gradient.

    loss = sum_q (mean_rows phi_q - target_q)^2. The derivative of a negated
    query 1 - psi(1 - x) in x equals psi'(1 - x), so both forms share one
    gradient expression.
    """
    batch = as_query_batch(queries)
    targets = np.asarray(targets, dtype=np.float64)
    if len(batch) != targets.shape[0] or len(batch) == 0:
        raise SurrogateError("Queries and targets differ in length", {"queries": len(batch), "targets": targets.shape[0]})

    values = relaxed.values
    n_prime = values.shape[0]
    gradient = np.zeros_like(values)
    loss = 0.0
    for group in batch.groups:
        for rows in _iter_slices(group.coords.shape[0], spec_batch):
            G = _gathered(values, group, rows)
            means = _row_polynomial(G, group).mean(axis=0)
            answers = 1.0 - means if group.negated else means
            residual = answers - targets[group.positions[rows]]
            loss += float(residual @ residual)

            weights = 2.0 * residual / n_prime
            contributions = _row_polynomial_gradient(G, group) * weights[None, :, None]
            _scatter_columns(gradient, group.coords[rows].reshape(-1), contributions.reshape(n_prime, -1))
    return loss, gradient


# ========== Whole-threshold evaluation ==========


def _row_sum_outer(blocks: Sequence[np.ndarray], n_prime: int) -> np.ndarray:
    """sum over rows of the outer product of per-row vectors from each block."""
    if not blocks:
        return np.asarray(float(n_prime))
    if len(blocks) == 1:
        return blocks[0].sum(axis=0)
    if len(blocks) == 2:
        return blocks[0].T @ blocks[1]
    operands: list = []
    for axis, block in enumerate(blocks, start=1):
        operands.extend([block, [0, axis]])
    operands.append(list(range(1, len(blocks) + 1)))
    return np.einsum(*operands, optimize=False)


def chunk_surrogate_answers(relaxed: RelaxedDataset, threshold: Threshold, chunk: TargetChunk) -> np.ndarray:
    """
    Surrogate answers for every query of a chunk, in canonical order.

    Each inclusion-exclusion subset contributes a relaxed marginal tensor
    built from the selected block columns.
    """
    schema = relaxed.schema
    offsets = schema.block_offsets
    negated = use_negation(threshold.r, threshold.k)
    effective_r = threshold.k - threshold.r + 1 if negated else threshold.r

    blocks = []
    for position, feature in enumerate(threshold.features):
        block = relaxed.values[:, offsets[feature] + chunk.selection(position)]
        blocks.append(1.0 - block if negated else block)

    sums = np.zeros(chunk.shape)
    for i, coefficient in at_least_coefficients(effective_r, threshold.k):
        for subset in itertools.combinations(range(threshold.k), i):
            tensor = _row_sum_outer([blocks[j] for j in subset], relaxed.n_prime)
            broadcast = [chunk.shape[j] if j in subset else 1 for j in range(threshold.k)]
            sums += coefficient * tensor.reshape(broadcast)

    means = sums.reshape(-1) / relaxed.n_prime
    return 1.0 - means if negated else means


def iter_surrogate_answers(
    relaxed: RelaxedDataset, workload: Workload, batch_cap: int
) -> Iterator[tuple[int, np.ndarray]]:
    for _, threshold, chunk, start in iter_workload_chunks(workload, relaxed.schema, batch_cap):
        yield start, chunk_surrogate_answers(relaxed, threshold, chunk)


def workload_surrogate_answers(relaxed: RelaxedDataset, workload: Workload, batch_cap: int = 2**20) -> AnswerVector:
    """Unclamped surrogate answers of every consistent query of a workload."""
    m = consistent_query_count(workload, relaxed.schema)
    values = np.empty(m)
    for start, chunk in iter_surrogate_answers(relaxed, workload, batch_cap):
        values[start : start + chunk.size] = chunk
    return AnswerVector(values)