"""
Shared fixtures for the rap-engine test suite
"""

import numpy as np
import pytest

from rap_engine.engine.dataset import Dataset, planted_dataset, synthetic_schema
from rap_engine.engine.workload import Threshold, Workload, evaluate_predicate, query_at, threshold_starts
from rap_engine.utils.types import OptimizerConfig

CARDINALITIES = (2, 3, 2, 4)


@pytest.fixture
def schema():
    return synthetic_schema(CARDINALITIES)


@pytest.fixture
def dataset():
    """120 records with features 0/2 and 1/3 correlated."""
    return planted_dataset(120, CARDINALITIES, np.random.default_rng(11), correlated_pairs=[(0, 2), (1, 3)])


@pytest.fixture
def workload():
    """One disjunction, one 2-of-3 threshold and one 3-way marginal."""
    return Workload(
        (
            Threshold.of(1, [0, 1, 3]),
            Threshold.of(2, [0, 1, 2]),
            Threshold.of(3, [1, 2, 3]),
        )
    )


@pytest.fixture
def fast_optimizer():
    return OptimizerConfig(learning_rate=0.05, max_iterations=60, patience=20)


@pytest.fixture
def brute_force():
    """Answers of every consistent query by a double loop over queries and records."""

    def answers(dataset: Dataset, workload: Workload) -> np.ndarray:
        schema = dataset.schema
        starts = threshold_starts(workload, schema)
        records = dataset.records
        values = np.empty(starts[-1])
        for index in range(starts[-1]):
            query = query_at(workload, schema, index, starts)
            values[index] = sum(evaluate_predicate(record, query) for record in records) / dataset.n
        return values

    return answers
