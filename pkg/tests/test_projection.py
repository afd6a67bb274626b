"""
Tests for sparsemax, Adam and relaxed projection
"""

import itertools

import numpy as np
import pytest

from rap_engine.engine.dataset import RelaxedDataset, init_relaxed, synthetic_schema
from rap_engine.engine.projection import (
    AdamOptimizer,
    project_rows,
    relaxed_projection,
    run_relaxed_projection,
    sparsemax,
    sparsemax_rows,
)
from rap_engine.engine.surrogate import PolyThresholdSpec, QueryBatch, loss_and_gradient, surrogate_answers
from rap_engine.engine.workload import Threshold, Workload, true_answers
from rap_engine.exceptions import ProjectionDivergedError, ProjectionError
from rap_engine.utils.types import OptimizerConfig


def _kkt_projection(z: np.ndarray) -> np.ndarray:
    """Simplex projection by enumerating candidate supports."""
    for size in range(1, z.size + 1):
        for support in itertools.combinations(range(z.size), size):
            tau = (z[list(support)].sum() - 1.0) / size
            inside = all(z[i] - tau > 0 for i in support)
            outside = all(z[i] - tau <= 0 for i in range(z.size) if i not in support)
            if inside and outside:
                return np.maximum(z - tau, 0.0)
    raise AssertionError("no feasible support")


class TestSparsemax:
    """Test simplex projection."""

    def test_reference(self):
        np.testing.assert_allclose(sparsemax([0.8, 0.3, -0.1]), [0.75, 0.25, 0.0], atol=1e-12)

    def test_fixed_point(self):
        z = np.array([0.2, 0.5, 0.3])

        np.testing.assert_allclose(sparsemax(z), z, atol=1e-12)

    def test_constant_input(self):
        np.testing.assert_allclose(sparsemax([4.0, 4.0, 4.0, 4.0]), [0.25] * 4, atol=1e-12)

    def test_matches_kkt(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            z = rng.normal(0.0, 2.0, size=int(rng.integers(1, 7)))
            projected = sparsemax(z)

            np.testing.assert_allclose(projected, _kkt_projection(z), atol=1e-9)
            assert projected.min() >= 0.0
            assert projected.sum() == pytest.approx(1.0)
            np.testing.assert_allclose(sparsemax(projected), projected, atol=1e-9)

    def test_rows(self):
        Z = np.random.default_rng(1).normal(size=(50, 4))

        projected = sparsemax_rows(Z)

        np.testing.assert_allclose(projected.sum(axis=1), 1.0)

    def test_non_finite(self):
        with pytest.raises(ProjectionError):
            sparsemax([0.1, np.nan])

    def test_empty(self):
        with pytest.raises(ProjectionError):
            sparsemax([])


class TestProjectRows:
    """Test block-wise projection of relaxed datasets."""

    def test_blocks_on_simplex(self, schema):
        relaxed = init_relaxed(20, schema, np.random.default_rng(0))

        projected = project_rows(relaxed)

        for feature in range(schema.d):
            np.testing.assert_allclose(projected.block(feature).sum(axis=1), 1.0)
            assert projected.block(feature).min() >= 0.0
        assert not np.array_equal(relaxed.values, projected.values)


class TestAdam:
    """Test the optimizer."""

    def test_first_step_is_signed_learning_rate(self):
        optimizer = AdamOptimizer(OptimizerConfig(learning_rate=0.05))
        params = np.zeros(2)

        optimizer.step(params, np.array([1.0, -2.0]))

        np.testing.assert_allclose(params, [-0.05, 0.05], atol=1e-7)

    def test_minimizes_quadratic(self):
        optimizer = AdamOptimizer(OptimizerConfig(learning_rate=0.1))
        params = np.array([3.0, -2.0])

        for _ in range(500):
            optimizer.step(params, 2.0 * params)

        np.testing.assert_allclose(params, 0.0, atol=5e-2)


class TestRelaxedProjection:
    """Test the projection loop."""

    def test_already_fitted(self, schema, workload):
        relaxed = project_rows(init_relaxed(8, schema, np.random.default_rng(0)))
        batch = QueryBatch.from_workload(workload, schema)

        result = run_relaxed_projection(relaxed, batch, surrogate_answers(relaxed, batch), OptimizerConfig())

        assert result.iterations == 0
        np.testing.assert_array_equal(result.synthetic.values, relaxed.values)

    def test_single_marginal_target(self):
        """Target 1.0 on one category drives every row to that category."""
        schema = synthetic_schema([2])
        relaxed = project_rows(init_relaxed(10, schema, np.random.default_rng(1)))
        spec = PolyThresholdSpec.build((0,), 1)
        config = OptimizerConfig(stop_tolerance=0.0, max_iterations=2000)

        synthetic = relaxed_projection(relaxed, [spec], np.array([1.0]), config)

        np.testing.assert_allclose(synthetic.values[:, 0], 1.0, atol=1e-3)
        assert loss_and_gradient(synthetic, [spec], np.array([1.0]))[0] <= 1e-6

    def test_iteration_reporting(self, schema, workload):
        relaxed = project_rows(init_relaxed(8, schema, np.random.default_rng(2)))
        batch = QueryBatch.from_workload(workload, schema)
        targets = np.random.default_rng(3).random(len(batch))
        config = OptimizerConfig(max_iterations=10, patience=1000, stop_tolerance=0.0)
        seen = []

        result = run_relaxed_projection(
            relaxed, batch, targets, config, on_iteration=lambda it, loss, best, current: seen.append((it, loss, best))
        )

        assert result.iterations == 10
        assert [it for it, _, _ in seen] == list(range(1, 11))
        assert len(result.losses) == 10
        bests = [best for _, _, best in seen]
        assert all(a >= b for a, b in zip(bests, bests[1:]))

    def test_returns_best_iterate(self, schema, workload):
        relaxed = project_rows(init_relaxed(8, schema, np.random.default_rng(4)))
        batch = QueryBatch.from_workload(workload, schema)
        targets = np.random.default_rng(5).random(len(batch))
        start_loss = loss_and_gradient(relaxed, batch, targets)[0]

        result = run_relaxed_projection(relaxed, batch, targets, OptimizerConfig(max_iterations=50))

        assert result.best_loss <= start_loss
        assert result.best_loss <= min(result.losses)
        assert loss_and_gradient(result.synthetic, batch, targets)[0] == pytest.approx(result.best_loss)

    def test_reduces_error_on_consistent_targets(self, dataset):
        """Fitting exact marginals of a dataset brings the synthetic answers close."""
        workload = Workload((Threshold.of(2, [0, 1]), Threshold.of(2, [2, 3])))
        batch = QueryBatch.from_workload(workload, dataset.schema)
        targets = true_answers(dataset, workload).values
        relaxed = project_rows(init_relaxed(40, dataset.schema, np.random.default_rng(6)))

        result = run_relaxed_projection(relaxed, batch, targets, OptimizerConfig(max_iterations=1000, stop_tolerance=0.0))

        assert np.abs(surrogate_answers(result.synthetic, batch) - targets).max() < 0.05

    def test_input_untouched(self, schema, workload):
        relaxed = project_rows(init_relaxed(4, schema, np.random.default_rng(7)))
        before = relaxed.values.copy()
        batch = QueryBatch.from_workload(workload, schema)

        run_relaxed_projection(relaxed, batch, np.zeros(len(batch)), OptimizerConfig(max_iterations=5))

        np.testing.assert_array_equal(relaxed.values, before)

    def test_diverged(self, schema, workload):
        relaxed = project_rows(init_relaxed(4, schema, np.random.default_rng(8)))
        batch = QueryBatch.from_workload(workload, schema)

        with pytest.raises(ProjectionDivergedError):
            run_relaxed_projection(relaxed, batch, np.full(len(batch), np.nan), OptimizerConfig())

    def test_mismatched_targets(self, schema, workload):
        relaxed = RelaxedDataset(schema, np.full((2, schema.d_prime), 0.5))

        with pytest.raises(ProjectionError):
            run_relaxed_projection(relaxed, QueryBatch.from_workload(workload, schema), np.zeros(3), OptimizerConfig())


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
