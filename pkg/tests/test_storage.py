"""
Tests for schema, workload, config and run-artifact persistence
"""

import numpy as np
import pytest

from rap_engine.engine.dataset import synthetic_schema
from rap_engine.engine.mechanism import rap
from rap_engine.exceptions import ConfigurationError, SchemaError, WorkloadError
from rap_engine.storage.artifacts import (
    ArtifactStore,
    build_experiment_config,
    load_experiment_config,
    load_schema,
    load_workload,
    merge_overrides,
    save_schema,
    save_workload,
    synthetic_columns,
)
from rap_engine.utils.types import ALL, DpParams, MechanismName, RapConfig

EXPERIMENT_YAML = """\
dataset_path: data/adult.csv
epsilons: [0.1, 1.0]
workload_sizes: [16]
rounds: [1, 4]
per_round_k: [8]
mechanisms: [rap, gm]
trials: 3
"""


class TestSchemaFiles:
    """Test schema sidecars."""

    def test_round_trip(self, tmp_path, schema):
        path = tmp_path / "schema.json"

        save_schema(schema, path)

        assert load_schema(path) == schema

    def test_missing(self, tmp_path):
        with pytest.raises(SchemaError):
            load_schema(tmp_path / "absent.json")

    def test_malformed(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text('{"columns": []}')

        with pytest.raises(SchemaError):
            load_schema(path)


class TestWorkloadFiles:
    """Test workload files."""

    def test_round_trip(self, tmp_path, workload):
        path = tmp_path / "nested" / "workload.json"

        save_workload(workload, path)

        assert load_workload(path) == workload

    def test_not_a_list(self, tmp_path):
        path = tmp_path / "workload.json"
        path.write_text('{"r": 1}')

        with pytest.raises(WorkloadError):
            load_workload(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "workload.json"
        path.write_text("[{")

        with pytest.raises(WorkloadError):
            load_workload(path)


class TestExperimentConfig:
    """Test YAML experiment configs."""

    def test_load(self, tmp_path):
        path = tmp_path / "experiment.yaml"
        path.write_text(EXPERIMENT_YAML)

        config = load_experiment_config(path)

        assert config.epsilons == [0.1, 1.0]
        assert config.rounds == [1, 4]
        assert config.per_round_k == [8]
        assert config.mechanisms == [MechanismName.RAP, MechanismName.GM]
        assert config.trials == 3
        assert config.delta_mode == "auto_n_squared"

    def test_overrides(self, tmp_path):
        path = tmp_path / "experiment.yaml"
        path.write_text(EXPERIMENT_YAML)

        config = load_experiment_config(path, {"trials": 1, "root_seed": None, "results_path": "out.csv"})

        assert config.trials == 1
        assert config.root_seed == 0
        assert config.results_path == "out.csv"

    def test_optimizer_overrides_merge(self, tmp_path):
        path = tmp_path / "experiment.yaml"
        path.write_text(EXPERIMENT_YAML + "optimizer:\n  max_iterations: 20\n  patience: 5\n")

        config = load_experiment_config(path, {"optimizer": {"patience": 2, "learning_rate": None}})

        assert config.optimizer.max_iterations == 20
        assert config.optimizer.patience == 2
        assert config.optimizer.learning_rate == 0.05

    def test_merge_overrides(self):
        merged = merge_overrides({"trials": 3, "optimizer": {"patience": 5}}, {"trials": None, "optimizer": {"beta": 1}})

        assert merged == {"trials": 3, "optimizer": {"patience": 5, "beta": 1}}

    def test_all_keyword(self, tmp_path):
        path = tmp_path / "experiment.yaml"
        path.write_text(EXPERIMENT_YAML.replace("rounds: [1, 4]", "rounds: [1]").replace("[8]", "[ALL, 8]"))

        assert load_experiment_config(path).per_round_k == [ALL, 8]

    def test_all_with_rounds_rejected(self, tmp_path):
        path = tmp_path / "experiment.yaml"
        path.write_text(EXPERIMENT_YAML.replace("[8]", "[ALL]"))

        with pytest.raises(ConfigurationError):
            load_experiment_config(path)

    def test_explicit_delta_required(self):
        with pytest.raises(ConfigurationError):
            build_experiment_config(
                {"dataset_path": "x.csv", "epsilons": [1.0], "workload_sizes": [4], "delta_mode": "explicit"}
            )

    def test_bad_epsilon(self):
        with pytest.raises(ConfigurationError):
            build_experiment_config({"dataset_path": "x.csv", "epsilons": [0.0], "workload_sizes": [4]})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_experiment_config(tmp_path / "absent.yaml")

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "experiment.yaml"
        path.write_text("- 1\n- 2\n")

        with pytest.raises(ConfigurationError):
            load_experiment_config(path)


class TestArtifactStore:
    """Test mechanism output dumps."""

    def test_columns(self):
        schema = synthetic_schema([2, 3])

        assert synthetic_columns(schema) == ["f0=c0", "f0=c1", "f1=c0", "f1=c1", "f1=c2"]

    def test_round_trip(self, tmp_path, dataset, workload, fast_optimizer):
        output = rap(dataset, workload, DpParams(epsilon=1.0, delta=1e-6), RapConfig(n_prime=12, optimizer=fast_optimizer))
        store = ArtifactStore(tmp_path / "run")

        store.save_rap_output(output, workload)

        np.testing.assert_array_equal(store.load_synthetic().values, output.synthetic.values)
        np.testing.assert_array_equal(store.load_answers(), output.answers.values)
        assert store.load_ledger() == output.budget_ledger
        assert load_workload(store.workload_path) == workload
        assert load_schema(store.schema_path) == dataset.schema

    def test_column_mismatch(self, tmp_path, dataset, workload, fast_optimizer):
        output = rap(dataset, workload, DpParams(epsilon=1.0, delta=1e-6), RapConfig(n_prime=4, optimizer=fast_optimizer))
        store = ArtifactStore(tmp_path)
        store.save_rap_output(output)
        save_schema(synthetic_schema([2, 3, 2, 4], prefix="g"), store.schema_path)

        with pytest.raises(SchemaError):
            store.load_synthetic()
        assert not store.workload_path.exists()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
