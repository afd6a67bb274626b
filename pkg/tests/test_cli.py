"""
Tests for the rap-engine command-line interface
"""

import argparse

import numpy as np
import pandas as pd
import pytest

from rap_engine.cli import _grid_overrides, _run_config, build_parser, main, parse_float_list, parse_int_list, parse_k, parse_k_list
from rap_engine.engine.dataset import planted_dataset, save_dataset
from rap_engine.harness.results import read_results
from rap_engine.storage.artifacts import load_experiment_config, load_schema
from rap_engine.utils.types import ALL, MechanismName

CELL_ARGS = ["--epsilon", "1", "--workload-size", "2", "--r", "1", "--k", "2", "--trials", "2"]
FAST_ARGS = ["--n-prime", "8", "--max-iterations", "20"]


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "planted.csv"
    save_dataset(planted_dataset(120, (2, 3, 2, 4), np.random.default_rng(0), correlated_pairs=[(0, 2)]), path)
    return path


@pytest.fixture
def grid_file(tmp_path, data_file):
    path = tmp_path / "experiment.yaml"
    path.write_text(
        f"dataset_path: {data_file}\n"
        "epsilons: [1.0]\n"
        "workload_sizes: [2]\n"
        "r: 1\n"
        "k: 2\n"
        "n_prime: 8\n"
        "optimizer:\n"
        "  max_iterations: 20\n"
        "mechanisms: [rap, all_zero]\n"
        "trials: 1\n"
        f"results_path: {tmp_path / 'grid.csv'}\n"
    )
    return path


class TestParsers:
    """Test argument parsing helpers."""

    def test_parse_k(self):
        assert parse_k("all") == ALL
        assert parse_k("16") == 16
        with pytest.raises(argparse.ArgumentTypeError):
            parse_k("many")

    def test_parse_float_list(self):
        assert parse_float_list("0, 0.5,1") == [0.0, 0.5, 1.0]
        with pytest.raises(argparse.ArgumentTypeError):
            parse_float_list("0,x")

    def test_parse_lists(self):
        assert parse_int_list("1, 4") == [1, 4]
        assert parse_k_list("ALL,8") == [ALL, 8]
        with pytest.raises(argparse.ArgumentTypeError):
            parse_int_list("1.5")

    def test_no_command(self):
        assert main([]) == 1

    def test_version(self):
        with pytest.raises(SystemExit) as exc_info:
            main(["--version"])

        assert exc_info.value.code == 0


class TestEncode:
    """Test schema inference."""

    def test_writes_sidecar(self, data_file):
        assert main(["encode", str(data_file)]) == 0

        schema = load_schema(data_file.with_suffix(".schema.json"))
        assert schema.cardinalities == (2, 3, 2, 4)

    def test_missing_file(self, tmp_path):
        assert main(["encode", str(tmp_path / "absent.csv")]) == 1


class TestRun:
    """Test single-cell runs."""

    def test_all_zero(self, tmp_path, data_file):
        output = tmp_path / "results.csv"

        code = main(["run", "--data", str(data_file), "--mechanism", "all_zero", *CELL_ARGS, "--output", str(output)])

        assert code == 0
        rows = read_results(output)
        assert [row.trial for row in rows] == [0, 1]
        assert all(row.dataset == "planted" for row in rows)

    def test_rap_with_dumps(self, tmp_path, data_file):
        output = tmp_path / "results.csv"
        progress = tmp_path / "progress.csv"
        dumps = tmp_path / "dumps"

        code = main(
            [
                "run", "--data", str(data_file), *CELL_ARGS, *FAST_ARGS,
                "-T", "2", "-K", "3",
                "--output", str(output), "--progress", str(progress),
                "--dump-dir", str(dumps), "--throughput",
            ]
        )

        assert code == 0
        assert [row.per_round_K for row in read_results(output)] == ["3", "3"]
        assert len(pd.read_csv(progress)) > 0
        assert len(list(dumps.iterdir())) == 2

    def test_throughput_needs_dumps(self, tmp_path, data_file):
        code = main(["run", "--data", str(data_file), *CELL_ARGS, "--throughput", "--output", str(tmp_path / "r.csv")])

        assert code == 1

    def test_failed_trials(self, tmp_path, data_file):
        output = tmp_path / "results.csv"

        code = main(
            ["run", "--data", str(data_file), "--mechanism", "gm", "--epsilon", "1", "--workload-size", "5",
             "--k", "3", "--trials", "1", "--output", str(output)]
        )

        assert code == 1
        assert read_results(output)[0].error.startswith("WorkloadError")

    def test_future_error(self, tmp_path, data_file):
        output = tmp_path / "results.csv"

        code = main(
            ["run", "--data", str(data_file), *CELL_ARGS, *FAST_ARGS, "--distribution", "zipf",
             "--gamma", "0.5", "--num-future", "3", "--output", str(output)]
        )

        assert code == 0
        assert all(row.err_future is not None for row in read_results(output))

    def test_config_with_flag_overrides(self, tmp_path, grid_file):
        output = tmp_path / "results.csv"

        code = main(["run", "--config", str(grid_file), "--mechanism", "all_zero", "--trials", "2", "--output", str(output)])

        assert code == 0
        rows = read_results(output)
        assert [row.mechanism for row in rows] == ["all_zero", "all_zero"]
        assert all(row.r == 1 and row.k == 2 for row in rows)
        assert not (tmp_path / "grid.csv").exists()

    def test_config_sweep_rejected(self, grid_file):
        assert main(["run", "--config", str(grid_file)]) == 1

    def test_needs_dataset(self):
        assert main(["run", *CELL_ARGS]) == 1

    def test_optimizer_flags(self, data_file):
        args = build_parser().parse_args(
            ["run", "--data", str(data_file), *CELL_ARGS, "--patience", "3", "--stop-tolerance", "0.01",
             "--beta1", "0.8", "--beta2", "0.99", "--epsilon-stabilizer", "1e-6", "--batch-cap", "64"]
        )

        config = _run_config(args)

        assert config.optimizer.patience == 3
        assert config.optimizer.stop_tolerance == 0.01
        assert config.optimizer.moment_decay_1 == 0.8
        assert config.optimizer.moment_decay_2 == 0.99
        assert config.optimizer.epsilon_stabilizer == 1e-6
        assert config.optimizer.max_iterations == 1000
        assert config.batch_cap == 64

    def test_flags_override_config_optimizer(self, grid_file):
        args = build_parser().parse_args(["run", "--config", str(grid_file), "--mechanism", "rap", "--patience", "4"])

        config = _run_config(args)

        assert config.optimizer.patience == 4
        assert config.optimizer.max_iterations == 20
        assert config.mechanisms == [MechanismName.RAP]


class TestGrid:
    """Test grid and future-eval commands."""

    def test_grid(self, tmp_path, grid_file):
        assert main(["grid", "--config", str(grid_file)]) == 0

        assert sorted(row.mechanism for row in read_results(tmp_path / "grid.csv")) == ["all_zero", "rap"]

    def test_grid_overrides(self, tmp_path, grid_file):
        output = tmp_path / "override.csv"

        assert main(["grid", "--config", str(grid_file), "--trials", "2", "--output", str(output)]) == 0

        assert len(read_results(output)) == 4
        assert not (tmp_path / "grid.csv").exists()

    def test_grid_list_overrides(self, tmp_path, grid_file):
        output = tmp_path / "override.csv"

        code = main(
            ["grid", "--config", str(grid_file), "--epsilons", "0.5,1", "--workload-sizes", "1,2",
             "--mechanisms", "all_zero", "--r", "2", "--output", str(output)]
        )

        assert code == 0
        rows = read_results(output)
        assert sorted((row.epsilon, row.workload_size) for row in rows) == [(0.5, 1), (0.5, 2), (1.0, 1), (1.0, 2)]
        assert all(row.r == 2 and row.k == 2 for row in rows)

    def test_grid_rounds_and_k(self, grid_file):
        args = build_parser().parse_args(
            ["grid", "--config", str(grid_file), "-T", "1,2", "-K", "2,4", "--k", "3", "--max-iterations", "7",
             "--filter-large", "--selection", "iterative"]
        )

        config = load_experiment_config(args.config, _grid_overrides(args))

        assert config.rounds == [1, 2]
        assert config.per_round_k == [2, 4]
        assert config.k == 3
        assert config.optimizer.max_iterations == 7
        assert config.filter_large is True
        assert config.n_prime == 8

    def test_future_eval_needs_distribution(self, grid_file):
        assert main(["future-eval", "--config", str(grid_file)]) == 1

    def test_future_eval(self, tmp_path, grid_file):
        output = tmp_path / "future.csv"

        code = main(
            ["future-eval", "--config", str(grid_file), "--distribution", "geometric", "--gammas", "0,0.5",
             "--num-future", "3", "--output", str(output)]
        )

        assert code == 0
        rows = read_results(output)
        assert sorted({row.gamma for row in rows}) == [0.0, 0.5]
        assert all(row.distribution == "geometric(0.5)" for row in rows)

    def test_missing_config(self, tmp_path):
        assert main(["grid", "--config", str(tmp_path / "absent.yaml")]) == 1


class TestDriftTv:
    """Test the drift curve command."""

    def test_curve(self, tmp_path):
        output = tmp_path / "tv.csv"

        assert main(["drift-tv", "--d", "3", "--gammas", "0,1", "--trials", "3", "--output", str(output)]) == 0

        frame = pd.read_csv(output)
        assert list(frame.columns) == ["gamma", "mean_tv", "halfwidth", "trials"]
        assert frame["mean_tv"].tolist() == pytest.approx([0.0, 3 / 7])

    def test_d_from_schema(self, tmp_path, data_file):
        main(["encode", str(data_file)])

        assert main(["drift-tv", "--schema", str(data_file.with_suffix(".schema.json")), "--trials", "2"]) == 0

    def test_needs_dimension(self):
        assert main(["drift-tv"]) == 1


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
