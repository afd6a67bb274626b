"""
rap-engine - Differentially private answers to r-of-k threshold workloads

Learns a relaxed synthetic dataset with Relaxed Adaptive Projection and
measures present and future error of the answers it gives.

Example Usage:
    from rap_engine import DpParams, RapConfig, load_dataset, rap, sample_uniform_workload

    dataset = load_dataset("adult.csv")
    workload = sample_uniform_workload(3, 3, 64, dataset.schema, rng)
    output = rap(dataset, workload, DpParams(epsilon=1.0, delta=1e-9), RapConfig(rounds_T=4, per_round_K=16))

CLI Usage:
    rap-engine encode data.csv               # Infer and persist a schema
    rap-engine run --data data.csv ...       # Single experiment cell
    rap-engine grid --config exp.yaml        # Full experiment grid
    rap-engine future-eval --config exp.yaml # Partial-knowledge experiment
    rap-engine drift-tv --d 14               # TV distance vs drift curve
"""

__version__ = "1.0.0"
__license__ = "MIT"

from rap_engine.engine.dataset import Dataset, RelaxedDataset, Schema, load_dataset, planted_dataset
from rap_engine.engine.generalization import (
    drift,
    estimate_future_error,
    make_distribution,
    total_variation,
)
from rap_engine.engine.mechanism import RapOutput, baseline_all_zero, baseline_gm, present_error, rap
from rap_engine.engine.privacy import eps_delta_to_rho, rho_to_eps
from rap_engine.engine.workload import Threshold, Workload, consistent_query_count, sample_uniform_workload, true_answers
from rap_engine.utils.types import DpParams, ExperimentConfig, OptimizerConfig, RapConfig, SelectionMode

__all__ = [
    # Data
    "Dataset",
    "RelaxedDataset",
    "Schema",
    "load_dataset",
    "planted_dataset",
    # Workloads
    "Threshold",
    "Workload",
    "consistent_query_count",
    "sample_uniform_workload",
    "true_answers",
    # Mechanisms
    "RapOutput",
    "rap",
    "baseline_all_zero",
    "baseline_gm",
    "present_error",
    "eps_delta_to_rho",
    "rho_to_eps",
    # Generalization
    "make_distribution",
    "drift",
    "total_variation",
    "estimate_future_error",
    # Config
    "DpParams",
    "RapConfig",
    "OptimizerConfig",
    "SelectionMode",
    "ExperimentConfig",
]
