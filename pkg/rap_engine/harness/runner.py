"""
Experiment runner

Expands an ExperimentConfig into cells, runs each cell's trials, and streams
ResultRows through a single writer.

Per-trial seeding: seed = root_seed XOR trial. Stream 0 samples the workload
(and drift), stream 1 feeds the Gaussian baseline, stream 2 samples the
future workload; RAP derives its own streams from the seed.
"""

import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import pandas as pd
import structlog

from rap_engine.engine.dataset import Dataset, RelaxedDataset, load_dataset
from rap_engine.engine.generalization import (
    AllZeroAnswerSource,
    ThresholdDistributionSpec,
    drift,
    estimate_future_error,
    make_distribution,
    sample_iid_workload,
)
from rap_engine.engine.mechanism import RapOutput, baseline_all_zero, baseline_gm, present_error, rap
from rap_engine.engine.privacy import BudgetLedger, derive_rng, eps_delta_to_rho
from rap_engine.engine.surrogate import workload_surrogate_answers
from rap_engine.engine.workload import (
    Workload,
    consistent_query_count,
    peak_query_buffer,
    sample_uniform_workload,
    true_answers,
)
from rap_engine.harness.progress import PROGRESS_COLUMNS, TrainingProgressLogger, log_training_progress
from rap_engine.harness.results import CsvAppender, ResultWriter
from rap_engine.storage.artifacts import ArtifactStore, load_schema
from rap_engine.utils.types import (
    ALL,
    CellConfig,
    DpParams,
    DriftParams,
    ExperimentConfig,
    MechanismName,
    ResultRow,
)

logger = structlog.get_logger()

WORKLOAD_STREAM = 0
BASELINE_STREAM = 1
FUTURE_STREAM = 2


def derive_trial_seed(root_seed: int, trial: int) -> int:
    return root_seed ^ trial


def trial_dump_dir(dump_dir: Path, cell: CellConfig, trial: int) -> Path:
    return Path(dump_dir) / f"{cell.mechanism.value}_eps{cell.epsilon:g}_trial{trial}"


def expand_grid(config: ExperimentConfig, dataset_name: str) -> list[CellConfig]:
    """Cartesian product of the config's list-valued fields."""
    delta = config.delta if config.delta_mode == "explicit" else None
    gammas = config.gammas if config.distribution is not None else [0.0]
    shared = dict(
        dataset_name=dataset_name,
        delta=delta,
        r=config.r,
        k=config.k,
        n_prime=config.n_prime,
        optimizer=config.optimizer,
        selection=config.selection,
        distribution=config.distribution,
        num_future=config.num_future,
        trials=config.trials,
        root_seed=config.root_seed,
        batch_cap=config.batch_cap,
        filter_large=config.filter_large,
        log_progress=config.log_progress,
    )

    cells = []
    for mechanism in config.mechanisms:
        for epsilon in config.epsilons:
            for size in config.workload_sizes:
                for gamma in gammas:
                    if mechanism == MechanismName.RAP:
                        for rounds_T in config.rounds:
                            for per_round_K in config.per_round_k:
                                cells.append(
                                    CellConfig(
                                        mechanism=mechanism,
                                        epsilon=epsilon,
                                        workload_size=size,
                                        gamma=gamma,
                                        rounds_T=rounds_T,
                                        per_round_K=per_round_K,
                                        **shared,
                                    )
                                )
                    else:
                        cells.append(
                            CellConfig(mechanism=mechanism, epsilon=epsilon, workload_size=size, gamma=gamma, **shared)
                        )
    return cells


def _row_base(cell: CellConfig, trial: int, seed: int, delta: float) -> dict:
    is_rap = cell.mechanism == MechanismName.RAP
    has_future = cell.distribution is not None
    return dict(
        dataset=cell.dataset_name,
        mechanism=cell.mechanism.value,
        epsilon=cell.epsilon,
        delta=delta,
        rho=0.0,
        workload_size=cell.workload_size,
        num_queries=0,
        r=cell.r,
        k=cell.k,
        rounds_T=cell.rounds_T if is_rap else None,
        per_round_K=str(cell.per_round_K) if is_rap else None,
        n_prime=cell.n_prime if is_rap else None,
        selection=cell.selection.value if is_rap else None,
        distribution=cell.distribution.label() if has_future else None,
        gamma=cell.gamma if has_future else None,
        num_future=cell.num_future if has_future else None,
        filter_large=cell.filter_large,
        trial=trial,
        seed=seed,
    )


def _run_trial(
    cell: CellConfig,
    dataset: Dataset,
    trial: int,
    progress_rows: Optional[list[dict]],
    dump_dir: Optional[Path],
) -> ResultRow:
    seed = derive_trial_seed(cell.root_seed, trial)
    delta = cell.delta if cell.delta is not None else 1.0 / dataset.n**2
    base = _row_base(cell, trial, seed, delta)
    schema = dataset.schema

    try:
        params = DpParams(epsilon=cell.epsilon, delta=delta)
        base["rho"] = eps_delta_to_rho(params).rho

        workload_rng = derive_rng(seed, WORKLOAD_STREAM)
        future_spec = None
        if cell.distribution is None:
            # Only thresholds with at most n consistent queries are eligible
            max_queries = dataset.n if cell.filter_large else None
            workload = sample_uniform_workload(
                cell.r, cell.k, cell.workload_size, schema, workload_rng, max_queries=max_queries
            )
        else:
            historical = make_distribution(cell.distribution, schema.d)
            workload = sample_iid_workload(ThresholdDistributionSpec(historical, cell.r, cell.k), cell.workload_size, workload_rng)
            future = drift(historical, DriftParams(gamma=cell.gamma), workload_rng)
            future_spec = ThresholdDistributionSpec(future, cell.r, cell.k)

        base["num_queries"] = consistent_query_count(workload, schema)
        truth = true_answers(dataset, workload, cell.batch_cap)

        progress = None
        if cell.log_progress and cell.mechanism == MechanismName.RAP:
            future_workload = None
            if future_spec is not None:
                # Same stream and first draw as estimate_future_error below
                future_workload = sample_iid_workload(future_spec, cell.num_future, derive_rng(seed, FUTURE_STREAM))
            progress = TrainingProgressLogger(dataset, workload, truth, future_workload, cell.batch_cap)

        output: Optional[RapOutput] = None
        budget_total = 0.0
        start = time.perf_counter()
        if cell.mechanism == MechanismName.RAP:
            output = rap(dataset, workload, params, cell.rap_config(seed), on_iteration=progress)
            answers = output.answers
            budget_total = output.budget_ledger.total
        elif cell.mechanism == MechanismName.GM:
            ledger = BudgetLedger()
            answers = baseline_gm(dataset, workload, params, derive_rng(seed, BASELINE_STREAM), ledger, cell.batch_cap)
            budget_total = ledger.total
        else:
            answers = baseline_all_zero(workload, schema)
        runtime_ms = (time.perf_counter() - start) * 1000.0

        err_future = halfwidth = None
        if future_spec is not None:
            source = output if output is not None else AllZeroAnswerSource() if cell.mechanism == MechanismName.ALL_ZERO else None
            if source is not None:
                err_future, halfwidth = estimate_future_error(
                    source, dataset, future_spec, cell.num_future, derive_rng(seed, FUTURE_STREAM), cell.batch_cap
                )

        if progress_rows is not None:
            context = {key: base[key] for key in PROGRESS_COLUMNS if key in base}
            progress_rows.extend({**context, **record.model_dump()} for record in log_training_progress(progress))
        if dump_dir is not None and output is not None:
            ArtifactStore(trial_dump_dir(dump_dir, cell, trial)).save_rap_output(output, workload)

        row = ResultRow(
            **base,
            err_present=present_error(truth, answers),
            err_future=err_future,
            err_future_halfwidth=halfwidth,
            runtime_ms=runtime_ms,
            peak_query_buffer=peak_query_buffer(workload, schema, cell.batch_cap),
            budget_total=budget_total,
        )
        logger.info(
            "Trial completed",
            mechanism=row.mechanism,
            epsilon=row.epsilon,
            trial=trial,
            err_present=row.err_present,
            err_future=row.err_future,
            runtime_ms=round(runtime_ms, 1),
        )
        return row
    except Exception as e:
        logger.error("Trial failed", mechanism=cell.mechanism.value, trial=trial, error=str(e), exc_info=True)
        return ResultRow(**base, error=f"{type(e).__name__}: {e}")


def run_cell(
    cell: CellConfig,
    dataset: Dataset,
    progress_rows: Optional[list[dict]] = None,
    dump_dir: Optional[Union[str, Path]] = None,
) -> list[ResultRow]:
    """
    Run every trial of one cell.

    Args:
        cell: Fully instantiated configuration
        dataset: Sensitive dataset
        progress_rows: Receives per-iteration records when the cell logs progress
        dump_dir: Directory for RAP output dumps (one subdirectory per trial)

    Returns:
        One ResultRow per trial; failed trials carry the `error` column
    """
    dump_path = Path(dump_dir) if dump_dir is not None else None
    return [_run_trial(cell, dataset, trial, progress_rows, dump_path) for trial in range(cell.trials)]


def _run_cell_collect(cell: CellConfig, dataset: Dataset) -> tuple[list[ResultRow], list[dict]]:
    progress_rows: list[dict] = []
    return run_cell(cell, dataset, progress_rows), progress_rows


def load_experiment_dataset(config: ExperimentConfig) -> Dataset:
    schema = load_schema(config.schema_path) if config.schema_path else None
    return load_dataset(config.dataset_path, schema=schema, delimiter=config.delimiter)


def run_grid(
    config: ExperimentConfig,
    dataset: Optional[Dataset] = None,
    writer: Optional[ResultWriter] = None,
) -> Iterator[ResultRow]:
    """
    Run every cell of a grid, yielding rows as cells complete.

    With workers > 1 cells run in separate processes; rows and progress
    records are still written from this process only.
    """
    dataset = dataset or load_experiment_dataset(config)
    cells = expand_grid(config, dataset.name)
    progress_writer = CsvAppender(config.progress_path, PROGRESS_COLUMNS) if config.progress_path else None
    logger.info("Grid started", cells=len(cells), trials=config.trials, workers=config.workers)

    def emit(rows: list[ResultRow], progress: list[dict]) -> Iterator[ResultRow]:
        if writer is not None:
            writer.write(rows)
        if progress_writer is not None:
            progress_writer.append(progress)
        yield from rows

    if config.workers == 1:
        for cell in cells:
            yield from emit(*_run_cell_collect(cell, dataset))
        return

    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        futures = [pool.submit(_run_cell_collect, cell, dataset) for cell in cells]
        for future in as_completed(futures):
            yield from emit(*future.result())


def summarize_grid(rows: Sequence[ResultRow]) -> list[dict]:
    """
    Best (T, K) per (epsilon, |W|) by mean present error.

    Ties go to the smaller T, then the smaller K (ALL counts as largest).
    """
    frame = pd.DataFrame(
        [row.model_dump() for row in rows if row.mechanism == MechanismName.RAP.value and row.error is None]
    )
    if frame.empty:
        return []
    means = (
        frame.groupby(["epsilon", "workload_size", "rounds_T", "per_round_K"], as_index=False)
        .agg(mean_err_present=("err_present", "mean"), trials=("trial", "count"))
    )
    means["k_order"] = means["per_round_K"].map(lambda value: float("inf") if value == ALL else int(value))
    means = means.sort_values(["epsilon", "workload_size", "mean_err_present", "rounds_T", "k_order"])
    best = means.groupby(["epsilon", "workload_size"], as_index=False).head(1)
    return [
        {
            "epsilon": float(record["epsilon"]),
            "workload_size": int(record["workload_size"]),
            "rounds_T": int(record["rounds_T"]),
            "per_round_K": str(record["per_round_K"]),
            "mean_err_present": float(record["mean_err_present"]),
            "trials": int(record["trials"]),
        }
        for record in best.to_dict(orient="records")
    ]


def mean_errors_by_mechanism(rows: Sequence[ResultRow]) -> dict[str, float]:
    """Mean present error per mechanism over successful rows."""
    frame = pd.DataFrame([row.model_dump() for row in rows if row.error is None])
    if frame.empty:
        return {}
    return {str(name): float(value) for name, value in frame.groupby("mechanism")["err_present"].mean().items()}


def query_throughput(relaxed: RelaxedDataset, workload: Workload, batch_cap: int = 2**20) -> float:
    """Consistent queries evaluated per second on a synthetic dataset."""
    m = consistent_query_count(workload, relaxed.schema)
    start = time.perf_counter()
    workload_surrogate_answers(relaxed, workload, batch_cap)
    elapsed = time.perf_counter() - start
    return m / elapsed if elapsed > 0 else float("inf")
