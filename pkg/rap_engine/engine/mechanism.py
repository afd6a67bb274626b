"""
RAP Mechanism

End-to-end Relaxed Adaptive Projection (non-adaptive and adaptive), adaptive
query selection (iterative and oneshot), the All-0 and Gaussian baselines and
present-error measurement.

Budget split: rho over rounds; within a round, rho'/2 for selection and
rho'/2 for measurement, each spread over the K picks.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional

import numpy as np
import structlog

from rap_engine.engine.dataset import Dataset, RelaxedDataset, Schema, init_relaxed
from rap_engine.engine.privacy import (
    GAUSSIAN,
    ONESHOT_TOP_K,
    REPORT_NOISY_MAX,
    BudgetLedger,
    ErrorGapVector,
    eps_delta_to_rho,
    gaussian_mechanism,
    mechanism_scope,
    oneshot_top_k,
    oneshot_top_k_stream,
    report_noisy_max,
)
from rap_engine.engine.projection import project_rows, run_relaxed_projection
from rap_engine.engine.surrogate import (
    PolyThresholdSpec,
    QueryBatch,
    chunk_surrogate_answers,
    spec_for_query,
    workload_surrogate_answers,
)
from rap_engine.engine.workload import (
    AnswerVector,
    Workload,
    chunk_match_counts,
    consistent_query_count,
    iter_true_answers,
    iter_workload_chunks,
    query_at,
    threshold_starts,
    true_answers,
    true_answers_at,
)
from rap_engine.exceptions import ConfigurationError, WorkloadError
from rap_engine.utils.types import ALL, DpParams, RapConfig, SelectionMode, ZcdpBudget

logger = structlog.get_logger()

# (round, iteration, loss, best_loss, current iterate)
ProgressCallback = Callable[[int, int, float, float, RelaxedDataset], None]


@dataclass
class SelectedQueries:
    """Selected queries in selection order, with their retained noisy answers."""

    entries: "OrderedDict[int, tuple[PolyThresholdSpec, float]]" = field(default_factory=OrderedDict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, index: int) -> bool:
        return index in self.entries

    def with_added(self, additions: Mapping[int, tuple[PolyThresholdSpec, float]]) -> "SelectedQueries":
        overlap = [i for i in additions if i in self.entries]
        if overlap:
            raise WorkloadError("Query selected twice", {"indices": overlap})
        merged = OrderedDict(self.entries)
        merged.update(additions)
        return SelectedQueries(merged)

    @property
    def indices(self) -> np.ndarray:
        return np.fromiter(self.entries.keys(), dtype=np.int64, count=len(self.entries))

    @property
    def specs(self) -> list[PolyThresholdSpec]:
        return [spec for spec, _ in self.entries.values()]

    @property
    def noisy_answers(self) -> np.ndarray:
        return np.fromiter((answer for _, answer in self.entries.values()), dtype=np.float64, count=len(self.entries))


@dataclass
class RapOutput:
    synthetic: RelaxedDataset
    answers: AnswerVector
    budget_ledger: BudgetLedger
    rho: float
    selected: Optional[SelectedQueries] = None
    rounds_run: int = 1
    iterations: int = 0


# ========== Gap computation ==========


def iter_error_gaps(
    dataset: Dataset, relaxed: RelaxedDataset, workload: Workload, exclude: np.ndarray, batch_cap: int
) -> Iterator[ErrorGapVector]:
    """|true - surrogate| per unselected query, one chunk at a time."""
    exclude = np.sort(np.asarray(exclude, dtype=np.int64))
    current = -1
    columns = None
    for position, threshold, chunk, start in iter_workload_chunks(workload, dataset.schema, batch_cap):
        if position != current:
            columns = dataset.records[:, threshold.features]
            current = position
        truth = chunk_match_counts(columns, threshold, chunk).reshape(-1) / dataset.n
        gaps = np.abs(truth - chunk_surrogate_answers(relaxed, threshold, chunk))
        indices = np.arange(start, start + chunk.size, dtype=np.int64)
        keep = ~np.isin(indices, exclude, assume_unique=True)
        yield ErrorGapVector(gaps[keep], indices[keep])


def select_from_gaps(
    gaps: ErrorGapVector,
    K: int,
    n: int,
    round_budget: ZcdpBudget,
    mode: SelectionMode,
    rng: np.random.Generator,
    ledger: Optional[BudgetLedger] = None,
) -> list[int]:
    """
    Pick min(K, |gaps|) distinct indices from an in-memory gap vector.

    Each pick costs rho'/(2K): iterative mode runs one report-noisy-max per
    pick, oneshot mode one top-K draw charged for all picks together.
    """
    picks = min(K, len(gaps))
    rho_pick = round_budget.rho / (2 * K)
    if mode == SelectionMode.ITERATIVE:
        chosen = []
        remaining = gaps
        for _ in range(picks):
            index = report_noisy_max(remaining, n, ZcdpBudget(rho=rho_pick), rng)
            chosen.append(index)
            remaining = remaining.without(index)
            if ledger is not None:
                ledger.charge(REPORT_NOISY_MAX, rho_pick)
        return chosen

    chosen = [int(i) for i in oneshot_top_k(gaps, picks, n, ZcdpBudget(rho=rho_pick * picks), rng)]
    if ledger is not None:
        ledger.charge(ONESHOT_TOP_K, rho_pick * picks)
    return chosen


def adaptive_select(
    dataset: Dataset,
    relaxed: RelaxedDataset,
    workload: Workload,
    selected: SelectedQueries,
    K: int,
    round_budget: ZcdpBudget,
    mode: SelectionMode,
    rng: np.random.Generator,
    ledger: Optional[BudgetLedger] = None,
    batch_cap: int = 2**20,
) -> SelectedQueries:
    """
    One round of query selection plus Gaussian measurement of the picks.

    K is capped at the number of unselected queries; selection budget left
    over by the cap goes to the measurements so the round spends exactly rho'.
    """
    schema = dataset.schema
    m = consistent_query_count(workload, schema)
    remaining = m - len(selected)
    if remaining < 1:
        raise WorkloadError("No unselected queries remain", {"m": m, "selected": len(selected)})

    picks = min(K, remaining)
    rho_pick = round_budget.rho / (2 * K)
    exclude = selected.indices

    if mode == SelectionMode.ITERATIVE:
        with mechanism_scope(REPORT_NOISY_MAX):
            gaps = ErrorGapVector.concatenate(iter_error_gaps(dataset, relaxed, workload, exclude, batch_cap))
        chosen = select_from_gaps(gaps, K, dataset.n, round_budget, mode, rng, ledger)
    else:
        with mechanism_scope(ONESHOT_TOP_K):
            chunks = iter_error_gaps(dataset, relaxed, workload, exclude, batch_cap)
            chosen = [int(i) for i in oneshot_top_k_stream(chunks, picks, dataset.n, ZcdpBudget(rho=rho_pick * picks), rng)]
        if ledger is not None:
            ledger.charge(ONESHOT_TOP_K, rho_pick * picks)

    measure_rho = (round_budget.rho - rho_pick * picks) / picks
    with mechanism_scope(GAUSSIAN):
        truth = true_answers_at(dataset, workload, chosen)
    noisy = gaussian_mechanism(truth, dataset.n, ZcdpBudget(rho=measure_rho), rng)
    if ledger is not None:
        ledger.charge(GAUSSIAN, measure_rho, count=picks)

    starts = threshold_starts(workload, schema)
    additions = OrderedDict(
        (index, (spec_for_query(query_at(workload, schema, index, starts), schema), float(answer)))
        for index, answer in zip(chosen, noisy)
    )
    return selected.with_added(additions)


# ========== RAP ==========


def _rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(noise_seq)


def rap(
    dataset: Dataset,
    workload: Workload,
    params: DpParams,
    config: RapConfig,
    on_iteration: Optional[ProgressCallback] = None,
) -> RapOutput:
    """
    Relaxed Adaptive Projection.

    Args:
        dataset: Sensitive dataset
        workload: Thresholds whose consistent queries are answered
        params: (epsilon, delta) target
        config: Rounds, picks per round, synthetic size, optimizer and seed
        on_iteration: Per-iteration progress hook (round, iteration, loss, best_loss, iterate)

    Returns:
        RapOutput with the synthetic dataset, clamped answers and the budget ledger
    """
    schema = dataset.schema
    try:
        workload.validate_for(schema)
    except WorkloadError as e:
        raise ConfigurationError("Workload does not match dataset schema", {"error": e.message}) from e
    if config.per_round_K == ALL and config.rounds_T != 1:
        raise ConfigurationError("per_round_K=ALL is only legal with rounds_T=1")

    m = consistent_query_count(workload, schema)
    budget = eps_delta_to_rho(params)
    init_rng, noise_rng = _rng_streams(config.seed)
    relaxed = project_rows(init_relaxed(config.n_prime, schema, init_rng))
    ledger = BudgetLedger()
    selected: Optional[SelectedQueries] = None
    iterations = 0

    logger.info(
        "RAP started",
        m=m,
        thresholds=len(workload),
        rho=budget.rho,
        rounds_T=config.rounds_T,
        per_round_K=config.per_round_K,
        selection=config.selection.value,
    )

    def hook(round_index: int) -> Optional[Callable[[int, float, float, RelaxedDataset], None]]:
        if on_iteration is None:
            return None
        return lambda it, loss, best, current: on_iteration(round_index, it, loss, best, current)

    if not config.adaptive:
        per_query = budget.split(m)
        with mechanism_scope(GAUSSIAN):
            truth = true_answers(dataset, workload, config.batch_cap).values
        noisy = gaussian_mechanism(truth, dataset.n, per_query, noise_rng)
        ledger.charge(GAUSSIAN, per_query.rho, count=m)

        result = run_relaxed_projection(
            relaxed, QueryBatch.from_workload(workload, schema), noisy, config.optimizer, on_iteration=hook(1)
        )
        relaxed = result.synthetic
        iterations = result.iterations
        rounds = 1
    else:
        K = int(config.per_round_K)
        rounds = min(config.rounds_T, math.ceil(m / K))
        if rounds < config.rounds_T:
            logger.warning("Rounds capped by workload size", requested=config.rounds_T, rounds=rounds, m=m, K=K)
        round_budget = budget.split(rounds)
        selected = SelectedQueries()

        for round_index in range(1, rounds + 1):
            selected = adaptive_select(
                dataset,
                relaxed,
                workload,
                selected,
                K,
                round_budget,
                config.selection,
                noise_rng,
                ledger=ledger,
                batch_cap=config.batch_cap,
            )
            result = run_relaxed_projection(
                relaxed,
                QueryBatch.from_specs(selected.specs),
                selected.noisy_answers,
                config.optimizer,
                on_iteration=hook(round_index),
            )
            relaxed = result.synthetic
            iterations += result.iterations
            logger.info("Round completed", round=round_index, selected=len(selected), best_loss=result.best_loss)

    ledger.assert_composes_to(budget.rho)
    answers = workload_surrogate_answers(relaxed, workload, config.batch_cap).clamped()
    logger.info("RAP finished", rounds=rounds, iterations=iterations, ledger_total=ledger.total)
    return RapOutput(
        synthetic=relaxed,
        answers=answers,
        budget_ledger=ledger,
        rho=budget.rho,
        selected=selected,
        rounds_run=rounds,
        iterations=iterations,
    )


# ========== Baselines ==========


def baseline_all_zero(workload: Workload, schema: Schema) -> AnswerVector:
    return AnswerVector(np.zeros(consistent_query_count(workload, schema)))


def baseline_gm(
    dataset: Dataset,
    workload: Workload,
    params: DpParams,
    rng: np.random.Generator,
    ledger: Optional[BudgetLedger] = None,
    batch_cap: int = 2**20,
) -> AnswerVector:
    """Gaussian noise on every consistent query at rho/m each, clamped for reporting."""
    m = consistent_query_count(workload, dataset.schema)
    per_query = eps_delta_to_rho(params).split(m)
    values = np.empty(m)
    with mechanism_scope(GAUSSIAN):
        for start, truth in iter_true_answers(dataset, workload, batch_cap):
            values[start : start + truth.size] = gaussian_mechanism(truth, dataset.n, per_query, rng)
    if ledger is not None:
        ledger.charge(GAUSSIAN, per_query.rho, count=m)
    return AnswerVector(np.clip(values, 0.0, 1.0))


def present_error(true_values: AnswerVector, mechanism_values: AnswerVector) -> float:
    """l-infinity distance between true and mechanism answers."""
    a = np.asarray(getattr(true_values, "values", true_values), dtype=np.float64)
    b = np.asarray(getattr(mechanism_values, "values", mechanism_values), dtype=np.float64)
    if a.shape != b.shape:
        raise WorkloadError("Answer vectors differ in length", {"true": a.shape[0], "mechanism": b.shape[0]})
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))
