"""
Training progress

Per-iteration records of the relaxed projection: loss, present error on the
run's workload and, when a future workload is fixed up front, future error.
"""

from typing import Optional

import structlog

from rap_engine.engine.dataset import Dataset, RelaxedDataset
from rap_engine.engine.generalization import SyntheticAnswerSource, future_error_on_workload
from rap_engine.engine.mechanism import present_error
from rap_engine.engine.surrogate import workload_surrogate_answers
from rap_engine.engine.workload import AnswerVector, Workload
from rap_engine.utils.types import ProgressRecord

logger = structlog.get_logger()

PROGRESS_COLUMNS = ["dataset", "mechanism", "epsilon", "trial", "seed", "rounds_T", "per_round_K"] + list(
    ProgressRecord.model_fields
)


class TrainingProgressLogger:
    """Iteration callback for rap() that records ProgressRecords."""

    def __init__(
        self,
        dataset: Dataset,
        workload: Workload,
        truth: AnswerVector,
        future_workload: Optional[Workload] = None,
        batch_cap: int = 2**20,
    ):
        self.dataset = dataset
        self.workload = workload
        self.truth = truth
        self.future_workload = future_workload
        self.batch_cap = batch_cap
        self.records: list[ProgressRecord] = []

    def __call__(self, round_index: int, iteration: int, loss: float, best_loss: float, current: RelaxedDataset) -> None:
        answers = workload_surrogate_answers(current, self.workload, self.batch_cap).clamped()
        err_future = None
        if self.future_workload is not None:
            err_future = future_error_on_workload(
                SyntheticAnswerSource(current), self.dataset, self.future_workload, self.batch_cap
            ).mean
        self.records.append(
            ProgressRecord(
                round=round_index,
                iteration=iteration,
                loss=loss,
                best_loss=best_loss,
                err_present=present_error(self.truth, answers),
                err_future=err_future,
            )
        )


def log_training_progress(handle: Optional[TrainingProgressLogger]) -> list[ProgressRecord]:
    """Records of a run; empty when progress logging was disabled."""
    if handle is None:
        return []
    return list(handle.records)
