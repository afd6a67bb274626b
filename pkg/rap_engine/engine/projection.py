"""
Relaxed Projection

Fits a relaxed synthetic dataset to noisy query answers: Adam updates on the
squared-error loss, with every feature block of every row projected back onto
the probability simplex (sparsemax) after each update.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import structlog

from rap_engine.engine.dataset import RelaxedDataset
from rap_engine.engine.surrogate import PolyThresholdSpec, QueryBatch, as_query_batch, loss_and_gradient
from rap_engine.exceptions import ProjectionDivergedError, ProjectionError
from rap_engine.utils.types import OptimizerConfig

logger = structlog.get_logger()

# Loss at which the fit is exact up to float noise
LOSS_FLOOR = 1e-24

IterationCallback = Callable[[int, float, float, RelaxedDataset], None]


def sparsemax_rows(Z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of Z onto the probability simplex."""
    Z = np.asarray(Z, dtype=np.float64)
    if not np.isfinite(Z).all():
        raise ProjectionError("sparsemax input must be finite")
    width = Z.shape[1]
    U = np.sort(Z, axis=1)[:, ::-1]
    cssv = np.cumsum(U, axis=1) - 1.0
    support = np.count_nonzero(U - cssv / np.arange(1, width + 1) > 0, axis=1)
    tau = cssv[np.arange(Z.shape[0]), support - 1] / support
    return np.maximum(Z - tau[:, None], 0.0)


def sparsemax(z: Sequence[float]) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ProjectionError("sparsemax expects a non-empty vector")
    return sparsemax_rows(z[None, :])[0]


def _project_in_place(values: np.ndarray, relaxed: RelaxedDataset) -> None:
    schema = relaxed.schema
    by_width: dict[int, list[int]] = {}
    for feature, t in enumerate(schema.cardinalities):
        by_width.setdefault(t, []).append(schema.block_offsets[feature])
    for t, starts in by_width.items():
        columns = np.asarray(starts)[:, None] + np.arange(t)[None, :]
        blocks = values[:, columns]
        values[:, columns] = sparsemax_rows(blocks.reshape(-1, t)).reshape(blocks.shape)


def project_rows(relaxed: RelaxedDataset) -> RelaxedDataset:
    """Sparsemax every feature block of every row."""
    projected = relaxed.copy()
    _project_in_place(projected.values, projected)
    return projected


class AdamOptimizer:
    """Adaptive moment estimation on a single parameter matrix."""

    def __init__(self, config: OptimizerConfig):
        self.lr = config.learning_rate
        self.beta1 = config.moment_decay_1
        self.beta2 = config.moment_decay_2
        self.epsilon = config.epsilon_stabilizer
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """Update params in place."""
        if self.m is None or self.v is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1

        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t

        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)

        params -= (self.lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.epsilon)


@dataclass
class ProjectionResult:
    synthetic: RelaxedDataset
    best_loss: float
    iterations: int
    losses: list[float] = field(default_factory=list)


def run_relaxed_projection(
    relaxed: RelaxedDataset,
    queries: Union[QueryBatch, Sequence[PolyThresholdSpec]],
    targets: np.ndarray,
    config: OptimizerConfig,
    on_iteration: Optional[IterationCallback] = None,
    spec_batch: int = 2048,
) -> ProjectionResult:
    """
    Minimize the squared error between surrogate answers and targets.

    Stops after config.max_iterations updates, when the loss reaches the float
    floor, or when the best loss has not improved by more than
    config.stop_tolerance for config.patience consecutive iterations.

    Args:
        relaxed: Starting point (not modified)
        queries: Selected surrogate queries
        targets: Noisy answers, one per query
        config: Optimizer settings
        on_iteration: Called with (iteration, loss, best_loss, current iterate)
        spec_batch: Queries evaluated together per gradient chunk

    Returns:
        ProjectionResult holding the lowest-loss iterate
    """
    batch = as_query_batch(queries)
    targets = np.asarray(targets, dtype=np.float64)
    if len(batch) == 0 or len(batch) != targets.shape[0]:
        raise ProjectionError("Need matching, non-empty queries and targets", {"queries": len(batch), "targets": targets.shape[0]})

    current = RelaxedDataset(relaxed.schema, relaxed.values.copy())
    optimizer = AdamOptimizer(config)
    best_loss = np.inf
    best_values = current.values.copy()
    stale = 0
    losses: list[float] = []
    iteration = 0

    def evaluate() -> tuple[float, np.ndarray]:
        loss, grad = loss_and_gradient(current, batch, targets, spec_batch)
        if not np.isfinite(loss):
            raise ProjectionDivergedError("Projection loss is not finite", {"iteration": iteration, "loss": loss})
        return loss, grad

    while True:
        loss, grad = evaluate()
        if loss < best_loss:
            stale = 0 if best_loss - loss > config.stop_tolerance else stale + 1
            best_loss = loss
            best_values = current.values.copy()
        else:
            stale += 1
        if iteration > 0:
            losses.append(loss)
            if on_iteration is not None:
                on_iteration(iteration, loss, best_loss, current)

        if loss <= LOSS_FLOOR or stale >= config.patience or iteration >= config.max_iterations:
            break

        iteration += 1
        optimizer.step(current.values, grad)
        _project_in_place(current.values, current)

    logger.debug("Projection finished", iterations=iteration, best_loss=best_loss, queries=len(batch))
    return ProjectionResult(RelaxedDataset(relaxed.schema, best_values), float(best_loss), iteration, losses)


def relaxed_projection(
    relaxed: RelaxedDataset,
    queries: Union[QueryBatch, Sequence[PolyThresholdSpec]],
    targets: np.ndarray,
    config: OptimizerConfig,
) -> RelaxedDataset:
    return run_relaxed_projection(relaxed, queries, targets, config).synthetic
