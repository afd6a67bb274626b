"""
Type definitions for mechanisms and experiments
"""

import math
from enum import Enum
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ALL = "ALL"
PerRoundK = Union[int, Literal["ALL"]]


class SelectionMode(str, Enum):
    """Query selection subroutine used by adaptive rounds."""

    ITERATIVE = "iterative"
    ONESHOT = "oneshot"


class DistributionKind(str, Enum):
    """Feature distribution families for the partial-knowledge setting."""

    UNIFORM = "uniform"
    ZIPF = "zipf"
    GEOMETRIC = "geometric"


class MechanismName(str, Enum):
    """Mechanisms the harness can run."""

    RAP = "rap"
    ALL_ZERO = "all_zero"
    GM = "gm"


class DpParams(BaseModel):
    """Approximate differential privacy parameters."""

    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(gt=0, allow_inf_nan=False)
    delta: float = Field(gt=0, lt=1, allow_inf_nan=False)


class ZcdpBudget(BaseModel):
    """Zero-concentrated differential privacy budget."""

    model_config = ConfigDict(frozen=True)

    rho: float = Field(gt=0)

    def split(self, parts: int) -> "ZcdpBudget":
        """Budget of one of `parts` equal shares."""
        return ZcdpBudget(rho=self.rho / parts)


class OptimizerConfig(BaseModel):
    """Adaptive-moment optimizer settings for relaxed projection."""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=0.05, gt=0)
    max_iterations: int = Field(default=1000, ge=1)
    stop_tolerance: float = Field(default=1e-7, ge=0)
    patience: int = Field(default=50, ge=1)
    moment_decay_1: float = Field(default=0.9, gt=0, lt=1)
    moment_decay_2: float = Field(default=0.999, gt=0, lt=1)
    epsilon_stabilizer: float = Field(default=1e-8, gt=0)


class RapConfig(BaseModel):
    """Adaptivity and optimization settings for one RAP run."""

    model_config = ConfigDict(frozen=True)

    rounds_T: int = Field(default=1, ge=1)
    per_round_K: PerRoundK = ALL
    n_prime: int = Field(default=1000, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    selection: SelectionMode = SelectionMode.ONESHOT
    seed: int = 0
    batch_cap: int = Field(default=2**20, ge=1)

    @field_validator("per_round_K")
    @classmethod
    def _positive_k(cls, value: PerRoundK) -> PerRoundK:
        if value != ALL and value < 1:
            raise ValueError("per_round_K must be >= 1 or ALL")
        return value

    @model_validator(mode="after")
    def _all_only_non_adaptive(self) -> "RapConfig":
        if self.per_round_K == ALL and self.rounds_T != 1:
            raise ValueError("per_round_K=ALL is only legal with rounds_T=1")
        return self

    @property
    def adaptive(self) -> bool:
        return self.per_round_K != ALL


class DriftParams(BaseModel):
    """Amount of drift between historical and future feature distributions."""

    model_config = ConfigDict(frozen=True)

    gamma: float = Field(default=0.0, ge=0, le=1)


class DistributionSpec(BaseModel):
    """Feature distribution family and its parameter."""

    model_config = ConfigDict(frozen=True)

    kind: DistributionKind = DistributionKind.UNIFORM
    zipf_s: float = Field(default=1.0, gt=0)
    geometric_p: float = Field(default=0.5, gt=0, lt=1)

    def label(self) -> str:
        if self.kind == DistributionKind.ZIPF:
            return f"zipf({self.zipf_s:g})"
        if self.kind == DistributionKind.GEOMETRIC:
            return f"geometric({self.geometric_p:g})"
        return "uniform"


class CellConfig(BaseModel):
    """One fully instantiated point of an experiment grid."""

    model_config = ConfigDict(frozen=True)

    dataset_name: str
    mechanism: MechanismName = MechanismName.RAP
    epsilon: float = Field(gt=0)
    delta: Optional[float] = Field(default=None, gt=0, lt=1)
    workload_size: int = Field(ge=1)
    r: int = Field(ge=1)
    k: int = Field(ge=1)
    rounds_T: Optional[int] = Field(default=None, ge=1)
    per_round_K: Optional[PerRoundK] = None
    n_prime: int = Field(default=1000, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    selection: SelectionMode = SelectionMode.ONESHOT
    distribution: Optional[DistributionSpec] = None
    gamma: float = Field(default=0.0, ge=0, le=1)
    num_future: int = Field(default=100, ge=2)
    trials: int = Field(default=5, ge=1)
    root_seed: int = Field(default=0, ge=0)
    batch_cap: int = Field(default=2**20, ge=1)
    filter_large: bool = False
    log_progress: bool = False

    @model_validator(mode="after")
    def _check_rap_fields(self) -> "CellConfig":
        if self.r > self.k:
            raise ValueError("r must not exceed k")
        if self.filter_large and self.distribution is not None:
            raise ValueError("filter_large applies to uniformly sampled workloads only")
        if self.mechanism == MechanismName.RAP:
            if self.rounds_T is None or self.per_round_K is None:
                raise ValueError("RAP cells need rounds_T and per_round_K")
            if self.per_round_K == ALL and self.rounds_T != 1:
                raise ValueError("per_round_K=ALL is only legal with rounds_T=1")
        return self

    def rap_config(self, seed: int) -> RapConfig:
        return RapConfig(
            rounds_T=self.rounds_T or 1,
            per_round_K=self.per_round_K if self.per_round_K is not None else ALL,
            n_prime=self.n_prime,
            optimizer=self.optimizer,
            selection=self.selection,
            seed=seed,
            batch_cap=self.batch_cap,
        )


class ExperimentConfig(BaseModel):
    """Experiment grid definition; list-valued fields expand to cells."""

    dataset_path: str
    schema_path: Optional[str] = None
    delimiter: str = ","
    epsilons: list[float] = Field(min_length=1)
    delta_mode: Literal["auto_n_squared", "explicit"] = "auto_n_squared"
    delta: Optional[float] = Field(default=None, gt=0, lt=1)
    workload_sizes: list[int] = Field(min_length=1)
    r: int = Field(default=3, ge=1)
    k: int = Field(default=3, ge=1)
    rounds: list[int] = Field(default_factory=lambda: [1], min_length=1)
    per_round_k: list[PerRoundK] = Field(default_factory=lambda: [ALL], min_length=1)
    n_prime: int = Field(default=1000, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    selection: SelectionMode = SelectionMode.ONESHOT
    mechanisms: list[MechanismName] = Field(default_factory=lambda: [MechanismName.RAP], min_length=1)
    distribution: Optional[DistributionSpec] = None
    gammas: list[float] = Field(default_factory=lambda: [0.0], min_length=1)
    num_future: int = Field(default=100, ge=2)
    trials: int = Field(default=5, ge=1)
    root_seed: int = Field(default=0, ge=0)
    batch_cap: int = Field(default=2**20, ge=1)
    filter_large: bool = False
    log_progress: bool = False
    results_path: str = "results/results.csv"
    progress_path: Optional[str] = None
    workers: int = Field(default=1, ge=1)

    @field_validator("epsilons")
    @classmethod
    def _positive_epsilons(cls, values: list[float]) -> list[float]:
        if any(not math.isfinite(v) or v <= 0 for v in values):
            raise ValueError("every epsilon must be a positive finite number")
        return values

    @field_validator("gammas")
    @classmethod
    def _gammas_in_range(cls, values: list[float]) -> list[float]:
        if any(v < 0 or v > 1 for v in values):
            raise ValueError("every gamma must lie in [0, 1]")
        return values

    @model_validator(mode="after")
    def _check_grid(self) -> "ExperimentConfig":
        if self.r > self.k:
            raise ValueError("r must not exceed k")
        if self.delta_mode == "explicit" and self.delta is None:
            raise ValueError("delta_mode=explicit requires delta")
        if self.filter_large and self.distribution is not None:
            raise ValueError("filter_large applies to uniformly sampled workloads only")
        if MechanismName.RAP in self.mechanisms and ALL in self.per_round_k and any(t > 1 for t in self.rounds):
            raise ValueError("grid pairs per_round_K=ALL with rounds_T > 1")
        return self


class ResultRow(BaseModel):
    """One self-describing result line; field order is the CSV column order."""

    dataset: str
    mechanism: str
    epsilon: float
    delta: float
    rho: float
    workload_size: int
    num_queries: int
    r: int
    k: int
    rounds_T: Optional[int] = None
    per_round_K: Optional[str] = None
    n_prime: Optional[int] = None
    selection: Optional[str] = None
    distribution: Optional[str] = None
    gamma: Optional[float] = None
    num_future: Optional[int] = None
    filter_large: bool = False
    trial: int
    seed: int
    err_present: Optional[float] = None
    err_future: Optional[float] = None
    err_future_halfwidth: Optional[float] = None
    runtime_ms: Optional[float] = None
    peak_query_buffer: int = 0
    budget_total: float = 0.0
    error: Optional[str] = None


class ProgressRecord(BaseModel):
    """Training progress after one relaxed-projection iteration."""

    round: int
    iteration: int
    loss: float
    best_loss: float
    err_present: float
    err_future: Optional[float] = None
