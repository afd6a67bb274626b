"""
Privacy Mechanisms

zCDP budget arithmetic, (epsilon, delta) conversion, Gaussian noise, Gumbel
report-noisy-max and oneshot top-K selection, plus run-scoped bookkeeping:
a budget ledger and a marker for which mechanism is reading the dataset.
"""

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

import numpy as np
import structlog

from rap_engine.exceptions import BudgetAccountingError, PrivacyError, SensitiveAccessError
from rap_engine.utils.types import DpParams, ZcdpBudget

logger = structlog.get_logger()

GAUSSIAN = "gaussian"
REPORT_NOISY_MAX = "report_noisy_max"
ONESHOT_TOP_K = "oneshot_top_k"

_TINY = np.finfo(np.float64).tiny


# ========== Conversion ==========


def eps_delta_to_rho(params: DpParams) -> ZcdpBudget:
    """
    Largest rho whose zCDP guarantee implies (epsilon, delta)-DP.

    Evaluated as (eps / (sqrt(eps + L) + sqrt(L)))^2 with L = log(1/delta),
    which equals eps + 2(L - sqrt(L(eps + L))) without cancellation.
    """
    eps, delta = params.epsilon, params.delta
    if not (math.isfinite(eps) and math.isfinite(delta)):
        raise PrivacyError("Non-finite privacy parameters", {"epsilon": eps, "delta": delta})
    log_inv_delta = -math.log(delta)
    rho = (eps / (math.sqrt(eps + log_inv_delta) + math.sqrt(log_inv_delta))) ** 2
    return ZcdpBudget(rho=rho)


def rho_to_eps(budget: ZcdpBudget, delta: float) -> float:
    if not 0 < delta < 1:
        raise PrivacyError("delta must lie in (0, 1)", {"delta": delta})
    return budget.rho + 2.0 * math.sqrt(budget.rho * -math.log(delta))


# ========== Noise ==========


def gaussian_sigma(n: int, budget: ZcdpBudget) -> float:
    """Standard deviation of the Gaussian mechanism for a 1/n-sensitive query."""
    if n < 1:
        raise PrivacyError("Dataset size must be at least 1", {"n": n})
    return math.sqrt(1.0 / (2.0 * n * n * budget.rho))


def gaussian_mechanism(
    true_value: Union[float, np.ndarray], n: int, budget: ZcdpBudget, rng: np.random.Generator
) -> Union[float, np.ndarray]:
    """Add N(0, 1/(2 n^2 rho)) noise to each value; the output is not clamped."""
    sigma = gaussian_sigma(n, budget)
    if np.isscalar(true_value):
        return float(true_value) + float(rng.normal(0.0, sigma))
    values = np.asarray(true_value, dtype=np.float64)
    return values + rng.normal(0.0, sigma, size=values.shape)


def gumbel_from_uniform(u: Union[float, np.ndarray], scale: float) -> Union[float, np.ndarray]:
    """Inverse Gumbel CDF."""
    return -scale * np.log(-np.log(u))


def gumbel_noise(scale: float, size: int, rng: np.random.Generator) -> np.ndarray:
    if scale <= 0:
        raise PrivacyError("Gumbel scale must be positive", {"scale": scale})
    # random() is in [0, 1); lift 0 so both ends stay finite
    u = np.maximum(rng.random(size), _TINY)
    return gumbel_from_uniform(u, scale)


def gumbel_sample(scale: float, rng: np.random.Generator) -> float:
    return float(gumbel_noise(scale, 1, rng)[0])


def rnm_scale(n: int, budget: ZcdpBudget) -> float:
    return 1.0 / math.sqrt(2.0 * budget.rho * n * n)


def top_k_scale(k: int, n: int, budget: ZcdpBudget) -> float:
    return math.sqrt(k / (2.0 * budget.rho * n * n))


# ========== Selection ==========


@dataclass
class ErrorGapVector:
    """Absolute errors of unselected queries with their global indices."""

    gaps: np.ndarray
    indices: np.ndarray

    def __post_init__(self) -> None:
        self.gaps = np.asarray(self.gaps, dtype=np.float64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.gaps.shape != self.indices.shape or self.gaps.ndim != 1:
            raise PrivacyError("Gaps and indices differ in shape")
        if (self.gaps < 0).any():
            raise PrivacyError("Gaps must be non-negative")

    def __len__(self) -> int:
        return int(self.gaps.shape[0])

    def without(self, index: int) -> "ErrorGapVector":
        keep = self.indices != index
        return ErrorGapVector(self.gaps[keep], self.indices[keep])

    @classmethod
    def concatenate(cls, parts: Iterable["ErrorGapVector"]) -> "ErrorGapVector":
        parts = list(parts)
        if not parts:
            return cls(np.empty(0), np.empty(0, dtype=np.int64))
        return cls(np.concatenate([p.gaps for p in parts]), np.concatenate([p.indices for p in parts]))


def _ranked(noisy: np.ndarray, indices: np.ndarray, count: int) -> np.ndarray:
    """Positions of the `count` largest noisy values; ties go to the lower index."""
    order = np.lexsort((indices, -noisy))
    return order[:count]


def report_noisy_max(gaps: ErrorGapVector, n: int, budget: ZcdpBudget, rng: np.random.Generator) -> int:
    """Index of the largest gap after Gumbel(1/sqrt(2 rho n^2)) noise."""
    if len(gaps) == 0:
        raise PrivacyError("report_noisy_max needs at least one gap")
    noisy = gaps.gaps + gumbel_noise(rnm_scale(n, budget), len(gaps), rng)
    return int(gaps.indices[_ranked(noisy, gaps.indices, 1)[0]])


def oneshot_top_k(gaps: ErrorGapVector, K: int, n: int, budget: ZcdpBudget, rng: np.random.Generator) -> np.ndarray:
    """
    Indices of the K largest gaps after one Gumbel draw each.

    `budget` covers the whole selection; noise scale is sqrt(K / (2 rho n^2)).
    """
    if not 1 <= K <= len(gaps):
        raise PrivacyError("K must lie in [1, number of gaps]", {"K": K, "gaps": len(gaps)})
    noisy = gaps.gaps + gumbel_noise(top_k_scale(K, n, budget), len(gaps), rng)
    return gaps.indices[_ranked(noisy, gaps.indices, K)]


def oneshot_top_k_stream(
    chunks: Iterable[ErrorGapVector], K: int, n: int, budget: ZcdpBudget, rng: np.random.Generator
) -> np.ndarray:
    """oneshot_top_k over gap chunks, holding at most K candidates between chunks."""
    if K < 1:
        raise PrivacyError("K must be at least 1", {"K": K})
    scale = top_k_scale(K, n, budget)
    best_noisy = np.empty(0)
    best_indices = np.empty(0, dtype=np.int64)
    total = 0
    for chunk in chunks:
        if len(chunk) == 0:
            continue
        total += len(chunk)
        noisy = np.concatenate([best_noisy, chunk.gaps + gumbel_noise(scale, len(chunk), rng)])
        indices = np.concatenate([best_indices, chunk.indices])
        keep = _ranked(noisy, indices, K)
        best_noisy, best_indices = noisy[keep], indices[keep]
    if total < K:
        raise PrivacyError("K must lie in [1, number of gaps]", {"K": K, "gaps": total})
    return best_indices


# ========== Bookkeeping ==========


@dataclass(frozen=True)
class LedgerEntry:
    mechanism: str
    rho: float
    count: int = 1

    @property
    def total(self) -> float:
        return self.rho * self.count


@dataclass
class BudgetLedger:
    """Every rho consumed during one run."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def charge(self, mechanism: str, rho: float, count: int = 1) -> None:
        if rho < 0 or count < 0:
            raise BudgetAccountingError("Negative budget charge", {"mechanism": mechanism, "rho": rho, "count": count})
        if count == 0:
            return
        self.entries.append(LedgerEntry(mechanism, rho, count))
        logger.debug("Budget charged", mechanism=mechanism, rho=rho, count=count)

    @property
    def total(self) -> float:
        return math.fsum(entry.total for entry in self.entries)

    def totals_by_mechanism(self) -> dict[str, float]:
        totals: dict[str, list[float]] = {}
        for entry in self.entries:
            totals.setdefault(entry.mechanism, []).append(entry.total)
        return {name: math.fsum(values) for name, values in totals.items()}

    def assert_composes_to(self, rho: float, tolerance: float = 1e-12) -> None:
        total = self.total
        if abs(total - rho) > tolerance * max(1.0, rho):
            raise BudgetAccountingError("Ledger does not compose to the run budget", {"ledger": total, "rho": rho})

    def to_rows(self) -> list[dict]:
        return [{"mechanism": e.mechanism, "rho": e.rho, "count": e.count} for e in self.entries]

    @classmethod
    def from_rows(cls, rows: Iterable[dict]) -> "BudgetLedger":
        return cls([LedgerEntry(row["mechanism"], float(row["rho"]), int(row.get("count", 1))) for row in rows])


_active_mechanism: ContextVar[Optional[str]] = ContextVar("rap_active_mechanism", default=None)


@contextmanager
def mechanism_scope(name: str) -> Iterator[None]:
    """Mark code that reads the sensitive dataset on behalf of a mechanism."""
    token = _active_mechanism.set(name)
    try:
        yield
    finally:
        _active_mechanism.reset(token)


def active_mechanism() -> Optional[str]:
    return _active_mechanism.get()


def require_mechanism_scope() -> None:
    """Dataset access observer: fail on reads outside a privacy mechanism."""
    if active_mechanism() is None:
        raise SensitiveAccessError("Sensitive records read outside a privacy mechanism")


def derive_rng(root_seed: int, counter: int) -> np.random.Generator:
    """Independent stream number `counter` under a root seed."""
    return np.random.default_rng([root_seed, counter])
