"""
Exception hierarchy for rap-engine
"""

from typing import Any, Optional


class RapEngineError(Exception):
    """Base class for every error raised by rap-engine."""

    def __init__(self, message: str, details: Optional[dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        if self.details:
            context = ", ".join(f"{key}={value}" for key, value in self.details.items())
            super().__init__(f"{message} ({context})")
        else:
            super().__init__(message)


class SchemaError(RapEngineError):
    """Raised when a schema is malformed or does not cover a record."""


class DatasetError(RapEngineError):
    """Raised when a dataset file cannot be read or is empty."""


class WorkloadError(RapEngineError):
    """Raised for invalid thresholds, workloads or query indices."""


class QueryCountOverflowError(WorkloadError):
    """Raised when a consistent-query count exceeds the indexable range."""


class SurrogateError(RapEngineError):
    """Raised for malformed polynomial threshold specs."""


class PrivacyError(RapEngineError):
    """Raised for invalid privacy parameters or mechanism inputs."""


class BudgetAccountingError(PrivacyError):
    """Raised when the budget ledger does not compose to the run budget."""


class SensitiveAccessError(PrivacyError):
    """Raised when sensitive records are read outside a privacy mechanism."""


class ProjectionError(RapEngineError):
    """Raised for invalid projection inputs."""


class ProjectionDivergedError(ProjectionError):
    """Raised when the relaxed projection produces a non-finite loss."""


class ConfigurationError(RapEngineError):
    """Raised for invalid mechanism or experiment configuration."""
