"""
Artifact Storage - File-based persistence for runs

Schema sidecars, workload files, experiment configs and mechanism output dumps.

Dump Directory Structure:
    <run_dir>/
    ├── schema.json        # Features and ordered categories
    ├── workload.json      # [{r, k, features}, ...]
    ├── synthetic.csv      # One column per one-hot coordinate, "feature=category"
    ├── answers.csv        # query_index, answer
    └── ledger.json        # [{mechanism, rho, count}, ...]
"""

import json
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd
import structlog
import yaml
from pydantic import ValidationError

from rap_engine.engine.dataset import RelaxedDataset, Schema
from rap_engine.engine.mechanism import RapOutput
from rap_engine.engine.privacy import BudgetLedger
from rap_engine.engine.workload import Workload
from rap_engine.exceptions import ConfigurationError, RapEngineError, SchemaError, WorkloadError
from rap_engine.utils.types import ExperimentConfig

logger = structlog.get_logger()

PathLike = Union[str, Path]


def _read_json(path: PathLike, error: type[RapEngineError]) -> Any:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise error("File not found", {"path": str(path)}) from e
    except (OSError, json.JSONDecodeError) as e:
        raise error("File is unreadable", {"path": str(path), "error": str(e)}) from e


def _write_json(path: PathLike, data: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


# ========== Schema ==========


def save_schema(schema: Schema, path: PathLike) -> None:
    _write_json(path, schema.to_dict())


def load_schema(path: PathLike) -> Schema:
    return Schema.from_dict(_read_json(path, SchemaError))


# ========== Workload ==========


def save_workload(workload: Workload, path: PathLike) -> None:
    _write_json(path, workload.to_records())


def load_workload(path: PathLike) -> Workload:
    data = _read_json(path, WorkloadError)
    if not isinstance(data, list):
        raise WorkloadError("Workload file must hold a list", {"path": str(path)})
    return Workload.from_records(data)


# ========== Experiment config ==========


def load_experiment_config(path: PathLike, overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load a YAML or JSON experiment config; non-None overrides replace file values.
    """
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigurationError("Config file not found", {"path": str(path)}) from e
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError("Config file is unreadable", {"path": str(path), "error": str(e)}) from e
    if not isinstance(data, dict):
        raise ConfigurationError("Config file must hold a mapping", {"path": str(path)})

    return build_experiment_config(merge_overrides(data, overrides))


def merge_overrides(data: dict[str, Any], overrides: Optional[dict[str, Any]]) -> dict[str, Any]:
    """
    Overlay non-None override values on a config mapping.

    Nested mappings (the optimizer block) merge key by key.
    """
    merged = dict(data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if isinstance(value, dict):
            base = merged.get(key)
            merged[key] = merge_overrides(base if isinstance(base, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def build_experiment_config(data: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigurationError("Invalid experiment config", {"errors": e.error_count(), "detail": str(e)}) from e


# ========== Mechanism outputs ==========


def synthetic_columns(schema: Schema) -> list[str]:
    return [f"{feature.name}={category}" for feature in schema.features for category in feature.categories]


class ArtifactStore:
    """Writes and reads mechanism output dumps under one directory."""

    def __init__(self, run_dir: PathLike):
        self.run_dir = Path(run_dir).expanduser()
        self.schema_path = self.run_dir / "schema.json"
        self.workload_path = self.run_dir / "workload.json"
        self.synthetic_path = self.run_dir / "synthetic.csv"
        self.answers_path = self.run_dir / "answers.csv"
        self.ledger_path = self.run_dir / "ledger.json"

    def save_rap_output(self, output: RapOutput, workload: Optional[Workload] = None) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        schema = output.synthetic.schema
        save_schema(schema, self.schema_path)
        if workload is not None:
            save_workload(workload, self.workload_path)

        pd.DataFrame(output.synthetic.values, columns=synthetic_columns(schema)).to_csv(
            self.synthetic_path, index=False, float_format="%.17g"
        )
        pd.DataFrame(
            {"query_index": np.arange(len(output.answers)), "answer": output.answers.values}
        ).to_csv(self.answers_path, index=False, float_format="%.17g")
        _write_json(self.ledger_path, output.budget_ledger.to_rows())
        logger.info("Run artifacts saved", run_dir=str(self.run_dir), queries=len(output.answers))

    def load_synthetic(self) -> RelaxedDataset:
        schema = load_schema(self.schema_path)
        frame = pd.read_csv(self.synthetic_path)
        if list(frame.columns) != synthetic_columns(schema):
            raise SchemaError("Synthetic dump columns do not match schema", {"path": str(self.synthetic_path)})
        return RelaxedDataset(schema, frame.to_numpy(dtype=np.float64))

    def load_answers(self) -> np.ndarray:
        frame = pd.read_csv(self.answers_path)
        return frame.sort_values("query_index")["answer"].to_numpy(dtype=np.float64)

    def load_ledger(self) -> BudgetLedger:
        return BudgetLedger.from_rows(_read_json(self.ledger_path, ConfigurationError))
