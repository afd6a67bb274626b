"""
Categorical Datasets

Schemas, sensitive datasets, one-hot encodings and relaxed synthetic datasets.

Records are stored as category indices; the one-hot space concatenates one
block per feature, blocks laid out contiguously in schema order.
"""

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from rap_engine.exceptions import DatasetError, SchemaError

logger = structlog.get_logger()

MISSING = "(missing)"

AccessObserver = Callable[[], None]


@dataclass(frozen=True)
class Feature:
    """A categorical feature with its ordered category list."""

    name: str
    categories: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class Schema:
    """Ordered categorical features of a dataset."""

    features: tuple[Feature, ...]

    def __post_init__(self) -> None:
        if not self.features:
            raise SchemaError("Schema needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("Duplicate feature names", {"features": names})
        for feature in self.features:
            if feature.cardinality < 2:
                raise SchemaError(
                    "Feature has fewer than 2 categories",
                    {"feature": feature.name, "categories": list(feature.categories)},
                )
            if len(set(feature.categories)) != feature.cardinality:
                raise SchemaError("Duplicate categories", {"feature": feature.name})

    @classmethod
    def from_categories(cls, columns: Sequence[tuple[str, Sequence[str]]]) -> "Schema":
        return cls(tuple(Feature(name, tuple(categories)) for name, categories in columns))

    @property
    def d(self) -> int:
        return len(self.features)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @cached_property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.features)

    @property
    def d_prime(self) -> int:
        return sum(self.cardinalities)

    @cached_property
    def block_offsets(self) -> tuple[int, ...]:
        offsets = [0]
        for t in self.cardinalities[:-1]:
            offsets.append(offsets[-1] + t)
        return tuple(offsets)

    def to_dict(self) -> dict:
        return {"features": [{"name": f.name, "categories": list(f.categories)} for f in self.features]}

    @classmethod
    def from_dict(cls, data: dict) -> "Schema":
        try:
            return cls.from_categories([(entry["name"], entry["categories"]) for entry in data["features"]])
        except (KeyError, TypeError) as e:
            raise SchemaError("Malformed schema document", {"error": str(e)}) from e


def synthetic_schema(cardinalities: Sequence[int], prefix: str = "f") -> Schema:
    """
    Build a schema with generated names.

    Category labels are zero-padded so lexicographic order equals index order.
    """
    columns = []
    for j, t in enumerate(cardinalities):
        width = len(str(t - 1))
        columns.append((f"{prefix}{j}", [f"c{i:0{width}d}" for i in range(t)]))
    return Schema.from_categories(columns)


class Dataset:
    """
    The sensitive dataset: n records of category indices.

    Reads of `records` notify registered access observers; privacy code uses
    this to prove every read happens inside a privacy mechanism.
    """

    def __init__(self, schema: Schema, records: np.ndarray, name: str = "dataset"):
        records = np.array(records, dtype=np.int64, copy=True)
        if records.ndim != 2 or records.shape[1] != schema.d:
            raise DatasetError("Records do not match schema width", {"shape": records.shape, "d": schema.d})
        if records.shape[0] < 1:
            raise DatasetError("Dataset is empty")
        cards = np.asarray(schema.cardinalities)
        if (records < 0).any() or (records >= cards[None, :]).any():
            raise SchemaError("Record index outside its feature's category range")
        records.setflags(write=False)
        self.schema = schema
        self.name = name
        self._records = records
        self._observers: list[AccessObserver] = []

    @property
    def n(self) -> int:
        return int(self._records.shape[0])

    @property
    def records(self) -> np.ndarray:
        for observer in self._observers:
            observer()
        return self._records

    def add_access_observer(self, observer: AccessObserver) -> None:
        self._observers.append(observer)

    def remove_access_observer(self, observer: AccessObserver) -> None:
        self._observers.remove(observer)


@dataclass
class RelaxedDataset:
    """Synthetic dataset in the relaxed space: an n' x d' matrix in [0, 1]."""

    schema: Schema
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != self.schema.d_prime:
            raise SchemaError(
                "Relaxed matrix does not match schema", {"shape": self.values.shape, "d_prime": self.schema.d_prime}
            )

    @property
    def n_prime(self) -> int:
        return int(self.values.shape[0])

    @property
    def block_offsets(self) -> tuple[int, ...]:
        return self.schema.block_offsets

    def block(self, feature: int) -> np.ndarray:
        start = self.schema.block_offsets[feature]
        return self.values[:, start : start + self.schema.cardinalities[feature]]

    def copy(self) -> "RelaxedDataset":
        return RelaxedDataset(self.schema, self.values.copy())


# ========== Ingestion ==========


def _read_table(path: Union[str, Path], delimiter: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise DatasetError("Dataset file not found", {"path": str(path)}) from e
    except pd.errors.EmptyDataError as e:
        raise DatasetError("Dataset file is empty", {"path": str(path)}) from e
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        raise DatasetError("Dataset file is unreadable", {"path": str(path), "error": str(e)}) from e

    if frame.empty:
        raise DatasetError("Dataset has no records", {"path": str(path)})

    frame = frame.apply(lambda column: column.str.strip())
    return frame.replace("", MISSING)


def infer_schema(frame: pd.DataFrame) -> Schema:
    """Every column is categorical; categories sorted lexicographically."""
    return Schema.from_categories([(str(col), sorted(frame[col].unique())) for col in frame.columns])


def encode_frame(frame: pd.DataFrame, schema: Schema) -> np.ndarray:
    """Map string cells to category indices under a fixed schema."""
    missing = [name for name in schema.names if name not in frame.columns]
    if missing:
        raise SchemaError("Columns missing from table", {"columns": missing})

    codes = np.empty((len(frame), schema.d), dtype=np.int64)
    for j, feature in enumerate(schema.features):
        column = pd.Categorical(frame[feature.name], categories=list(feature.categories)).codes
        unknown = np.flatnonzero(column < 0)
        if unknown.size:
            row = int(unknown[0])
            raise SchemaError(
                "Value absent from schema",
                {"feature": feature.name, "row": row, "value": frame[feature.name].iloc[row]},
            )
        codes[:, j] = column
    return codes


def load_dataset(
    path: Union[str, Path],
    schema: Optional[Schema] = None,
    delimiter: str = ",",
    name: Optional[str] = None,
) -> Dataset:
    """
    Load a delimited categorical table.

    Args:
        path: UTF-8 delimited text file with a header row
        schema: Declared schema; inferred from the data when omitted
        delimiter: Field separator
        name: Dataset label used in result rows (default: file stem)

    Returns:
        Dataset with one category index per cell
    """
    frame = _read_table(path, delimiter)
    if schema is None:
        schema = infer_schema(frame)
    records = encode_frame(frame, schema)

    dataset = Dataset(schema, records, name=name or Path(path).stem)
    logger.info("Dataset loaded", path=str(path), n=dataset.n, d=schema.d, d_prime=schema.d_prime)
    return dataset


def save_dataset(dataset: Dataset, path: Union[str, Path], delimiter: str = ",") -> None:
    """Write the dataset back as category labels."""
    records = dataset.records
    frame = pd.DataFrame(
        {f.name: np.asarray(f.categories, dtype=object)[records[:, j]] for j, f in enumerate(dataset.schema.features)}
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep=delimiter, index=False)


# ========== Encodings ==========


def _check_record(record: Sequence[int], schema: Schema) -> np.ndarray:
    values = np.asarray(record, dtype=np.int64)
    if values.shape != (schema.d,):
        raise SchemaError("Record length does not match schema", {"length": values.size, "d": schema.d})
    if (values < 0).any() or (values >= np.asarray(schema.cardinalities)).any():
        raise SchemaError("Record index outside its feature's category range")
    return values


def one_hot(record: Sequence[int], schema: Schema) -> np.ndarray:
    """One-hot encode a record: block j holds a 1 at the record's category."""
    values = _check_record(record, schema)
    bits = np.zeros(schema.d_prime, dtype=np.uint8)
    bits[np.asarray(schema.block_offsets) + values] = 1
    return bits


def one_hot_records(records: np.ndarray, schema: Schema) -> np.ndarray:
    """One-hot encode a record matrix into an n x d' float matrix."""
    records = np.asarray(records, dtype=np.int64)
    encoded = np.zeros((records.shape[0], schema.d_prime), dtype=np.float64)
    columns = records + np.asarray(schema.block_offsets)[None, :]
    np.put_along_axis(encoded, columns, 1.0, axis=1)
    return encoded


def decode(bits: Sequence[int], schema: Schema) -> tuple[int, ...]:
    """Inverse of one_hot; every block must hold exactly one 1."""
    bits = np.asarray(bits)
    if bits.shape != (schema.d_prime,):
        raise SchemaError("One-hot vector length does not match schema", {"length": bits.size})
    record = []
    for j, (start, t) in enumerate(zip(schema.block_offsets, schema.cardinalities)):
        hot = np.flatnonzero(bits[start : start + t])
        if hot.size != 1 or bits[start + hot[0]] != 1:
            raise SchemaError("Block is not a valid one-hot encoding", {"feature": schema.features[j].name})
        record.append(int(hot[0]))
    return tuple(record)


def all_records(schema: Schema) -> np.ndarray:
    """Every record of a (small) schema, in lexicographic order."""
    return np.array(list(itertools.product(*(range(t) for t in schema.cardinalities))), dtype=np.int64)


def init_relaxed(n_prime: int, schema: Schema, rng: np.random.Generator) -> RelaxedDataset:
    """
    Uniform[0, 1] initialization of a relaxed synthetic dataset.

    The result is not on the block simplex; callers project it before use.
    """
    if n_prime < 1:
        raise DatasetError("n_prime must be at least 1", {"n_prime": n_prime})
    return RelaxedDataset(schema, rng.random((n_prime, schema.d_prime)))


# ========== Generators ==========


def planted_dataset(
    n: int,
    cardinalities: Sequence[int],
    rng: np.random.Generator,
    correlated_pairs: Sequence[tuple[int, int]] = (),
    strength: float = 0.9,
    skew: float = 0.5,
    name: str = "planted",
) -> Dataset:
    """
    Random categorical dataset with planted pairwise structure.

    Each feature draws from a geometric-shaped marginal (mass ratio `skew`
    between consecutive categories). For every (a, b) pair, feature b copies
    feature a (modulo its cardinality) with probability `strength`.
    """
    if n < 1:
        raise DatasetError("n must be at least 1", {"n": n})
    if not 0 <= strength <= 1 or not 0 < skew <= 1:
        raise DatasetError("strength must lie in [0, 1] and skew in (0, 1]", {"strength": strength, "skew": skew})
    schema = synthetic_schema(cardinalities)

    records = np.empty((n, schema.d), dtype=np.int64)
    for j, t in enumerate(schema.cardinalities):
        probs = skew ** np.arange(t)
        records[:, j] = rng.choice(t, size=n, p=probs / probs.sum())

    for a, b in correlated_pairs:
        if not (0 <= a < schema.d and 0 <= b < schema.d) or a == b:
            raise DatasetError("Invalid correlated pair", {"pair": (a, b)})
        copy = rng.random(n) < strength
        records[copy, b] = records[copy, a] % schema.cardinalities[b]

    return Dataset(schema, records, name=name)
