"""
Result files

Append-only CSV output with a fixed column order (ResultRow field order).
The header is written when the writer opens a new or empty file.
"""

from pathlib import Path
from typing import Iterable, Union

import pandas as pd
import structlog

from rap_engine.exceptions import ConfigurationError
from rap_engine.utils.types import ResultRow

logger = structlog.get_logger()

RESULT_COLUMNS = list(ResultRow.model_fields)


class CsvAppender:
    """Appends dict rows to a CSV file under a fixed column list."""

    def __init__(self, path: Union[str, Path], columns: list[str]):
        self.path = Path(path)
        self.columns = columns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self.path.stat().st_size > 0:
            existing = list(pd.read_csv(self.path, nrows=0).columns)
            if existing != columns:
                raise ConfigurationError("Existing file has different columns", {"path": str(self.path)})
        else:
            pd.DataFrame(columns=columns).to_csv(self.path, index=False)

    def append(self, rows: Iterable[dict]) -> int:
        frame = pd.DataFrame(list(rows), columns=self.columns)
        if frame.empty:
            return 0
        frame.to_csv(self.path, mode="a", header=False, index=False)
        return len(frame)


class ResultWriter(CsvAppender):
    """Single writer for ResultRows."""

    def __init__(self, path: Union[str, Path]):
        super().__init__(path, RESULT_COLUMNS)

    def write(self, rows: Iterable[ResultRow]) -> int:
        written = self.append(row.model_dump(mode="json") for row in rows)
        logger.debug("Result rows written", path=str(self.path), rows=written)
        return written


def read_results(path: Union[str, Path]) -> list[ResultRow]:
    text_columns = [name for name, info in ResultRow.model_fields.items() if "str" in str(info.annotation)]
    frame = pd.read_csv(path, dtype={name: str for name in text_columns})
    frame = frame.astype(object).where(frame.notna(), None)
    return [ResultRow(**record) for record in frame.to_dict(orient="records")]
