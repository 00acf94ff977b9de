"""
CSV helpers with a fixed column order and stable float formatting
"""
import csv
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    """Render floats with repr precision so files are reproducible byte for byte"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    if value is None:
        return ""
    return str(value)


def write_rows(
    path: Union[str, Path],
    columns: Sequence[str],
    rows: Iterable[Dict[str, Any]],
) -> Path:
    """Write rows (dicts) under a header; missing keys become empty cells"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c)) for c in columns])
    return path


class CsvLog:
    """Append-as-you-go CSV log (header written on open)"""

    def __init__(self, path: Union[str, Path], columns: Sequence[str]):
        self.path = Path(path)
        self.columns: List[str] = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(self.columns)

    def append(self, row: Dict[str, Any]) -> None:
        self._writer.writerow([format_value(row.get(c)) for c in self.columns])
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_rows(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


__all__ = ["CsvLog", "write_rows", "read_rows", "format_value"]
