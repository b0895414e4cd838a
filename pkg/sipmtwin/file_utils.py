"""
Utilities for reading and writing run artifacts: CSV tables, JSON result
records, the run manifest and progress bars.
"""

import csv
import json
import logging
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np
from tqdm import tqdm as _tqdm

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def get_file_extension(path: PathLike, dot=True, lower: bool = True):
    ext = os.path.splitext(str(path))[1]
    ext = ext if dot else ext[1:]
    return ext.lower() if lower else ext


def to_builtin(value: Any) -> Any:
    """
    Convert numpy scalars/arrays, paths, enums and non-finite floats into plain
    JSON types so a record always serializes to the same bytes.
    """
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_builtin(v) for v in value.tolist()]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def write_json(record: Dict[str, Any], path: PathLike) -> Path:
    """ Write `record` as JSON with sorted keys """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(to_builtin(record), sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="UTF-8")
    logger.debug(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(path, "r", encoding="UTF-8") as fh:
        return json.load(fh)


def format_number(value: Any) -> str:
    """ Shortest round-tripping text for numbers, `str` for everything else """
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """ Write a CSV table with a header line """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])
    logger.debug(f"Wrote {path}")
    return path


def read_csv(path: PathLike, required: Sequence[str] = ()) -> List[Dict[str, str]]:
    """ Read a CSV table into dictionaries, checking that `required` columns exist """
    with open(path, "r", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise InvalidArgumentError(f"{path}: missing columns {missing}")
        return [row for row in reader]


def write_manifest(path: PathLike, entries: Dict[str, Any]) -> Path:
    """ Write the plain-text run manifest, one ``key: value`` line per entry """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}: {format_number(to_builtin(entries[k]))}" for k in sorted(entries)]
    path.write_text("\n".join(lines) + "\n", encoding="UTF-8")
    return path


class Tqdm:
    # These defaults are the same as the argument defaults in tqdm.
    default_mininterval: float = 0.1
    disable: bool = False

    @staticmethod
    def set_slower_interval(use_slower_interval: bool) -> None:
        """
        Slow the refresh rate down to once every 10 s. Interactive runs want the
        default rate, long runs whose stderr ends up in a log file do not.
        """
        Tqdm.default_mininterval = 10.0 if use_slower_interval else 0.1

    @staticmethod
    def tqdm(*args, **kwargs):
        new_kwargs = {
            "mininterval": Tqdm.default_mininterval,
            "disable": Tqdm.disable,
            **kwargs,
        }

        return _tqdm(*args, **new_kwargs)
