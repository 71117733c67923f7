"""
Run records are appended to ``<out>/records.jsonl``, one JSON object per
line; each result table is also written as ``<out>/<task>-<table>.csv`` with a
trailing ``# config_hash=...`` comment line.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from critbranch.config import SCHEMA_VERSION, ExperimentConfig, config_hash
from critbranch.utils.exceptions import ConfigurationError, ReplayMismatch

RECORDS_FILE = "records.jsonl"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    return str(value)


def make_table(columns: Sequence[str], rows) -> dict:
    return {"columns": list(columns), "rows": [[_cell(v) for v in row] for row in rows]}


@dataclass
class RunRecord:
    config: ExperimentConfig
    config_hash: str
    git_describe: str
    started: str
    finished: str
    tables: Dict[str, dict] = field(default_factory=dict)
    verdicts: List[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def task(self) -> str:
        return self.config["task"]

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigurationError(f"Malformed run record: {e}") from e


def append_record(record: RunRecord, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / RECORDS_FILE
    with open(path, "a") as f:
        f.write(record.to_json() + "\n")
    return path


def load_records(path: Path) -> List[RunRecord]:
    if path.is_dir():
        path = path / RECORDS_FILE
    if not path.exists():
        raise ConfigurationError(f"Record file not found: {path}")
    records = []
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}:{number} is not valid JSON: {e}") from e
    if not records:
        raise ConfigurationError(f"{path} holds no run records")
    return records


def load_record(path: Path, index: int = -1) -> RunRecord:
    records = load_records(path)
    try:
        record = records[index]
    except IndexError:
        raise ConfigurationError(f"{path} holds {len(records)} records; index {index} is out of range")
    if record.schema_version != SCHEMA_VERSION:
        raise ConfigurationError(
            f"Record schema version {record.schema_version} does not match {SCHEMA_VERSION}"
        )
    if config_hash(record.config) != record.config_hash:
        raise ConfigurationError("Record config does not match its config hash", field="config_hash")
    return record


def write_tables(record: RunRecord, out: Path) -> List[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, table in record.tables.items():
        path = out / f"{record.task}-{name}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(table["columns"])
            for row in table["rows"]:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
            f.write(f"# config_hash={record.config_hash}\n")
        paths.append(path)
    return paths


def persist(record: RunRecord, out: Path, formats: Optional[Sequence[str]] = None) -> List[Path]:
    formats = formats or ("csv", "jsonl")
    written = []
    if "jsonl" in formats:
        written.append(append_record(record, out))
    if "csv" in formats:
        written.extend(write_tables(record, out))
    return written


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return type(a) is type(b) and a == b


def compare_tables(recorded: Dict[str, dict], replayed: Dict[str, dict]) -> None:
    """Raise ReplayMismatch at the first cell that is not bit-identical."""
    for name, table in recorded.items():
        other = replayed.get(name)
        if other is None:
            raise ReplayMismatch(name, -1, "*", "table", None)
        if table["columns"] != other["columns"]:
            raise ReplayMismatch(name, -1, "*", table["columns"], other["columns"])
        if len(table["rows"]) != len(other["rows"]):
            raise ReplayMismatch(name, len(other["rows"]), "*", len(table["rows"]), len(other["rows"]))
        for i, (row, other_row) in enumerate(zip(table["rows"], other["rows"])):
            for column, a, b in zip(table["columns"], row, other_row):
                if not _same(a, b):
                    raise ReplayMismatch(name, i, column, a, b)
    extra = sorted(set(replayed) - set(recorded))
    if extra:
        raise ReplayMismatch(extra[0], -1, "*", None, "table")
