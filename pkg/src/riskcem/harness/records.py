"""Typed CSV records that read back exactly what was written.

Floats are written with ``repr`` (shortest round-tripping form), lists as
JSON, booleans as ``0``/``1`` and missing values as the empty string.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Optional

from ..errors import InvalidInputError

RUN_SCHEMA = {
    "row_type": str,
    "iteration": int,
    "episode": int,
    "seed": int,
    "config_hash": str,
    "dataset_size": int,
    "member_losses": list,
    "steps": int,
    "return": float,
    "success": bool,
    "fell": bool,
    "violations": int,
    "coverage": float,
    "cost_task": float,
    "cost_aleatoric": float,
    "cost_epistemic": float,
    "cost_safety": float,
}

SUMMARY_SCHEMA = {
    **RUN_SCHEMA,
    "success_rate": float,
    "success_se": float,
    "fall_rate": float,
    "fall_se": float,
    "return_se": float,
    "violations_se": float,
    "violation_episode_rate": float,
}


def _format(value, kind) -> str:
    if value is None:
        return ""
    if kind is bool:
        return "1" if value else "0"
    if kind is float:
        value = float(value)
        return repr(value) if math.isfinite(value) else str(value)
    if kind is list:
        return json.dumps([float(v) for v in value])
    return str(value)


def _parse(text: str, kind, column: str):
    if text == "":
        return None
    try:
        if kind is bool:
            if text not in ("0", "1"):
                raise ValueError(text)
            return text == "1"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is list:
            return json.loads(text)
    except (ValueError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"column {column!r}: cannot parse {text!r}") from exc
    return text


class RecordWriter:
    """Append-only CSV writer; every row is flushed as soon as it is written."""

    def __init__(self, path, schema: dict):
        self.path = Path(path)
        self.schema = schema
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(list(schema))
        self._fh.flush()

    def write(self, row: dict) -> None:
        unknown = set(row) - set(self.schema)
        if unknown:
            raise InvalidInputError(f"unknown record field(s): {', '.join(sorted(unknown))}")
        self._writer.writerow([_format(row.get(name), kind) for name, kind in self.schema.items()])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path, schema: Optional[dict] = None) -> list[dict]:
    """Parse a CSV written by :class:`RecordWriter`; columns not in ``schema`` stay strings."""
    schema = schema or {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: _parse(v, schema.get(k, str), k) for k, v in row.items()} for row in reader]


def write_rows(path, columns: list, rows: Iterable[dict], kinds: Optional[dict] = None) -> None:
    """One-shot writer for tables whose columns are only known at runtime."""
    kinds = kinds or {}
    with RecordWriter(path, {c: kinds.get(c, float) for c in columns}) as writer:
        for row in rows:
            writer.write(row)


def episode_columns(state_dim: int, action_dim: int) -> dict:
    return {
        "t": int,
        **{f"state_{i}": float for i in range(state_dim)},
        **{f"action_{i}": float for i in range(action_dim)},
        "reward": float,
        "violation": bool,
    }
