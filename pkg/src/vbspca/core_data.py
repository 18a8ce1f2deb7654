"""Data ingestion and standardization.

Matrices are held sensors x samples: ``values[j, i]`` is sensor ``j`` at
sample ``i``, so each column is one time-ordered sample vector.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class DataMatrix:
    values: np.ndarray
    tags: tuple
    sample_period: Optional[float] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError(f"expected a 2-D matrix, got shape {values.shape}")
        m, n = values.shape
        tags = tuple(str(t) for t in self.tags)
        if len(tags) != m:
            raise DataError(f"{len(tags)} tags for {m} sensors")
        if m < 1 or n < 2:
            raise DataError(f"need m >= 1 sensors and n >= 2 samples, got {m}x{n}")
        bad = ~np.isfinite(values)
        if bad.any():
            j, i = np.argwhere(bad)[0]
            raise DataError(f"non-finite value at sensor {tags[j]!r}, sample {i + 1}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tags", tags)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def samples(self) -> np.ndarray:
        """Samples x sensors copy (row per sample)."""
        return self.values.T.copy()

    def with_values(self, values: np.ndarray) -> "DataMatrix":
        return DataMatrix(values, self.tags, self.sample_period)


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    tags: tuple = field(default=())

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError("scaler mean/std must be vectors of equal length")
        if np.any(std <= 0):
            raise DataError("scaler std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "tags", tuple(self.tags))

    def to_dict(self) -> dict:
        return {
            "tags": list(self.tags),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["mean"], float), np.array(d["std"], float), tuple(d["tags"]))


def _parse_rows(reader, source: str) -> tuple[list, list]:
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{source}: empty file") from None
    tags = [h.strip() for h in header]
    if not tags or any(not t for t in tags):
        raise DataError(f"{source}: header row has empty tag names")
    rows = []
    # Row numbers are 1-based over data rows (header excluded).
    for rownum, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(tags):
            raise DataError(
                f"{source}: row {rownum} has {len(row)} fields, expected {len(tags)}"
            )
        parsed = []
        for colnum, cell in enumerate(row, start=1):
            try:
                value = float(cell)
            except ValueError:
                raise DataError(
                    f"{source}: non-numeric field {cell!r} at row {rownum}, column {colnum}"
                ) from None
            if not math.isfinite(value):
                raise DataError(
                    f"{source}: non-finite value at row {rownum}, column {colnum}"
                )
            parsed.append(value)
        rows.append(parsed)
    return tags, rows


def load_csv(path) -> DataMatrix:
    """Read a header + numeric-rows CSV into a sensors x samples matrix."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        tags, rows = _parse_rows(csv.reader(fh), str(path))
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 data rows, found {len(rows)}")
    return DataMatrix(np.array(rows, dtype=float).T, tuple(tags))


def format_float(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_csv(X: DataMatrix, path) -> None:
    rows = ([format_float(v) for v in sample] for sample in X.values.T)
    atomic_write_text(path, csv_text(X.tags, rows))


def fit_scaler(X: DataMatrix) -> Scaler:
    mean = X.values.mean(axis=1)
    std = X.values.std(axis=1, ddof=1)
    for j, s in enumerate(std):
        if not s > 0:
            raise DataError(f"constant sensor {X.tags[j]!r} cannot be standardized")
    return Scaler(mean, std, X.tags)


def _check_compatible(s: Scaler, X: DataMatrix) -> None:
    if len(s.mean) != X.m:
        raise DataError(f"scaler has {len(s.mean)} sensors, data has {X.m}")
    if s.tags and tuple(s.tags) != tuple(X.tags):
        raise DataError("sensor tags do not match the scaler's tag order")


def apply_scaler(s: Scaler, X: DataMatrix) -> DataMatrix:
    _check_compatible(s, X)
    return X.with_values((X.values - s.mean[:, None]) / s.std[:, None])


def invert_scaler(s: Scaler, Z: DataMatrix) -> DataMatrix:
    _check_compatible(s, Z)
    return Z.with_values(Z.values * s.std[:, None] + s.mean[:, None])
