"""Meta-analysis datasets: CSV ingestion, validation and the bias-direction check."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

FEW_STUDIES = 8
EXTREME_S_RATIO = 100.0


class DataError(ValueError):
    """Raised for malformed or unusable study tables."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Study:
    y: float
    s: float
    label: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.y):
            raise DataError("effect y must be finite")
        if not (math.isfinite(self.s) and self.s > 0):
            raise DataError("standard error s must be positive")


@dataclass(frozen=True)
class MetaDataset:
    """Immutable ordered collection of (y, s) pairs."""

    studies: tuple[Study, ...]

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        if not self.studies:
            raise DataError("dataset has no studies")

    @classmethod
    def from_arrays(cls, y, s, labels=None) -> "MetaDataset":
        y = np.asarray(y, dtype=float).ravel()
        s = np.asarray(s, dtype=float).ravel()
        if y.shape != s.shape:
            raise DataError("y and s must have equal length")
        if labels is None:
            labels = [None] * y.size
        return cls(tuple(Study(float(a), float(b), lab) for a, b, lab in zip(y, s, labels)))

    @property
    def n(self) -> int:
        return len(self.studies)

    @property
    def y(self) -> np.ndarray:
        out = np.array([st.y for st in self.studies])
        out.flags.writeable = False
        return out

    @property
    def s(self) -> np.ndarray:
        out = np.array([st.s for st in self.studies])
        out.flags.writeable = False
        return out

    @property
    def s_min(self) -> float:
        return min(st.s for st in self.studies)

    @property
    def s_max(self) -> float:
        return max(st.s for st in self.studies)

    @property
    def labels(self) -> list[str | None]:
        return [st.label for st in self.studies]

    def require_fit_size(self):
        if self.n < 2:
            raise DataError(f"at least 2 studies are needed for a fit, got {self.n}")


@dataclass
class ValidationReport:
    n: int
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.warnings


def _parse_float(text, row, column):
    cell = text.strip()
    if cell == "" or cell.upper() == "NA":
        raise DataError(f"missing value in column {column!r}", row)
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r} in column {column!r}", row) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value {cell!r} in column {column!r}", row)
    return value


def parse_dataset(csv_text: str) -> MetaDataset:
    """Parse a ``y,s`` (optionally ``label``) CSV table.

    Columns are matched by header name, so their order is free. Row numbers
    in error messages count the header as row 1.

    Note that a single-study table parses fine; fitting routines refuse it
    through :meth:`MetaDataset.require_fit_size`.
    """
    reader = csv.reader(io.StringIO(csv_text.lstrip("﻿")))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise DataError("empty input", 1) from None
    for col in ("y", "s"):
        if col not in header:
            raise DataError(f"missing column {col!r}", 1)
    iy, is_ = header.index("y"), header.index("s")
    il = header.index("label") if "label" in header else None

    studies = []
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise DataError(f"expected {len(header)} cells, got {len(row)}", rownum)
        y = _parse_float(row[iy], rownum, "y")
        s = _parse_float(row[is_], rownum, "s")
        if s <= 0:
            raise DataError(f"standard error must be positive, got {s}", rownum)
        label = row[il].strip() if il is not None else None
        studies.append(Study(y, s, label or None))
    if not studies:
        raise DataError("no data rows", 2)
    return MetaDataset(tuple(studies))


def read_dataset(path) -> MetaDataset:
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read())


def serialize_dataset(d: MetaDataset) -> str:
    """Write a dataset back to CSV text with round-trip precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    has_labels = any(lab is not None for lab in d.labels)
    writer.writerow(["label", "y", "s"] if has_labels else ["y", "s"])
    for st in d.studies:
        cells = [repr(st.y), repr(st.s)]
        writer.writerow([st.label or ""] + cells if has_labels else cells)
    return buf.getvalue()


def validate(d: MetaDataset) -> ValidationReport:
    warnings = []
    if d.n < 2:
        warnings.append(f"few studies: n={d.n} is below 2, fitting is refused")
    elif d.n < FEW_STUDIES:
        warnings.append(f"few studies: n={d.n} is below {FEW_STUDIES}")
    ratio = d.s_max / d.s_min
    if ratio > EXTREME_S_RATIO:
        warnings.append(f"extreme s ratio: s_max/s_min = {ratio:.4g}")
    pairs = [(st.y, st.s) for st in d.studies]
    n_dup = len(pairs) - len(set(pairs))
    if n_dup:
        warnings.append(f"duplicate rows: {n_dup} repeated (y, s) pair(s)")
    return ValidationReport(n=d.n, warnings=warnings)


@dataclass(frozen=True)
class DirectionResult:
    deviates: np.ndarray
    skewness: float
    direction: int


def standardized_deviates(d: MetaDataset, theta_hat: float, tau_hat: float) -> DirectionResult:
    """Standardized deviates and the sign of their sample skewness.

    Skewness is the third standardized moment with n in every denominator.
    A positive sign points to an excess of large effects.
    """
    if tau_hat < 0:
        raise ValueError("tau_hat must be non-negative")
    if d.n < 3:
        raise DataError(f"skewness is undefined for n={d.n} < 3")
    dev = (d.y - theta_hat) / np.sqrt(d.s**2 + tau_hat**2)
    centered = dev - dev.mean()
    m2 = np.mean(centered**2)
    m3 = np.mean(centered**3)
    if m2 == 0.0:
        skew = 0.0
    else:
        skew = float(m3 / m2**1.5)
        # round-off residue on exactly symmetric inputs
        if abs(skew) < 1e-12:
            skew = 0.0
    return DirectionResult(deviates=dev, skewness=skew, direction=int(np.sign(skew)))
