"""Typed survey tables: CSV ingestion, missingness tracking, recoding.

A :class:`DataTable` is a column-ordered collection of typed columns
(numeric, ordinal, nominal) with an explicit per-cell missingness mask.
Tables are immutable after construction; every transformation returns a
new table, so instances can be shared freely across threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MISSING_TOKENS = frozenset({"", "NA"})


@dataclass(frozen=True)
class Numeric:
    """Continuous column (float64)."""


@dataclass(frozen=True)
class Ordinal:
    """Ordered integer scale, e.g. Likert 1..5."""

    levels: tuple[int, ...]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("ordinal column needs at least 2 levels")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError(f"ordinal levels must be strictly increasing: {self.levels}")


@dataclass(frozen=True)
class Nominal:
    """Unordered categorical column with a designated baseline level."""

    levels: tuple[str, ...]
    baseline: str

    def __post_init__(self):
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"nominal levels must be unique: {self.levels}")
        if len(self.levels) < 2:
            raise ValueError("nominal column needs at least 2 levels")
        if self.baseline not in self.levels:
            raise ValueError(f"baseline {self.baseline!r} is not a declared level")


ColumnKind = Numeric | Ordinal | Nominal


@dataclass(frozen=True)
class Column:
    """One named, typed column plus its missingness mask (True = missing)."""

    name: str
    kind: ColumnKind
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 1:
            raise ValueError(f"column {self.name!r}: values and mask must be 1-d and congruent")
        if isinstance(self.kind, Nominal):
            values = values.astype(object)
        else:
            values = values.astype(float)
        present = ~mask
        if isinstance(self.kind, Ordinal):
            ok = np.isin(values[present], np.asarray(self.kind.levels, dtype=float))
            if not ok.all():
                bad = values[present][~ok][0]
                raise ValueError(f"column {self.name!r}: value {bad} outside declared levels")
        elif isinstance(self.kind, Nominal):
            ok = np.isin(values[present], np.asarray(self.kind.levels, dtype=object))
            if not ok.all():
                bad = values[present][~ok][0]
                raise ValueError(f"column {self.name!r}: label {bad!r} outside declared levels")
        values = values.copy()
        mask = mask.copy()
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    def __len__(self):
        return self.values.shape[0]


class DataTable:
    """Immutable table of typed columns sharing one row index."""

    def __init__(self, columns: list[Column] | tuple[Column, ...]):
        columns = tuple(columns)
        if not columns:
            raise ValueError("a table needs at least one column")
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ValueError(f"duplicate column name {dup!r}")
        n = len(columns[0])
        if any(len(c) != n for c in columns):
            raise ValueError("all columns must have the same length")
        self._columns = columns
        self._by_name = {c.name: c for c in columns}
        self.n_rows = n

    @property
    def columns(self) -> tuple[Column, ...]:
        return self._columns

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self._columns)

    def column(self, name: str) -> Column:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no column named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def kind(self, name: str) -> ColumnKind:
        return self.column(name).kind

    def values(self, name: str) -> np.ndarray:
        return self.column(name).values

    def mask(self, name: str) -> np.ndarray:
        return self.column(name).mask

    def with_column(self, col: Column) -> "DataTable":
        """Append a column (or replace one of the same name)."""
        if col.name in self._by_name:
            cols = tuple(col if c.name == col.name else c for c in self._columns)
        else:
            cols = self._columns + (col,)
        return DataTable(cols)

    def select_columns(self, names) -> "DataTable":
        return DataTable([self.column(n) for n in names])

    def select_rows(self, index: np.ndarray) -> "DataTable":
        return DataTable(
            [Column(c.name, c.kind, c.values[index], c.mask[index]) for c in self._columns]
        )

    def equals(self, other: "DataTable") -> bool:
        """Exact equality of schema, masks, and all non-missing cells."""
        if self.names != other.names or self.n_rows != other.n_rows:
            return False
        for a, b in zip(self._columns, other._columns):
            if a.kind != b.kind or not np.array_equal(a.mask, b.mask):
                return False
            present = ~a.mask
            if isinstance(a.kind, Nominal):
                if not np.array_equal(a.values[present], b.values[present]):
                    return False
            elif not np.array_equal(a.values[present], b.values[present]):
                return False
        return True


@dataclass(frozen=True)
class MissingReport:
    per_column: dict[str, int]
    total_missing: int
    rows_with_missing_response: int | None = None

    def __post_init__(self):
        if self.total_missing != sum(self.per_column.values()):
            raise ValueError("total_missing inconsistent with per-column counts")


def _parse_cell(raw: str, kind: ColumnKind, row: int, name: str):
    if isinstance(kind, Numeric):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"data row {row}, column {name!r}: cannot parse {raw!r} as numeric") from None
    if isinstance(kind, Ordinal):
        try:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
        except ValueError:
            raise ValueError(f"data row {row}, column {name!r}: cannot parse {raw!r} as ordinal") from None
        if int(value) not in kind.levels:
            raise ValueError(
                f"data row {row}, column {name!r}: level {int(value)} outside declared levels {kind.levels}"
            )
        return value
    if raw not in kind.levels:
        raise ValueError(f"data row {row}, column {name!r}: label {raw!r} outside declared levels")
    return raw


def load_csv(path, schema, missing_tokens=DEFAULT_MISSING_TOKENS, subset: bool = False) -> DataTable:
    """Read an RFC-4180 CSV against a declared schema.

    Parameters
    ----------
    path : str or Path
    schema : sequence of (name, ColumnKind)
        Columns to ingest. Header order is irrelevant.
    missing_tokens : set of str
        Raw cell strings treated as missing.
    subset : bool
        When True, header columns not in the schema are ignored instead of
        rejected (for wide raw exports that carry extra items).
    """
    schema = list(schema)
    kinds = dict(schema)
    if len(kinds) != len(schema):
        raise ValueError("schema declares a column twice")
    missing_tokens = frozenset(missing_tokens)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        seen = set()
        for h in header:
            if h in seen:
                raise ValueError(f"duplicate header column {h!r}")
            seen.add(h)
        unknown = [h for h in header if h not in kinds]
        if unknown and not subset:
            raise ValueError(f"unknown column {unknown[0]!r} in header")
        absent = [n for n, _ in schema if n not in seen]
        if absent:
            raise ValueError(f"schema column {absent[0]!r} missing from header")

        positions = [header.index(name) for name, _ in schema]
        raw_rows = []
        for r, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ValueError(f"data row {r}: expected {len(header)} cells, got {len(row)}")
            raw_rows.append([row[p] for p in positions])

    n = len(raw_rows)
    columns = []
    for j, (name, kind) in enumerate(schema):
        nominal = isinstance(kind, Nominal)
        values = np.empty(n, dtype=object) if nominal else np.full(n, np.nan)
        mask = np.zeros(n, dtype=bool)
        for r in range(n):
            raw = raw_rows[r][j]
            if raw in missing_tokens:
                mask[r] = True
                if nominal:
                    values[r] = None
            else:
                values[r] = _parse_cell(raw, kind, r + 1, name)
        columns.append(Column(name, kind, values, mask))
    return DataTable(columns)


def _format_cell(col: Column, r: int) -> str:
    if col.mask[r]:
        return ""
    if isinstance(col.kind, Nominal):
        return col.values[r]
    v = float(col.values[r])
    if isinstance(col.kind, Ordinal):
        return str(int(v))
    return repr(v)


def write_csv(t: DataTable, path) -> None:
    """Emit a table as CSV; missing cells become empty strings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(t.names)
        for r in range(t.n_rows):
            writer.writerow([_format_cell(c, r) for c in t.columns])


def derive_bmi(weight: Column, height: Column, name: str = "BMI") -> Column:
    """Body mass index column from weight (kg) and height (cm) columns.

    Heights arrive in centimetres (survey convention) and are converted to
    metres internally. The result is missing wherever either input is.
    """
    if not isinstance(weight.kind, Numeric) or not isinstance(height.kind, Numeric):
        raise ValueError("derive_bmi expects numeric weight and height columns")
    mask = weight.mask | height.mask
    h = height.values
    bad = (~height.mask) & ~(h > 0)
    if bad.any():
        raise ValueError(f"non-positive height at data row {int(np.flatnonzero(bad)[0]) + 1}")
    with np.errstate(invalid="ignore", divide="ignore"):
        values = weight.values / (h / 100.0) ** 2
    values = np.where(mask, np.nan, values)
    return Column(name, Numeric(), values, mask)


def reverse_code(col: Column) -> Column:
    """Reflect an ordinal column about its scale midpoint: v -> min+max-v."""
    if not isinstance(col.kind, Ordinal):
        raise ValueError(f"reverse_code expects an ordinal column, got {col.kind}")
    lo, hi = col.kind.levels[0], col.kind.levels[-1]
    flipped = np.where(col.mask, np.nan, lo + hi - col.values)
    levels = tuple(sorted(lo + hi - v for v in col.kind.levels))
    return Column(col.name, Ordinal(levels), flipped, col.mask)


def missingness_summary(t: DataTable, response: str | None = None) -> MissingReport:
    """Per-column and total missing-cell counts for a table."""
    per_column = {c.name: int(c.mask.sum()) for c in t.columns}
    rows_missing = None
    if response is not None:
        rows_missing = int(t.mask(response).sum())
    return MissingReport(per_column, sum(per_column.values()), rows_missing)


def drop_missing_response(t: DataTable, response: str) -> DataTable:
    """Remove rows whose response cell is missing; keep all other missingness."""
    col = t.column(response)
    if not isinstance(col.kind, Ordinal):
        raise ValueError(f"response column {response!r} must be ordinal")
    keep = ~col.mask
    if not keep.any():
        raise ValueError("every response value is missing: empty analysis set")
    if keep.all():
        return t
    return t.select_rows(keep)
