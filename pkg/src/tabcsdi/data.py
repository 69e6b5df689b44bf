"""CSV ingestion, column schemas, min-max scaling, MCAR masking and row splits."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import yaml

Kind = Literal["numerical", "categorical"]
SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: Kind
    category_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("numerical", "categorical"):
            raise ValueError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.category_labels) < 2:
                raise ValueError(f"column {self.name!r}: categorical needs >= 2 labels")
            if len(set(self.category_labels)) != len(self.category_labels):
                raise ValueError(f"column {self.name!r}: duplicate category labels")
        elif self.category_labels:
            raise ValueError(f"column {self.name!r}: numerical column cannot list categories")

    @property
    def cardinality(self) -> int:
        return len(self.category_labels)

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            d["categories"] = list(self.category_labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        unknown = set(d) - {"name", "kind", "categories"}
        if unknown:
            raise ValueError(f"schema column has unknown keys {sorted(unknown)}")
        return cls(str(d["name"]), d["kind"], tuple(str(c) for c in d.get("categories", ())))


Schema = tuple[ColumnSchema, ...]


def load_schema(path: str | Path) -> tuple[Schema, str | None]:
    """Read a YAML schema file. Returns the columns and the optional missing sentinel."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    unknown = set(doc) - {"columns", "missing"}
    if unknown:
        raise ValueError(f"{path}: unknown schema keys {sorted(unknown)}")
    cols = tuple(ColumnSchema.from_dict(c) for c in doc["columns"])
    return cols, doc.get("missing")


def schema_hash(schema: Sequence[ColumnSchema]) -> str:
    blob = json.dumps([c.to_dict() for c in schema], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MaskedTable:
    """A table in model space.

    ``values`` holds NaN wherever ``observed_mask`` is False. Categorical
    entries are category indices stored as floats. ``ground_truth`` carries the
    held-out value of every ``target_mask`` cell and NaN elsewhere.
    """

    schema: Schema
    values: np.ndarray
    observed_mask: np.ndarray
    target_mask: np.ndarray = None  # type: ignore[assignment]
    ground_truth: np.ndarray = None  # type: ignore[assignment]
    normalized: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed_mask = np.asarray(self.observed_mask, dtype=bool)
        if self.target_mask is None:
            self.target_mask = np.zeros_like(self.observed_mask)
        if self.ground_truth is None:
            self.ground_truth = np.full_like(self.values, np.nan)
        self.target_mask = np.asarray(self.target_mask, dtype=bool)
        n, d = self.values.shape
        if d != len(self.schema):
            raise ValueError(f"table has {d} columns but schema lists {len(self.schema)}")
        for arr in (self.observed_mask, self.target_mask, self.ground_truth):
            if arr.shape != (n, d):
                raise ValueError(f"mask/truth shape {arr.shape} does not match values {(n, d)}")
        if np.any(self.observed_mask & self.target_mask):
            raise ValueError("a cell cannot be both observed and a target")
        self.values = np.where(self.observed_mask, self.values, np.nan)

    @classmethod
    def from_array(cls, values: np.ndarray, schema: Sequence[ColumnSchema], **kw) -> "MaskedTable":
        values = np.asarray(values, dtype=np.float64)
        return cls(tuple(schema), values, ~np.isnan(values), **kw)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def categorical_columns(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.schema], dtype=bool)

    def take(self, rows: np.ndarray) -> "MaskedTable":
        return replace(
            self,
            values=self.values[rows],
            observed_mask=self.observed_mask[rows],
            target_mask=self.target_mask[rows],
            ground_truth=self.ground_truth[rows],
        )

    def filled(self, imputed: np.ndarray) -> np.ndarray:
        """Observed values where present, ``imputed`` elsewhere."""
        return np.where(self.observed_mask, self.values, imputed)


def load_csv(path: str | Path, schema: Sequence[ColumnSchema], missing: str | Sequence[str] | None = "") -> MaskedTable:
    """Load a headered CSV. Cells equal to a missing sentinel (and empty cells) are unobserved."""
    schema = tuple(schema)
    sentinels = {""}
    if missing is not None:
        sentinels |= {missing} if isinstance(missing, str) else set(missing)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        expected = [c.name for c in schema]
        if header != expected:
            raise ValueError(f"{path}: header {header} does not match schema columns {expected}")
        label_index = [
            {lab: i for i, lab in enumerate(c.category_labels)} if c.is_categorical else None for c in schema
        ]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(schema):
                raise ValueError(f"{path}:{line_no}: expected {len(schema)} fields, got {len(row)}")
            parsed = []
            for col, lookup, cell in zip(schema, label_index, row):
                cell = cell.strip()
                if cell in sentinels:
                    parsed.append(np.nan)
                elif lookup is not None:
                    if cell not in lookup:
                        raise ValueError(f"{path}:{line_no}: unknown label {cell!r} in column {col.name!r}")
                    parsed.append(float(lookup[cell]))
                else:
                    try:
                        parsed.append(float(cell))
                    except ValueError:
                        raise ValueError(f"{path}:{line_no}: non-numeric value {cell!r} in column {col.name!r}") from None
            rows.append(parsed)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(schema))
    return MaskedTable.from_array(values, schema)


@dataclass
class NormalizationParams:
    """Per-column min/max; categorical columns carry (0, 1) and are left untouched."""

    mins: np.ndarray
    maxs: np.ndarray
    numeric: np.ndarray = field(repr=False)

    @property
    def scale(self) -> np.ndarray:
        span = self.maxs - self.mins
        return np.where(span > 0, span, 1.0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=np.float64, copy=True)
        num = self.numeric
        span = self.maxs[num] - self.mins[num]
        scaled = (out[:, num] - self.mins[num]) / np.where(span > 0, span, 1.0)
        out[:, num] = np.where(span > 0, scaled, np.where(np.isnan(scaled), np.nan, 0.0))
        return out

    def invert(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=np.float64, copy=True)
        num = self.numeric
        out[:, num] = out[:, num] * self.scale[num] + self.mins[num]
        return out

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist(), "numeric": self.numeric.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(np.array(d["mins"], dtype=np.float64), np.array(d["maxs"], dtype=np.float64), np.array(d["numeric"], dtype=bool))


def fit_minmax(table: MaskedTable) -> NormalizationParams:
    numeric = ~table.categorical_columns
    mins = np.zeros(table.n_cols)
    maxs = np.ones(table.n_cols)
    for j in np.flatnonzero(numeric):
        col = table.values[table.observed_mask[:, j], j]
        if col.size:
            mins[j], maxs[j] = col.min(), col.max()
        else:
            mins[j], maxs[j] = 0.0, 0.0
    return NormalizationParams(mins, maxs, numeric)


def fit_apply_minmax(table: MaskedTable, params: NormalizationParams | None = None) -> tuple[MaskedTable, NormalizationParams]:
    """Scale numerical columns to [0, 1] using ``params`` or statistics fitted on ``table``.

    A constant column maps to 0. Ground-truth values are scaled with the same
    parameters so that metrics live in normalized space.
    """
    if table.normalized:
        raise ValueError("table is already normalized")
    if params is None:
        params = fit_minmax(table)
    return (
        replace(table, values=params.apply(table.values), ground_truth=params.apply(table.ground_truth), normalized=True),
        params,
    )


def inject_mcar(table: MaskedTable, rate: float, seed: SeedLike = None) -> MaskedTable:
    """Hide each observed cell independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"MCAR rate must be in [0, 1], got {rate}")
    rng = as_rng(seed)
    hide = (rng.random(table.values.shape) < rate) & table.observed_mask
    truth = np.where(hide, table.values, table.ground_truth)
    return replace(
        table,
        observed_mask=table.observed_mask & ~hide,
        target_mask=table.target_mask | hide,
        ground_truth=truth,
        values=np.where(hide, np.nan, table.values),
    )


def split_rows(table: MaskedTable, train_fraction: float, seed: SeedLike = None) -> tuple[MaskedTable, MaskedTable]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = table.n_rows
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} rows at {train_fraction} leaves an empty side")
    perm = as_rng(seed).permutation(n)
    return table.take(np.sort(perm[:n_train])), table.take(np.sort(perm[n_train:]))
