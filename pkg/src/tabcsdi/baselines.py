"""Mean / mode imputation baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MaskedTable, Schema


@dataclass
class MeanModeModel:
    schema: Schema
    statistics: np.ndarray

    def impute(self, table: MaskedTable) -> np.ndarray:
        return transform(self, table)


def fit(train: MaskedTable) -> MeanModeModel:
    """Column means (numerical) and modes (categorical, ties to the lowest index) over observed cells."""
    stats = np.empty(train.n_cols)
    for j, col in enumerate(train.schema):
        observed = train.values[train.observed_mask[:, j], j]
        if observed.size == 0:
            raise ValueError(f"column {col.name!r} has no observed training values")
        if col.is_categorical:
            stats[j] = np.argmax(np.bincount(observed.astype(int), minlength=col.cardinality))
        else:
            stats[j] = observed.mean()
    return MeanModeModel(tuple(train.schema), stats)


def transform(model: MeanModeModel, table: MaskedTable) -> np.ndarray:
    if tuple(table.schema) != model.schema:
        raise ValueError("table schema does not match the fitted baseline")
    return table.filled(np.broadcast_to(model.statistics, table.values.shape))


class MeanMode:
    """Imputer-protocol wrapper: ``fit`` then ``impute``."""

    def __init__(self) -> None:
        self.model: MeanModeModel | None = None

    def fit(self, train: MaskedTable) -> "MeanMode":
        self.model = fit(train)
        return self

    def impute(self, table: MaskedTable) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("MeanMode.impute called before fit")
        return transform(self.model, table)
