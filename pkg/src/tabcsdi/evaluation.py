"""Imputation metrics, the repeated split/mask/fit/score protocol and reports."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import MaskedTable, fit_apply_minmax, inject_mcar, split_rows

log = logging.getLogger(__name__)


class Imputer(Protocol):
    def fit(self, train: MaskedTable) -> object: ...

    def impute(self, table: MaskedTable) -> np.ndarray: ...


#: builds a fresh imputer for one repetition from (schema, model seed)
ImputerFactory = Callable[[tuple, int], Imputer]


def _select(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, truth = pred[mask], truth[mask]
    if pred.size == 0:
        raise ValueError("no target cells to score")
    return pred, truth


def rmse(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred, truth = _select(pred, truth, mask)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def error_rate(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred, truth = _select(pred, truth, mask)
    return float(np.mean(np.rint(pred) != np.rint(truth)))


@dataclass
class Repetition:
    seed: int
    rmse: float | None
    error_rate: float | None
    per_feature: dict[str, float]
    n_numeric_targets: int
    n_categorical_targets: int
    mask_fingerprint: str
    seconds: float


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else None
    return mean, std


@dataclass
class MetricsReport:
    label: str
    config: dict
    repetitions: list[Repetition] = field(default_factory=list)

    @property
    def rmse(self) -> tuple[float | None, float | None]:
        return _mean_std([r.rmse for r in self.repetitions if r.rmse is not None])

    @property
    def error_rate(self) -> tuple[float | None, float | None]:
        return _mean_std([r.error_rate for r in self.repetitions if r.error_rate is not None])

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16]

    def aggregate(self) -> dict:
        (rm, rs), (em, es) = self.rmse, self.error_rate
        return {
            "label": self.label,
            "fingerprint": self.fingerprint,
            "seeds": [r.seed for r in self.repetitions],
            "rmse_mean": rm,
            "rmse_std": rs,
            "error_rate_mean": em,
            "error_rate_std": es,
        }

    def to_records(self) -> list[dict]:
        """One record per repetition followed by the aggregate record."""
        recs = [{"kind": "repetition", "label": self.label, "fingerprint": self.fingerprint, **asdict(r)} for r in self.repetitions]
        recs.append({"kind": "aggregate", "config": self.config, **self.aggregate()})
        return recs

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "MetricsReport":
        reps, agg = [], None
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec.pop("kind") == "aggregate":
                    agg = rec
                else:
                    rec.pop("label"), rec.pop("fingerprint")
                    reps.append(Repetition(**rec))
        if agg is None:
            raise ValueError(f"{path}: no aggregate record")
        return cls(agg["label"], agg["config"], reps)


def format_cell(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "-"
    return f"{mean:.3f} ({std:.3f})" if std is not None else f"{mean:.3f}"


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table in ``mean (std)`` style, one row per report."""
    rows = [("Method", "RMSE", "Error rate")]
    rows += [(r.label, format_cell(*r.rmse), format_cell(*r.error_rate)) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def derive_seeds(seed: int) -> dict[str, int]:
    """Independent split/mask/model seeds derived from one repetition seed."""
    names = ("split", "mask_train", "mask_test", "model")
    states = np.random.SeedSequence(seed).generate_state(len(names))
    return {n: int(s) for n, s in zip(names, states)}


def mask_fingerprint(table: MaskedTable) -> str:
    return hashlib.sha256(np.packbits(table.target_mask).tobytes()).hexdigest()[:16]


def prepare(table: MaskedTable, seed: int, mcar_rate: float, train_fraction: float) -> tuple[MaskedTable, MaskedTable]:
    """Split, hide MCAR cells in both halves and min-max scale with train-only statistics."""
    s = derive_seeds(seed)
    train, test = split_rows(table, train_fraction, s["split"])
    train = inject_mcar(train, mcar_rate, s["mask_train"])
    test = inject_mcar(test, mcar_rate, s["mask_test"])
    train, params = fit_apply_minmax(train)
    test, _ = fit_apply_minmax(test, params)
    return train, test


def score(test: MaskedTable, imputed: np.ndarray) -> tuple[float | None, float | None, dict[str, float]]:
    cat = test.categorical_columns
    tgt = test.target_mask
    per_feature = {}
    for j, col in enumerate(test.schema):
        if tgt[:, j].any():
            fn = error_rate if col.is_categorical else rmse
            per_feature[col.name] = fn(imputed[:, j], test.ground_truth[:, j], tgt[:, j])
    num_mask = tgt & ~cat
    cat_mask = tgt & cat
    pooled_rmse = rmse(imputed, test.ground_truth, num_mask) if num_mask.any() else None
    pooled_err = error_rate(imputed, test.ground_truth, cat_mask) if cat_mask.any() else None
    return pooled_rmse, pooled_err, per_feature


def run_experiment(
    table: MaskedTable,
    make_imputer: ImputerFactory,
    seeds: Sequence[int],
    *,
    mcar_rate: float = 0.2,
    train_fraction: float = 0.8,
    label: str = "imputer",
    config: dict | None = None,
) -> MetricsReport:
    """For each seed: split -> inject MCAR -> fit on train -> impute test -> score held-out cells."""
    if not seeds:
        raise ValueError("need at least one seed")
    cfg = {"seeds": list(seeds), "mcar_rate": mcar_rate, "train_fraction": train_fraction, **(config or {})}
    report = MetricsReport(label, cfg)
    for seed in seeds:
        start = time.perf_counter()
        try:
            train, test = prepare(table, seed, mcar_rate, train_fraction)
            imputer = make_imputer(tuple(table.schema), derive_seeds(seed)["model"])
            imputer.fit(train)
            imputed = imputer.impute(test)
            pooled_rmse, pooled_err, per_feature = score(test, imputed)
        except Exception as exc:
            raise RuntimeError(f"{label}: repetition with seed {seed} failed: {exc}") from exc
        rep = Repetition(
            seed=int(seed),
            rmse=pooled_rmse,
            error_rate=pooled_err,
            per_feature=per_feature,
            n_numeric_targets=int((test.target_mask & ~test.categorical_columns).sum()),
            n_categorical_targets=int((test.target_mask & test.categorical_columns).sum()),
            mask_fingerprint=mask_fingerprint(test),
            seconds=time.perf_counter() - start,
        )
        log.info("%s seed %d: rmse=%s err=%s (%.1fs)", label, seed, pooled_rmse, pooled_err, rep.seconds)
        report.repetitions.append(rep)
    return report
