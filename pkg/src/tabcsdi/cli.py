"""Command line: ``train``, ``impute``, ``evaluate`` and ``benchmark``.

Run configurations are YAML files; relative paths inside them resolve against
the directory of the config file. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import torch
import yaml

from .baselines import MeanMode
from .data import MaskedTable, NormalizationParams, fit_apply_minmax, load_csv, load_schema
from .denoiser import DenoiserConfig
from .encoders import Scheme
from .evaluation import MetricsReport, format_table, run_experiment
from .model import DiffusionConfig, TabCSDI, TrainingConfig

log = logging.getLogger("tabcsdi")

IMPUTERS = ("mean_mode", "tabcsdi")


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, given: dict, allowed: Sequence[str]) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _build(cls, section: str, raw: dict | None):
    raw = dict(raw or {})
    _reject_unknown(section, raw, [f.name for f in fields(cls)])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass
class DatasetConfig:
    csv: Path
    schema: Path
    missing: str | list[str] | None = None


@dataclass
class MethodConfig:
    """One imputer entry of a benchmark."""

    imputer: str = "tabcsdi"
    encoding: str = "onehot"
    label: str | None = None

    def __post_init__(self) -> None:
        if self.imputer not in IMPUTERS:
            raise ConfigError(f"imputer must be one of {IMPUTERS}, got {self.imputer!r}")
        try:
            Scheme.parse(self.encoding)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return "mean_mode" if self.imputer == "mean_mode" else f"tabcsdi/{Scheme.parse(self.encoding).value}"


@dataclass
class RunConfig:
    dataset: DatasetConfig
    name: str = "run"
    split: float = 0.8
    mcar_rate: float = 0.2
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    imputer: str = "tabcsdi"
    encoding: str = "onehot"
    embed_dim: int = 8
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    benchmark: list[MethodConfig] = field(default_factory=list)
    output_dir: Path = Path("runs")

    def __post_init__(self) -> None:
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must be in (0, 1), got {self.split}")
        if not 0.0 <= self.mcar_rate <= 1.0:
            raise ConfigError(f"mcar_rate must be in [0, 1], got {self.mcar_rate}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        MethodConfig(self.imputer, self.encoding)
        if self.training.epochs is not None and self.training.epochs < 1:
            raise ConfigError("training.epochs must be >= 1")
        if self.training.lr <= 0:
            raise ConfigError("training.lr must be positive")

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "RunConfig":
        raw = dict(raw)
        _reject_unknown("config", raw, [f.name for f in fields(cls)])
        if "dataset" not in raw:
            raise ConfigError("config needs a dataset section")
        ds = _build(DatasetConfig, "dataset", raw.pop("dataset"))
        ds.csv = (base / ds.csv).resolve()
        ds.schema = (base / ds.schema).resolve()
        for p in (ds.csv, ds.schema):
            if not p.exists():
                raise ConfigError(f"path does not exist: {p}")
        kw: dict[str, Any] = {"dataset": ds}
        kw["denoiser"] = _build(DenoiserConfig, "denoiser", raw.pop("denoiser", None))
        kw["diffusion"] = _build(DiffusionConfig, "diffusion", raw.pop("diffusion", None))
        kw["training"] = _build(TrainingConfig, "training", raw.pop("training", None))
        kw["benchmark"] = [
            _build(MethodConfig, "benchmark entry", m if isinstance(m, dict) else {"imputer": m})
            for m in raw.pop("benchmark", [])
        ]
        if "output_dir" in raw:
            kw["output_dir"] = (base / raw.pop("output_dir")).resolve()
        else:
            kw["output_dir"] = (base / "runs").resolve()
        if "seeds" in raw:
            kw["seeds"] = [int(s) for s in raw.pop("seeds")]
        kw.update(raw)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = {k: str(v) if isinstance(v, Path) else v for k, v in d["dataset"].items()}
        d["output_dir"] = str(self.output_dir)
        return d

    @property
    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def methods(self) -> list[MethodConfig]:
        if self.benchmark:
            return self.benchmark
        return [MethodConfig("mean_mode"), MethodConfig("tabcsdi", self.encoding)]


# ---------------------------------------------------------------------------
# helpers


def missing_sentinel(cfg: RunConfig) -> str | list[str] | None:
    """The dataset's missing-value token: config override, else the schema file's."""
    if cfg.dataset.missing is not None:
        return cfg.dataset.missing
    return load_schema(cfg.dataset.schema)[1]


def load_dataset(cfg: RunConfig) -> MaskedTable:
    schema, _ = load_schema(cfg.dataset.schema)
    return load_csv(cfg.dataset.csv, schema, missing=missing_sentinel(cfg))


def make_factory(cfg: RunConfig, method: MethodConfig):
    if method.imputer == "mean_mode":
        return lambda schema, seed: MeanMode()

    def factory(schema, seed):
        return TabCSDI(
            schema,
            scheme=method.encoding,
            denoiser=cfg.denoiser,
            diffusion=cfg.diffusion,
            training=cfg.training,
            embed_dim=cfg.embed_dim,
            seed=seed,
        )

    return factory


def _method_config(cfg: RunConfig, method: MethodConfig) -> dict:
    d = {"run": cfg.name, "run_fingerprint": cfg.fingerprint, "imputer": method.imputer}
    if method.imputer == "tabcsdi":
        d.update(
            encoding=Scheme.parse(method.encoding).value,
            embed_dim=cfg.embed_dim,
            denoiser=asdict(cfg.denoiser),
            diffusion=asdict(cfg.diffusion),
            training=asdict(cfg.training),
        )
    return d


def evaluate_method(cfg: RunConfig, method: MethodConfig, table: MaskedTable | None = None) -> MetricsReport:
    table = load_dataset(cfg) if table is None else table
    return run_experiment(
        table,
        make_factory(cfg, method),
        cfg.seeds,
        mcar_rate=cfg.mcar_rate,
        train_fraction=cfg.split,
        label=method.name,
        config=_method_config(cfg, method),
    )


def _slug(name: str) -> str:
    return name.replace("/", "_")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> Path:
    """Train on every observed cell of the dataset and write ``model.pt`` plus a loss log."""
    table = load_dataset(cfg)
    normalized, params = fit_apply_minmax(table)
    seed = cfg.seeds[0]
    model = TabCSDI(
        tuple(table.schema),
        scheme=cfg.encoding,
        denoiser=cfg.denoiser,
        diffusion=cfg.diffusion,
        training=cfg.training,
        embed_dim=cfg.embed_dim,
        seed=seed,
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs, _ = cfg.training.resolved(table.n_rows)
    with open(out / "train_log.jsonl", "w") as fh:

        def on_epoch(epoch: int, loss: float) -> None:
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
            fh.flush()
            log.info("epoch %d/%d loss %.5f", epoch + 1, epochs, loss)

        model.fit(normalized, on_epoch=on_epoch)
    path = out / "model.pt"
    extra = {"fingerprint": cfg.fingerprint, "seeds": [seed], "missing": missing_sentinel(cfg)}
    model.save(path, normalization=params, extra=extra)
    return path


def _format_number(x: float) -> str:
    return repr(float(x))


def cmd_impute(checkpoint: str | Path, csv_in: str | Path, csv_out: str | Path) -> Path:
    """Complete a CSV with a trained checkpoint; observed cells are copied through verbatim."""
    model, header = TabCSDI.load(checkpoint)
    schema = model.schema
    with open(csv_in, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{csv_in}: empty file")
    names = [h.strip() for h in rows[0]]
    expected = [c.name for c in schema]
    if names != expected:
        missing = [n for n in expected if n not in names]
        extra = [n for n in names if n not in expected]
        moved = [n for i, n in enumerate(names) if i < len(expected) and n in expected and expected[i] != n]
        raise ValueError(
            f"schema mismatch with checkpoint {header['schema_hash']}: missing={missing} unexpected={extra} reordered={moved}"
        )
    missing_token = header.get("missing")
    table = load_csv(csv_in, schema, missing=missing_token)
    params = NormalizationParams.from_dict(header["normalization"])
    normalized, _ = fit_apply_minmax(table, params)
    imputed = params.invert(model.impute(normalized))
    out_rows = [rows[0]]
    body = [r for r in rows[1:] if r]
    for i, raw in enumerate(body):
        new = list(raw)
        for j, col in enumerate(schema):
            if table.observed_mask[i, j]:
                continue
            if col.is_categorical:
                new[j] = col.category_labels[int(imputed[i, j])]
            else:
                new[j] = _format_number(imputed[i, j])
        out_rows.append(new)
    with open(csv_out, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(out_rows)
    meta = {"checkpoint": str(checkpoint), "fingerprint": header.get("fingerprint"), "seeds": header.get("seeds"),
            "schema_hash": header["schema_hash"], "imputed_cells": int((~table.observed_mask).sum())}
    Path(str(csv_out) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return Path(csv_out)


def _write_reports(cfg: RunConfig, reports: list[MetricsReport], stem: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        rep.write(out / f"{stem}_{_slug(rep.label)}.jsonl")
    table_text = format_table(reports)
    header = f"# {cfg.name}  fingerprint={cfg.fingerprint}  seeds={cfg.seeds}  mcar_rate={cfg.mcar_rate}  split={cfg.split}\n"
    path = out / f"{stem}.txt"
    path.write_text(header + table_text + "\n")
    return path


def cmd_evaluate(cfg: RunConfig) -> list[MetricsReport]:
    method = MethodConfig(cfg.imputer, cfg.encoding)
    reports = [evaluate_method(cfg, method)]
    _write_reports(cfg, reports, "evaluate")
    return reports


def cmd_benchmark(cfg: RunConfig) -> list[MetricsReport]:
    table = load_dataset(cfg)
    reports = [evaluate_method(cfg, m, table) for m in cfg.methods()]
    _write_reports(cfg, reports, "benchmark")
    return reports


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabcsdi", description="Diffusion-based imputation for tabular data")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate", "benchmark"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, help="replace the configured seed list with this single seed")
    p = sub.add_parser("impute")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--in", dest="csv_in", required=True, type=Path)
    p.add_argument("--out", dest="csv_out", required=True, type=Path)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "impute":
            out = cmd_impute(args.checkpoint, args.csv_in, args.csv_out)
            print(out)
            return 0
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seeds = [args.seed]
        if args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "evaluate":
            print(format_table(cmd_evaluate(cfg)))
        else:
            print(format_table(cmd_benchmark(cfg)))
        return 0
    except Exception as exc:  # noqa: BLE001 - one-line machine-parsable failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
