"""TabCSDI imputer: encoder + denoiser + diffusion schedule with a training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import numeric
from .data import ColumnSchema, MaskedTable, NormalizationParams, schema_hash
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, build_schedule, impute, self_mask, training_loss
from .encoders import EncodingSpec, FeatureTokenizer, Scheme, encode_table

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tabcsdi-checkpoint/1"


@dataclass
class DiffusionConfig:
    steps: int = 150
    beta_min: float = 1e-4
    beta_max: float = 0.5
    n_samples: int = 50

    def __post_init__(self) -> None:
        if self.steps < 2:
            raise ValueError(f"diffusion steps must be >= 2, got {self.steps}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass
class TrainingConfig:
    epochs: int | None = None
    batch_size: int | None = None
    lr: float = 5e-4

    def resolved(self, n_rows: int) -> tuple[int, int]:
        """Epochs and batch size, filling unset values from the dataset size."""
        small = n_rows <= 5000
        epochs = self.epochs if self.epochs is not None else (1000 if small else 200)
        batch = self.batch_size if self.batch_size is not None else (64 if small else 256)
        if epochs < 1 or batch < 1:
            raise ValueError(f"epochs and batch_size must be >= 1, got {epochs}, {batch}")
        return epochs, batch


@dataclass
class TrainingHistory:
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0


class TabCSDI:
    """Conditional diffusion imputer for mixed tables in normalized space."""

    def __init__(
        self,
        schema: tuple[ColumnSchema, ...],
        scheme: str | Scheme = Scheme.ONEHOT,
        denoiser: DenoiserConfig | None = None,
        diffusion: DiffusionConfig | None = None,
        training: TrainingConfig | None = None,
        embed_dim: int = 8,
        seed: int = 0,
    ) -> None:
        self.schema = tuple(schema)
        self.spec = EncodingSpec.build(self.schema, scheme, embed_dim)
        self.denoiser_config = denoiser or DenoiserConfig()
        self.diffusion_config = diffusion or DiffusionConfig()
        self.training_config = training or TrainingConfig()
        self.seed = seed
        self.schedule: NoiseSchedule = build_schedule(
            self.diffusion_config.steps, self.diffusion_config.beta_min, self.diffusion_config.beta_max
        )
        streams = np.random.SeedSequence(seed).generate_state(3)
        init_seed, self._train_seed, self._sample_seed = (int(s) for s in streams)
        self.tokenizer: FeatureTokenizer | None = None
        if self.spec.scheme is Scheme.FT:
            self.tokenizer = FeatureTokenizer(self.schema, embed_dim, torch.Generator().manual_seed(init_seed + 1))
        self.denoiser = Denoiser(self.spec.width, self.schedule.steps, self.denoiser_config, seed=init_seed)
        self.history = TrainingHistory()

    # -- parameters -----------------------------------------------------

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        named = [(f"denoiser.{n}", p) for n, p in self.denoiser.named_parameters()]
        if self.tokenizer is not None:
            named += [(f"tokenizer.{n}", p) for n, p in self.tokenizer.named_parameters()]
        return named

    # -- training -------------------------------------------------------

    def _encoded(self, values: torch.Tensor) -> torch.Tensor:
        if self.tokenizer is None:
            return values
        return self.tokenizer(values).reshape(values.shape[0], -1)

    def fit(self, train: MaskedTable, on_epoch: Callable[[int, float], None] | None = None) -> TrainingHistory:
        if tuple(train.schema) != self.schema:
            raise ValueError("training table schema does not match the model")
        epochs, batch_size = self.training_config.resolved(train.n_rows)
        dtype = torch.get_default_dtype()
        col_of = torch.as_tensor(self.spec.column_of())
        obs_cells = torch.as_tensor(train.observed_mask)
        if self.tokenizer is None:
            data = torch.as_tensor(encode_table(train, self.spec).values, dtype=dtype)
        else:
            data = torch.as_tensor(np.where(train.observed_mask, train.values, 0.0), dtype=dtype)
        usable = torch.nonzero(obs_cells.any(1)).squeeze(1)
        if usable.numel() == 0:
            raise ValueError("training table has no observed cells")

        names, params = zip(*self.named_parameters())
        adam = numeric.Adam(params, lr=self.training_config.lr, names=names)
        gen = torch.Generator().manual_seed(self._train_seed)
        for epoch in range(epochs):
            lr = numeric.lr_at_epoch(epoch, epochs, self.training_config.lr)
            order = usable[torch.randperm(usable.numel(), generator=gen)]
            total, count = 0.0, 0
            for step, start in enumerate(range(0, order.numel(), batch_size)):
                rows = order[start : start + batch_size]
                cond_cells = self_mask(obs_cells[rows], gen)
                cond = cond_cells[:, col_of]
                target = obs_cells[rows][:, col_of] & ~cond
                if self.tokenizer is None:
                    x0 = data[rows]
                    cond_values = None
                else:
                    cond_values = self._encoded(data[rows])
                    x0 = cond_values.detach()
                loss = training_loss(x0, cond, target, self.schedule, self.denoiser, gen, cond_values=cond_values)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite training loss at epoch {epoch}, step {step}")
                grads = numeric.backward(loss, params)
                adam.step(grads, lr=lr)
                if self.tokenizer is not None:
                    self.tokenizer.clamp_()
                total += value
                count += 1
                self.history.steps += 1
            mean = total / max(count, 1)
            self.history.epoch_loss.append(mean)
            if on_epoch is not None:
                on_epoch(epoch, mean)
            log.debug("epoch %d lr %.2e loss %.5f", epoch, lr, mean)
        return self.history

    # -- inference ------------------------------------------------------

    def impute(self, table: MaskedTable, n_samples: int | None = None, seed: int | None = None) -> np.ndarray:
        """Completed (n, d) values for ``table`` in the same space it was given in."""
        if tuple(table.schema) != self.schema:
            raise ValueError("table schema does not match the model")
        n = self.diffusion_config.n_samples if n_samples is None else n_samples
        self.denoiser.eval()
        return impute(
            table,
            self.schedule,
            self.denoiser,
            self.spec,
            n_samples=n,
            seed=self._sample_seed if seed is None else seed,
            tokenizer=self.tokenizer,
        )

    # -- persistence ----------------------------------------------------

    def header(self) -> dict:
        return {
            "schema": [c.to_dict() for c in self.schema],
            "schema_hash": schema_hash(self.schema),
            "encoding": self.spec.to_dict(),
            "denoiser": asdict(self.denoiser_config),
            "diffusion": asdict(self.diffusion_config),
            "training": asdict(self.training_config),
            "seed": self.seed,
        }

    def save(self, path: str | Path, normalization: NormalizationParams | None = None, extra: dict | None = None) -> None:
        header = self.header()
        header["normalization"] = normalization.to_dict() if normalization is not None else None
        header.update(extra or {})
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "header": header,
                "denoiser": self.denoiser.state_dict(),
                "tokenizer": self.tokenizer.state_dict() if self.tokenizer is not None else None,
                "history": self.history.epoch_loss,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["TabCSDI", dict]:
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        h = blob["header"]
        schema = tuple(ColumnSchema.from_dict(c) for c in h["schema"])
        model = cls(
            schema,
            scheme=h["encoding"]["scheme"],
            denoiser=DenoiserConfig(**h["denoiser"]),
            diffusion=DiffusionConfig(**h["diffusion"]),
            training=TrainingConfig(**h["training"]),
            embed_dim=h["encoding"]["embed_dim"] or 8,
            seed=h["seed"],
        )
        model.denoiser.load_state_dict(blob["denoiser"])
        if model.tokenizer is not None:
            model.tokenizer.load_state_dict(blob["tokenizer"])
        model.history.epoch_loss = list(blob.get("history", []))
        return model, h
