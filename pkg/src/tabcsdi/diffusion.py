"""Noise schedule, forward noising, conditional training loss and the reverse sampler.

Steps are numbered 1..T throughout; arrays are stored 0-based so step ``t``
lives at index ``t - 1``. A denoiser is any callable
``(noisy, cond_values, cond_mask, t) -> eps_hat`` on (batch, K) tensors with
``t`` a (batch,) long tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import numeric
from .data import MaskedTable
from .encoders import EncodingSpec, FeatureTokenizer, decode_table, encode_table

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def sigmas(self) -> np.ndarray:
        """Posterior standard deviation; zero at t = 1."""
        ab = self.alpha_bars
        prev = np.concatenate([[1.0], ab[:-1]])
        return np.sqrt((1.0 - prev) / (1.0 - ab) * self.betas)

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}


def build_schedule(steps: int, beta_min: float = 1e-4, beta_max: float = 0.5) -> NoiseSchedule:
    """Betas interpolated linearly in square-root space from ``beta_min`` to ``beta_max``."""
    if steps < 2:
        raise ValueError(f"need at least 2 diffusion steps, got {steps}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule(np.linspace(beta_min**0.5, beta_max**0.5, steps) ** 2)


def _per_row(arr: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    vals = torch.as_tensor(arr, dtype=like.dtype)[t - 1]
    return vals.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    if isinstance(t, int):
        t = torch.full((x0.shape[0],), t, dtype=torch.long)
    ab = _per_row(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def self_mask(
    observed_mask: torch.Tensor,
    generator: torch.Generator | None = None,
    keep_ratio: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """Split observed cells into conditioning cells and training targets.

    Each row draws a keep ratio ``r ~ U[0, 1]`` and keeps every observed cell as
    conditioning with probability ``r``. A row left without targets redraws
    once, then has one random observed cell forced to be a target.
    """
    observed = observed_mask.bool()
    n, d = observed.shape

    def draw() -> torch.Tensor:
        if keep_ratio is None:
            r = torch.rand(n, 1, generator=generator)
        else:
            r = torch.as_tensor(keep_ratio, dtype=torch.get_default_dtype()).expand(n).reshape(n, 1)
        return observed & (torch.rand(n, d, generator=generator) < r)

    cond = draw()
    empty = (observed & ~cond).sum(1) == 0
    empty &= observed.any(1)
    if empty.any():
        cond[empty] = draw()[empty]
        empty = ((observed & ~cond).sum(1) == 0) & observed.any(1)
        if empty.any():
            scores = torch.rand(n, d, generator=generator).masked_fill(~observed, -1.0)
            pick = scores.argmax(1)
            rows = torch.nonzero(empty).squeeze(1)
            cond[rows, pick[rows]] = False
    return cond


def denoiser_inputs(
    x: torch.Tensor, cond_values: torch.Tensor, cond_mask: torch.Tensor, target_mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Model input channels: noisy values on targets, clean values on conditioning cells, the mask."""
    zero = x.new_zeros(())
    noisy = torch.where(target_mask, x, zero)
    clean = torch.where(cond_mask, cond_values, zero)
    return noisy, clean, cond_mask.to(x.dtype)


def training_loss(
    x0: torch.Tensor,
    cond_mask: torch.Tensor,
    target_mask: torch.Tensor,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    generator: torch.Generator | None = None,
    *,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    cond_values: torch.Tensor | None = None,
) -> torch.Tensor:
    """Masked epsilon-prediction loss over target cells.

    ``cond_values`` defaults to ``x0``; passing a separate tensor lets the
    caller route gradients into the conditioning channel only.
    """
    cond_mask = cond_mask.bool()
    target_mask = target_mask.bool()
    if bool((cond_mask & target_mask).any()):
        raise ValueError("conditioning and target cells overlap")
    if int(target_mask.sum()) == 0:
        raise ValueError("batch has no target cells")
    b = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.steps + 1, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    known = cond_mask | target_mask
    x0 = torch.where(known, x0, x0.new_zeros(()))
    cond_values = x0 if cond_values is None else cond_values
    xt = q_sample(x0, t, eps, schedule)
    noisy, clean, mask = denoiser_inputs(xt, cond_values, cond_mask, target_mask)
    eps_hat = denoiser(noisy, clean, mask, t)
    return numeric.masked_mse(eps_hat, eps, target_mask.to(x0.dtype))


def p_sample_step(
    xt: torch.Tensor,
    t: int,
    cond_values: torch.Tensor,
    cond_mask: torch.Tensor,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}``; conditioning cells are returned untouched."""
    cond_mask = cond_mask.bool()
    target = ~cond_mask
    steps = torch.full((xt.shape[0],), t, dtype=torch.long)
    noisy, clean, mask = denoiser_inputs(xt, cond_values, cond_mask, target)
    eps_hat = denoiser(noisy, clean, mask, steps)
    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])
    ab = float(schedule.alpha_bars[t - 1])
    mean = (xt - beta / (1.0 - ab) ** 0.5 * eps_hat) / alpha**0.5
    if t > 1:
        if noise is None:
            noise = torch.randn(xt.shape, generator=generator, dtype=xt.dtype)
        mean = mean + float(schedule.sigmas[t - 1]) * noise
    return torch.where(cond_mask, cond_values, mean)


@torch.no_grad()
def sample_chain(
    cond_values: torch.Tensor,
    cond_mask: torch.Tensor,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    seeds: Sequence[int],
) -> torch.Tensor:
    """Run one full reverse chain per seed, all seeds batched together -> (S, B, K)."""
    b, k = cond_values.shape
    s = len(seeds)
    gens = [torch.Generator().manual_seed(int(sd)) for sd in seeds]

    def noise() -> torch.Tensor:
        return torch.cat([torch.randn(b, k, generator=g, dtype=cond_values.dtype) for g in gens])

    cond_rep = cond_values.repeat(s, 1)
    mask_rep = cond_mask.bool().repeat(s, 1)
    x = torch.where(mask_rep, cond_rep, noise())
    for t in range(schedule.steps, 0, -1):
        z = noise() if t > 1 else None
        x = p_sample_step(x, t, cond_rep, mask_rep, schedule, denoiser, noise=z)
    return x.reshape(s, b, k)


def _chunk_seeds(seed: int, n_samples: int, chunk: int) -> list[int]:
    ss = np.random.SeedSequence([seed, chunk])
    return [int(x) for x in ss.generate_state(n_samples, dtype=np.uint32)]


def impute(
    table: MaskedTable,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    spec: EncodingSpec,
    n_samples: int = 50,
    seed: int = 0,
    tokenizer: FeatureTokenizer | None = None,
    token_budget: int = 1 << 16,
) -> np.ndarray:
    """Fill every unobserved cell of ``table``; observed cells are returned as-is.

    Each encoded cell is aggregated by the median over ``n_samples`` reverse
    chains and then decoded back to table values. Rows are processed in chunks
    whose size depends only on ``token_budget``, so results are reproducible
    for a fixed configuration.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    enc = encode_table(table, spec, tokenizer)
    dtype = torch.get_default_dtype()
    cond_values = torch.as_tensor(enc.values, dtype=dtype)
    cond_mask = torch.as_tensor(enc.observed_mask)
    out = enc.values.copy()
    needs = ~table.observed_mask.all(axis=1)
    rows = np.flatnonzero(needs)
    per_chunk = max(1, token_budget // (n_samples * spec.width))
    for ci, start in enumerate(range(0, len(rows), per_chunk)):
        idx = torch.as_tensor(rows[start : start + per_chunk])
        samples = sample_chain(cond_values[idx], cond_mask[idx], schedule, denoiser, _chunk_seeds(seed, n_samples, ci))
        out[idx.numpy()] = np.median(samples.numpy().astype(np.float64), axis=0)
    decoded = decode_table(out, spec, tokenizer)
    return table.filled(decoded)
