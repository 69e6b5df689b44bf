"""Epsilon-prediction network over per-column tokens.

Each encoded column becomes a token built from (noisy value, clean
conditioning value, mask flag), plus a learned column embedding and the
diffusion-step embedding. Tokens pass through residual blocks of a
transformer encoder layer (attention across columns) followed by an MLP.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import numeric as nm


@dataclass
class DenoiserConfig:
    layers: int = 4
    channels: int = 64
    heads: int = 4
    diffusion_emb_dim: int = 128
    feature_emb_dim: int = 64
    ff_mult: int = 4
    mlp_mult: int = 2

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"denoiser {name} must be >= 1, got {value}")
        if self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.diffusion_emb_dim % 2 or self.diffusion_emb_dim < 4:
            raise ValueError("diffusion_emb_dim must be even and >= 4")


def sinusoidal_table(steps: int, dim: int) -> torch.Tensor:
    """Rows for t = 1..steps; column 2k is sin(t f_k), 2k+1 is cos(t f_k), f_k = 10^(-4k/(dim/2-1))."""
    half = dim // 2
    k = torch.arange(half, dtype=torch.float64)
    freqs = 10.0 ** (-4.0 * k / (half - 1))
    t = torch.arange(1, steps + 1, dtype=torch.float64).unsqueeze(1)
    angles = t * freqs
    table = torch.empty(steps, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles)
    return table.to(torch.get_default_dtype())


def _linear_params(fan_in: int, fan_out: int, gen: torch.Generator | None, zero: bool = False) -> tuple[nn.Parameter, nn.Parameter]:
    if zero:
        return nn.Parameter(torch.zeros(fan_in, fan_out)), nn.Parameter(torch.zeros(fan_out))
    bound = 1.0 / math.sqrt(fan_in)
    w = (torch.rand(fan_in, fan_out, generator=gen) * 2 - 1) * bound
    b = (torch.rand(fan_out, generator=gen) * 2 - 1) * bound
    return nn.Parameter(w), nn.Parameter(b)


class Linear(nn.Module):
    def __init__(self, fan_in: int, fan_out: int, gen: torch.Generator | None = None, zero: bool = False) -> None:
        super().__init__()
        self.weight, self.bias = _linear_params(fan_in, fan_out, gen, zero)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nm.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nm.layer_norm(x, self.gain, self.shift)


class SelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int, gen: torch.Generator | None = None) -> None:
        super().__init__()
        self.heads = heads
        self.q = Linear(channels, channels, gen)
        self.k = Linear(channels, channels, gen)
        self.v = Linear(channels, channels, gen)
        self.o = Linear(channels, channels, gen)

    def weights(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (attention weights (B, H, K, K), values (B, H, K, dh))."""
        b, k, c = h.shape
        dh = c // self.heads

        def split(x: torch.Tensor) -> torch.Tensor:
            return nm.transpose(nm.reshape(x, (b, k, self.heads, dh)), 1, 2)

        q, key, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = nm.matmul(q, nm.transpose(key)) / math.sqrt(dh)
        return nm.softmax(scores), v

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, k, c = h.shape
        attn, v = self.weights(h)
        out = nm.reshape(nm.transpose(nm.matmul(attn, v), 1, 2), (b, k, c))
        return self.o(out)


class EncoderLayer(nn.Module):
    """Self-attention -> add -> norm -> feed-forward -> add -> norm."""

    def __init__(self, channels: int, heads: int, ff_mult: int, gen: torch.Generator | None = None) -> None:
        super().__init__()
        self.attn = SelfAttention(channels, heads, gen)
        self.norm1 = LayerNorm(channels)
        self.ff1 = Linear(channels, ff_mult * channels, gen)
        self.ff2 = Linear(ff_mult * channels, channels, gen)
        self.norm2 = LayerNorm(channels)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        a = self.norm1(nm.add(h, self.attn(h)))
        return self.norm2(nm.add(a, self.ff2(nm.gelu(self.ff1(a)))))


class MLP(nn.Module):
    def __init__(self, channels: int, mult: int, gen: torch.Generator | None = None) -> None:
        super().__init__()
        self.fc1 = Linear(channels, mult * channels, gen)
        self.fc2 = Linear(mult * channels, channels, gen)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc2(nm.silu(self.fc1(h)))


class ResidualBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, gen: torch.Generator | None = None) -> None:
        super().__init__()
        self.encoder = EncoderLayer(cfg.channels, cfg.heads, cfg.ff_mult, gen)
        self.mlp = MLP(cfg.channels, cfg.mlp_mult, gen)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = nm.add(h, self.encoder(h))
        return nm.add(h, self.mlp(h))


class StepEmbedding(nn.Module):
    def __init__(self, steps: int, dim: int, channels: int, gen: torch.Generator | None = None) -> None:
        super().__init__()
        self.register_buffer("table", sinusoidal_table(steps, dim), persistent=False)
        self.fc1 = Linear(dim, dim, gen)
        self.fc2 = Linear(dim, channels, gen)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = self.table[t - 1]
        return nm.silu(self.fc2(nm.silu(self.fc1(emb))))


class Denoiser(nn.Module):
    """Predicts the injected noise for every encoded column.

    ``n_features`` is the encoded width K; ``steps`` the number of diffusion
    steps the step embedding covers.
    """

    def __init__(self, n_features: int, steps: int, config: DenoiserConfig | None = None, seed: int | None = 0) -> None:
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        self.n_features = n_features
        self.steps = steps
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.input_proj = Linear(3, cfg.channels, gen)
        self.feature_embedding = nn.Parameter(torch.randn(n_features, cfg.feature_emb_dim, generator=gen))
        self.feature_proj = Linear(cfg.feature_emb_dim, cfg.channels, gen)
        self.step_embedding = StepEmbedding(steps, cfg.diffusion_emb_dim, cfg.channels, gen)
        self.blocks = nn.ModuleList([ResidualBlock(cfg, gen) for _ in range(cfg.layers)])
        self.output_proj = Linear(cfg.channels, 1, gen, zero=True)

    def tokens(self, noisy: torch.Tensor, cond_values: torch.Tensor, cond_mask: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b, k = noisy.shape
        if k != self.n_features:
            raise ValueError(f"denoiser built for {self.n_features} encoded columns, got {k}")
        if cond_values.shape != noisy.shape or cond_mask.shape != noisy.shape:
            raise nm.ShapeError(f"denoiser: input shapes {tuple(noisy.shape)}, {tuple(cond_values.shape)}, {tuple(cond_mask.shape)} differ")
        x = torch.stack([noisy, cond_values, cond_mask.to(noisy.dtype)], dim=-1)
        h = self.input_proj(x)
        h = nm.add(h, self.feature_proj(self.feature_embedding))
        return nm.add(h, self.step_embedding(t).unsqueeze(1))

    def forward(self, noisy: torch.Tensor, cond_values: torch.Tensor, cond_mask: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = self.tokens(noisy, cond_values, cond_mask, t)
        for block in self.blocks:
            h = block(h)
        return self.output_proj(h).squeeze(-1)
