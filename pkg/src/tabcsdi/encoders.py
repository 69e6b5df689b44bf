"""Categorical handling schemes: one-hot, analog bits and the feature tokenizer.

Every scheme maps a table into a real matrix the diffusion model works on and
recovers table values from (noisy) model output. One-hot and analog bits
leave numerical columns untouched; the feature tokenizer turns every column
into an ``embed_dim``-wide token.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import ColumnSchema, MaskedTable

#: division-safety bound for numerical tokenizer weights
WEIGHT_FLOOR = 0.05


class Scheme(str, Enum):
    ONEHOT = "onehot"
    ANALOG_BITS = "analog_bits"
    FT = "ft"

    @classmethod
    def parse(cls, value: "str | Scheme") -> "Scheme":
        if isinstance(value, Scheme):
            return value
        aliases = {"feature_tokenizer": "ft", "one-hot": "onehot", "analog": "analog_bits"}
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ValueError(f"unknown encoding scheme {value!r}; expected onehot, analog_bits or ft") from None


# ---------------------------------------------------------------------------
# single-cell codecs


def onehot_width(k: int) -> int:
    return 1 if k == 2 else k


def analog_bits_width(k: int) -> int:
    if k < 2:
        raise ValueError(f"cardinality must be >= 2, got {k}")
    return max(1, math.ceil(math.log2(k)))


def _check_index(index: int, k: int) -> None:
    if k < 2:
        raise ValueError(f"cardinality must be >= 2, got {k}")
    if not 0 <= index < k:
        raise ValueError(f"category index {index} out of range for {k} categories")


def encode_onehot(index: int, k: int) -> np.ndarray:
    """±1 one-hot code; a binary column collapses to a single sign column."""
    _check_index(index, k)
    if k == 2:
        return np.array([1.0 if index == 1 else -1.0])
    out = -np.ones(k)
    out[index] = 1.0
    return out


def decode_onehot(v: Sequence[float], k: int) -> int:
    v = np.asarray(v, dtype=np.float64)
    if k == 2:
        return int(v[0] > 0)
    return int(np.argmax(v))


def encode_analog_bits(index: int, k: int) -> np.ndarray:
    """MSB-first binary code of ``index`` with bit 1 -> +1 and bit 0 -> -1."""
    _check_index(index, k)
    w = analog_bits_width(k)
    bits = [(index >> (w - 1 - b)) & 1 for b in range(w)]
    return np.array([1.0 if bit else -1.0 for bit in bits])


@functools.lru_cache(maxsize=None)
def _snap_table(k: int) -> np.ndarray:
    """For every code of the column's width, the valid index it decodes to."""
    w = analog_bits_width(k)
    codes = np.arange(2**w)
    valid = np.arange(k)
    hamming = np.array([[bin(int(c) ^ int(v)).count("1") for v in valid] for c in codes])
    table = np.argmin(hamming, axis=1)
    table.setflags(write=False)
    return table


def decode_analog_bits(v: Sequence[float], k: int) -> int:
    v = np.asarray(v, dtype=np.float64)
    code = 0
    for x in v:
        code = (code << 1) | int(x > 0)
    if code < k:
        return code
    return int(_snap_table(k)[code])


def ft_decode_numeric(token: Sequence[float], weight: Sequence[float]) -> float:
    return float(np.mean(np.asarray(token, dtype=np.float64) / np.asarray(weight, dtype=np.float64)))


def ft_decode_categorical(token: Sequence[float], embeddings: np.ndarray) -> int:
    """Index of the nearest embedding (Euclidean); ties go to the lowest index."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] < 2:
        raise ValueError("need at least two embeddings to decode a category")
    dist = np.linalg.norm(embeddings - np.asarray(token, dtype=np.float64), axis=1)
    return int(np.argmin(dist))


# ---------------------------------------------------------------------------
# tokenizer parameters


def _signed_uniform(shape: tuple[int, ...], generator: torch.Generator | None) -> torch.Tensor:
    mag = WEIGHT_FLOOR + (1.0 - WEIGHT_FLOOR) * torch.rand(shape, generator=generator)
    sign = torch.where(torch.rand(shape, generator=generator) < 0.5, -1.0, 1.0)
    return mag * sign


class FeatureTokenizer(nn.Module):
    """Per-column tokens: ``x * W_j`` for numerical columns, a lookup row for categorical ones.

    Numerical tokens carry no bias, so dividing a token by ``W_j`` recovers the
    value exactly.
    """

    def __init__(self, schema: Sequence[ColumnSchema], embed_dim: int = 8, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.schema = tuple(schema)
        self.embed_dim = embed_dim
        self.numeric_idx = [j for j, c in enumerate(self.schema) if not c.is_categorical]
        self.categorical_idx = [j for j, c in enumerate(self.schema) if c.is_categorical]
        self.num_weight = nn.Parameter(_signed_uniform((len(self.numeric_idx), embed_dim), generator))
        self.cat_embeddings = nn.ParameterList(
            [nn.Parameter(_signed_uniform((self.schema[j].cardinality, embed_dim), generator)) for j in self.categorical_idx]
        )

    def clamp_(self) -> None:
        """Push numerical weights back outside (-WEIGHT_FLOOR, WEIGHT_FLOOR)."""
        with torch.no_grad():
            w = self.num_weight
            sign = torch.where(w < 0, -1.0, 1.0).to(w.dtype)
            w.copy_(sign * w.abs().clamp_min(WEIGHT_FLOOR))

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """(n, d) table values with no NaNs -> (n, d, embed_dim) tokens."""
        n, d = values.shape
        if d != len(self.schema):
            raise ValueError(f"tokenizer expects {len(self.schema)} columns, got {d}")
        tokens = values.new_zeros(n, d, self.embed_dim)
        if self.numeric_idx:
            idx = torch.tensor(self.numeric_idx)
            tokens[:, idx] = values[:, idx].unsqueeze(-1) * self.num_weight
        for emb, j in zip(self.cat_embeddings, self.categorical_idx):
            codes = values[:, j].round().long()
            if codes.numel() and (codes.min() < 0 or codes.max() >= emb.shape[0]):
                raise ValueError(f"column {self.schema[j].name!r}: no embedding for category index {int(codes.max())}")
            tokens[:, j] = emb[codes]
        return tokens

    def weight_for(self, column: int) -> np.ndarray:
        return self.num_weight[self.numeric_idx.index(column)].detach().cpu().numpy().astype(np.float64)

    def embeddings_for(self, column: int) -> np.ndarray:
        k = self.categorical_idx.index(column)
        return self.cat_embeddings[k].detach().cpu().numpy().astype(np.float64)


def ft_encode(table: MaskedTable, params: FeatureTokenizer) -> np.ndarray:
    """Flattened tokens (n, d * embed_dim); unobserved cells encode as zero tokens."""
    values = np.where(table.observed_mask, table.values, 0.0)
    with torch.no_grad():
        tokens = params(torch.as_tensor(values, dtype=torch.get_default_dtype()))
    tokens = tokens.numpy().astype(np.float64) * table.observed_mask[..., None]
    return tokens.reshape(table.n_rows, -1)


# ---------------------------------------------------------------------------
# table-level encoding


@dataclass(frozen=True)
class EncodingSpec:
    scheme: Scheme
    schema: tuple[ColumnSchema, ...]
    spans: tuple[tuple[int, int], ...]
    embed_dim: int = 0

    @classmethod
    def build(cls, schema: Sequence[ColumnSchema], scheme: "str | Scheme", embed_dim: int = 8) -> "EncodingSpec":
        scheme = Scheme.parse(scheme)
        spans = []
        start = 0
        for col in schema:
            if scheme is Scheme.FT:
                width = embed_dim
            elif not col.is_categorical:
                width = 1
            elif scheme is Scheme.ONEHOT:
                width = onehot_width(col.cardinality)
            else:
                width = analog_bits_width(col.cardinality)
            spans.append((start, width))
            start += width
        return cls(scheme, tuple(schema), tuple(spans), embed_dim if scheme is Scheme.FT else 0)

    @property
    def width(self) -> int:
        start, width = self.spans[-1]
        return start + width

    def column_of(self) -> np.ndarray:
        """Original column index of every encoded column."""
        return np.concatenate([np.full(w, j) for j, (_, w) in enumerate(self.spans)])

    def expand_mask(self, mask: np.ndarray) -> np.ndarray:
        """Replicate a cell-level mask across each column's span."""
        return np.asarray(mask)[:, self.column_of()]

    def to_dict(self) -> dict:
        return {"scheme": self.scheme.value, "embed_dim": self.embed_dim, "spans": [list(s) for s in self.spans]}


@dataclass
class EncodedTable:
    values: np.ndarray
    observed_mask: np.ndarray
    target_mask: np.ndarray


def _check_schema(table: MaskedTable, spec: EncodingSpec) -> None:
    if tuple(table.schema) != spec.schema:
        theirs = [c.name for c in table.schema]
        ours = [c.name for c in spec.schema]
        raise ValueError(f"table schema {theirs} does not match encoding spec schema {ours}")


def encode_table(table: MaskedTable, spec: EncodingSpec, params: FeatureTokenizer | None = None) -> EncodedTable:
    _check_schema(table, spec)
    obs = spec.expand_mask(table.observed_mask)
    tgt = spec.expand_mask(table.target_mask)
    if spec.scheme is Scheme.FT:
        if params is None:
            raise ValueError("feature-tokenizer encoding needs tokenizer parameters")
        return EncodedTable(ft_encode(table, params), obs, tgt)
    out = np.zeros((table.n_rows, spec.width))
    codec = encode_onehot if spec.scheme is Scheme.ONEHOT else encode_analog_bits
    for j, (col, (start, width)) in enumerate(zip(spec.schema, spec.spans)):
        present = table.observed_mask[:, j]
        if not col.is_categorical:
            out[present, start] = table.values[present, j]
            continue
        k = col.cardinality
        codes = np.stack([codec(i, k) for i in range(k)])
        idx = table.values[present, j].astype(int)
        if idx.size and (idx.min() < 0 or idx.max() >= k):
            raise ValueError(f"column {col.name!r}: category index out of range")
        out[present, start : start + width] = codes[idx]
    return EncodedTable(out, obs, tgt)


def decode_table(
    matrix: np.ndarray,
    spec: EncodingSpec,
    params: FeatureTokenizer | None = None,
    schema: Sequence[ColumnSchema] | None = None,
) -> np.ndarray:
    """Recover (n, d) table values from an encoded matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if schema is not None and tuple(schema) != spec.schema:
        raise ValueError("schema does not match encoding spec")
    if matrix.ndim != 2 or matrix.shape[1] != spec.width:
        raise ValueError(f"encoded matrix has shape {matrix.shape}, spec width is {spec.width}")
    if spec.scheme is Scheme.FT and params is None:
        raise ValueError("feature-tokenizer decoding needs tokenizer parameters")
    n = matrix.shape[0]
    out = np.empty((n, len(spec.schema)))
    for j, (col, (start, width)) in enumerate(zip(spec.schema, spec.spans)):
        block = matrix[:, start : start + width]
        if spec.scheme is Scheme.FT:
            if col.is_categorical:
                emb = params.embeddings_for(j)
                dist = ((block[:, None, :] - emb[None, :, :]) ** 2).sum(-1)
                out[:, j] = np.argmin(dist, axis=1)
            else:
                out[:, j] = (block / params.weight_for(j)).mean(axis=1)
        elif not col.is_categorical:
            out[:, j] = block[:, 0]
        elif spec.scheme is Scheme.ONEHOT and col.cardinality > 2:
            out[:, j] = np.argmax(block, axis=1)
        else:
            bits = (block > 0).astype(int)
            codes = bits @ (1 << np.arange(width - 1, -1, -1))
            out[:, j] = _snap_table(col.cardinality)[codes]
    return out
