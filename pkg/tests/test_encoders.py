import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tabcsdi import numeric as nm
from tabcsdi.data import ColumnSchema, MaskedTable
from tabcsdi.encoders import (
    WEIGHT_FLOOR,
    EncodingSpec,
    FeatureTokenizer,
    Scheme,
    analog_bits_width,
    decode_analog_bits,
    decode_onehot,
    decode_table,
    encode_analog_bits,
    encode_onehot,
    encode_table,
    ft_decode_categorical,
    ft_decode_numeric,
)

SCHEMES = list(Scheme)


def mixed_schema():
    return (
        ColumnSchema("a", "numerical"),
        ColumnSchema("b", "numerical"),
        ColumnSchema("c", "categorical", ("x", "y", "z")),
    )


def random_table(rng, n_rows=5):
    n_num = int(rng.integers(0, 3))
    cards = rng.integers(2, 65, size=int(rng.integers(1, 4)))
    schema = [ColumnSchema(f"n{j}", "numerical") for j in range(n_num)]
    schema += [ColumnSchema(f"k{j}", "categorical", tuple(f"v{i}" for i in range(k))) for j, k in enumerate(cards)]
    cols = [rng.random(n_rows) for _ in range(n_num)] + [rng.integers(0, k, n_rows).astype(float) for k in cards]
    rng.shuffle(schema_order := np.arange(len(schema)))
    schema = tuple(schema[i] for i in schema_order)
    values = np.stack([cols[i] for i in schema_order], axis=1)
    return MaskedTable.from_array(values, schema)


def round_trip(table, scheme, seed=0):
    spec = EncodingSpec.build(table.schema, scheme, embed_dim=4)
    tok = FeatureTokenizer(table.schema, 4, torch.Generator().manual_seed(seed)) if spec.scheme is Scheme.FT else None
    enc = encode_table(table, spec, tok)
    return decode_table(enc.values, spec, tok)


# -- single-cell codecs --------------------------------------------------------


def test_onehot_codes():
    assert encode_onehot(1, 3).tolist() == [-1.0, 1.0, -1.0]
    assert encode_onehot(0, 2).tolist() == [-1.0]
    assert encode_onehot(1, 2).tolist() == [1.0]


def test_analog_bits_codes():
    assert encode_analog_bits(3, 4).tolist() == [1.0, 1.0]
    assert encode_analog_bits(2, 3).tolist() == [1.0, -1.0]
    assert encode_analog_bits(1, 2).tolist() == [1.0]
    assert analog_bits_width(64) == 6 and analog_bits_width(65) == 7


def test_invalid_analog_code_snaps_to_nearest_valid():
    # k=3: code 3 (11) is invalid; codes 1 (01) and 2 (10) are both one flip away
    assert decode_analog_bits([0.4, 0.2], 3) == 1
    # k=5: code 7 (111) is one flip from 3 (011)
    assert decode_analog_bits([1, 1, 1], 5) == 3


def test_codec_errors():
    with pytest.raises(ValueError):
        encode_onehot(3, 3)
    with pytest.raises(ValueError):
        encode_analog_bits(0, 1)


@given(st.integers(2, 64), st.data())
@settings(max_examples=80, deadline=None)
def test_single_cell_round_trip(k, data):
    i = data.draw(st.integers(0, k - 1))
    assert decode_onehot(encode_onehot(i, k), k) == i
    assert decode_analog_bits(encode_analog_bits(i, k), k) == i


@given(st.integers(2, 64), st.data())
@settings(max_examples=80, deadline=None)
def test_decoding_robust_to_sign_and_argmax_preserving_noise(k, data):
    i = data.draw(st.integers(0, k - 1))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    bits = encode_analog_bits(i, k)
    assert decode_analog_bits(bits * rng.uniform(0.01, 3, bits.shape), k) == i
    code = encode_onehot(i, k)
    noisy = code + rng.uniform(-0.9, 0.9, code.shape)
    assert decode_onehot(noisy, k) == i


# -- feature tokenizer ---------------------------------------------------------


def test_ft_numeric_examples():
    schema = (ColumnSchema("x", "numerical"),)
    tok = FeatureTokenizer(schema, 2)
    with torch.no_grad():
        tok.num_weight.copy_(torch.tensor([[2.0, 4.0]]))
    out = tok(torch.tensor([[0.5], [0.0], [1.0]]))
    assert out[0, 0].tolist() == [1.0, 2.0]
    assert out[1, 0].tolist() == [0.0, 0.0]
    assert out[2, 0].tolist() == [2.0, 4.0]
    assert ft_decode_numeric([1.0, 2.0], [2.0, 4.0]) == 0.5


def test_ft_numeric_decode_with_symmetric_noise():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, delta = rng.uniform(-10, 10), rng.uniform(0, 0.5)
        w = rng.uniform(0.5, 1.0, 2) * rng.choice([-1, 1], 2)
        w = np.array([w[0], w[0]])
        noise = np.array([delta, -delta])
        assert abs(ft_decode_numeric(x * w + noise, w) - x) <= delta / abs(w[0]) + 1e-12


@given(st.floats(-10, 10), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_ft_numeric_exact_inverse(x, seed):
    with nm.precision("float64"):
        tok = FeatureTokenizer((ColumnSchema("x", "numerical"),), 8, torch.Generator().manual_seed(seed))
        token = tok(torch.tensor([[x]]))[0, 0].detach().numpy()
    assert abs(ft_decode_numeric(token, tok.weight_for(0)) - x) < 1e-6


def test_ft_categorical_decode():
    emb = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    assert ft_decode_categorical(emb[2], emb) == 2
    assert ft_decode_categorical([1.0, 0.0], emb) == 0  # tie between 0 and 1


def test_ft_categorical_within_half_min_distance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        emb = rng.normal(size=(int(rng.integers(2, 10)), 4))
        d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
        radius = d[~np.eye(len(emb), dtype=bool)].min() / 2
        c = int(rng.integers(len(emb)))
        noise = rng.normal(size=4)
        noise *= rng.uniform(0, 0.999) * radius / np.linalg.norm(noise)
        assert ft_decode_categorical(emb[c] + noise, emb) == c


def test_ft_init_and_clamp_respect_floor():
    tok = FeatureTokenizer(mixed_schema(), 16, torch.Generator().manual_seed(0))
    assert (tok.num_weight.abs() >= WEIGHT_FLOOR).all()
    with torch.no_grad():
        tok.num_weight[0, 0] = 0.001
        tok.num_weight[1, 0] = -0.0
    tok.clamp_()
    assert (tok.num_weight.abs() >= WEIGHT_FLOOR).all()


def test_ft_missing_embedding_errors():
    tok = FeatureTokenizer((ColumnSchema("c", "categorical", ("a", "b")),), 4)
    with pytest.raises(ValueError, match="embedding"):
        tok(torch.tensor([[2.0]]))


# -- table level ---------------------------------------------------------------


@pytest.mark.parametrize("scheme, width", [("onehot", 5), ("analog_bits", 4), ("ft", 12)])
def test_encoded_widths(scheme, width):
    spec = EncodingSpec.build(mixed_schema(), scheme, embed_dim=4)
    assert spec.width == width
    starts = [s for s, _ in spec.spans]
    assert starts == sorted(starts) and sum(w for _, w in spec.spans) == width


def test_mask_broadcasts_across_span():
    spec = EncodingSpec.build(mixed_schema(), "onehot")
    mask = np.array([[True, False, True]])
    assert spec.expand_mask(mask).tolist() == [[True, False, True, True, True]]


def test_schema_and_width_mismatch_errors():
    t = MaskedTable.from_array(np.zeros((2, 1)), (ColumnSchema("q", "numerical"),))
    spec = EncodingSpec.build(mixed_schema(), "onehot")
    with pytest.raises(ValueError):
        encode_table(t, spec)
    with pytest.raises(ValueError, match="width"):
        decode_table(np.zeros((2, 3)), spec)


def test_binary_categoricals_decode_identically_under_onehot_and_analog_bits():
    schema = tuple(ColumnSchema(f"b{j}", "categorical", ("0", "1")) for j in range(4))
    out = np.random.default_rng(0).normal(size=(50, 4))
    a = decode_table(out, EncodingSpec.build(schema, "onehot"))
    b = decode_table(out, EncodingSpec.build(schema, "analog_bits"))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.value)
def test_round_trip_1000_seeded_tables(scheme):
    for seed in range(1000):
        table = random_table(np.random.default_rng(seed))
        out = round_trip(table, scheme, seed)
        cat = table.categorical_columns
        assert np.array_equal(out[:, cat], table.values[:, cat]), f"seed {seed}"
        assert np.allclose(out[:, ~cat], table.values[:, ~cat], atol=1e-6), f"seed {seed}"


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.value)
def test_round_trip_every_cardinality(scheme):
    for k in range(2, 65):
        schema = (ColumnSchema("c", "categorical", tuple(str(i) for i in range(k))),)
        table = MaskedTable.from_array(np.arange(k, dtype=float)[:, None], schema)
        assert np.array_equal(round_trip(table, scheme)[:, 0], np.arange(k)), f"k={k}"
