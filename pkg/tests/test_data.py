from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tabcsdi.data import (
    ColumnSchema,
    MaskedTable,
    fit_apply_minmax,
    inject_mcar,
    load_csv,
    load_schema,
    split_rows,
)

ROOT = Path(__file__).resolve().parents[1]
NUM = ColumnSchema("x", "numerical")


def numeric_table(values):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    schema = tuple(ColumnSchema(f"c{j}", "numerical") for j in range(values.shape[1]))
    return MaskedTable.from_array(values, schema)


def test_load_csv_marks_empty_cell_unobserved(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("a,b\n1,2\n3,\n")
    t = load_csv(f, [ColumnSchema("a", "numerical"), ColumnSchema("b", "numerical")])
    assert (~t.observed_mask).sum() == 1
    assert not t.observed_mask[1, 1]


def test_load_csv_maps_labels_in_schema_order(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("cat\na\nb\nc\n")
    t = load_csv(f, [ColumnSchema("cat", "categorical", ("a", "b", "c"))])
    assert t.values[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_load_csv_custom_sentinel(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("a,cat\n1,?\n?,x\n")
    t = load_csv(f, [ColumnSchema("a", "numerical"), ColumnSchema("cat", "categorical", ("x", "y"))], missing="?")
    assert t.observed_mask.tolist() == [[True, False], [False, True]]


def test_load_csv_unknown_label_names_column_and_label(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("cat\na\nzzz\n")
    with pytest.raises(ValueError, match=r"zzz.*'cat'"):
        load_csv(f, [ColumnSchema("cat", "categorical", ("a", "b"))])


def test_load_csv_ragged_row_reports_line(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError, match=r":3:"):
        load_csv(f, [ColumnSchema("a", "numerical"), ColumnSchema("b", "numerical")])


def test_load_csv_header_mismatch(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("a,c\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        load_csv(f, [ColumnSchema("a", "numerical"), ColumnSchema("b", "numerical")])


def test_breast_dataset_shape():
    schema, missing = load_schema(ROOT / "configs/schemas/breast.yaml")
    t = load_csv(ROOT / "data/breast.csv", schema, missing)
    assert t.values.shape == (699, 10)
    assert not t.categorical_columns.any()


def test_schema_validation():
    with pytest.raises(ValueError):
        ColumnSchema("c", "categorical", ("only",))
    with pytest.raises(ValueError):
        ColumnSchema("c", "ordinal")
    assert ColumnSchema("c", "categorical", ("a", "b", "c")).cardinality == 3


# -- normalization -------------------------------------------------------------


def test_minmax_examples():
    t, p = fit_apply_minmax(numeric_table([0.0, 5.0, 10.0]))
    assert t.values[:, 0].tolist() == [0.0, 0.5, 1.0]
    t, _ = fit_apply_minmax(numeric_table([7.0, 7.0]))
    assert t.values[:, 0].tolist() == [0.0, 0.0]


@given(arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=50, deadline=None)
def test_minmax_round_trip(values):
    t = numeric_table(values)
    norm, params = fit_apply_minmax(t)
    back = params.invert(norm.values)
    for j in range(3):
        if np.ptp(values[:, j]) > 0:
            assert np.allclose(back[:, j], values[:, j], atol=1e-6 * max(1.0, np.abs(values[:, j]).max()))


def test_minmax_ignores_missing_and_categoricals():
    schema = (NUM, ColumnSchema("k", "categorical", ("a", "b", "c")))
    t = MaskedTable.from_array(np.array([[1.0, 2.0], [np.nan, 0.0], [3.0, 1.0]]), schema)
    norm, params = fit_apply_minmax(t)
    assert params.mins[0] == 1.0 and params.maxs[0] == 3.0
    assert norm.values[:, 1].tolist() == [2.0, 0.0, 1.0]


def test_test_split_uses_train_statistics_only():
    train = numeric_table([0.0, 10.0])
    test = numeric_table([20.0, 1000.0])
    _, params = fit_apply_minmax(train)
    norm_test, _ = fit_apply_minmax(test, params)
    assert norm_test.values[:, 0].tolist() == [2.0, 100.0]


# -- MCAR ----------------------------------------------------------------------


def test_mcar_rate_zero_and_one():
    t = numeric_table(np.arange(20.0).reshape(10, 2))
    assert not inject_mcar(t, 0.0, 1).target_mask.any()
    full = inject_mcar(t, 1.0, 1)
    assert full.target_mask.all() and not full.observed_mask.any()
    assert np.array_equal(full.ground_truth, t.values)


def test_mcar_count_is_binomial():
    t = numeric_table(np.ones((100, 100)))
    n, p = 10_000, 0.2
    count = inject_mcar(t, p, seed=123).target_mask.sum()
    sigma = np.sqrt(n * p * (1 - p))
    assert sigma == pytest.approx(40.0)
    assert abs(count - n * p) < 3 * sigma


def test_mcar_only_hides_observed_cells():
    t = numeric_table([[1.0, np.nan], [np.nan, 2.0]])
    out = inject_mcar(t, 1.0, 0)
    assert out.target_mask.tolist() == [[True, False], [False, True]]


def test_mcar_rejects_bad_rate():
    with pytest.raises(ValueError):
        inject_mcar(numeric_table([1.0]), 1.5)


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_masked_table_invariants_after_mcar(rate, seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(8, 4))
    values[rng.random(values.shape) < 0.2] = np.nan
    out = inject_mcar(numeric_table(values), rate, seed)
    assert not (out.observed_mask & out.target_mask).any()
    assert not np.isnan(out.ground_truth[out.target_mask]).any()
    assert np.isnan(out.values[out.target_mask]).all()


# -- splitting -----------------------------------------------------------------


def test_split_sizes_and_partition():
    t = numeric_table(np.arange(10.0))
    a, b = split_rows(t, 0.8, 7)
    assert (a.n_rows, b.n_rows) == (8, 2)
    rows_a, rows_b = set(a.values[:, 0]), set(b.values[:, 0])
    assert rows_a | rows_b == set(range(10)) and not rows_a & rows_b


def test_split_is_seeded():
    t = numeric_table(np.arange(50.0))
    a1, _ = split_rows(t, 0.5, 3)
    a2, _ = split_rows(t, 0.5, 3)
    assert np.array_equal(a1.values, a2.values)


def test_split_errors():
    t = numeric_table(np.arange(3.0))
    with pytest.raises(ValueError):
        split_rows(t, 0.0)
    with pytest.raises(ValueError):
        split_rows(t, 0.01)
