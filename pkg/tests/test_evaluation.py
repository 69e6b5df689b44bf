import math
import statistics

import numpy as np
import pytest

from tabcsdi.baselines import MeanMode
from tabcsdi.data import ColumnSchema, MaskedTable
from tabcsdi.evaluation import MetricsReport, error_rate, format_table, prepare, rmse, run_experiment


def mixed_table(n=60, seed=0):
    rng = np.random.default_rng(seed)
    schema = (
        ColumnSchema("a", "numerical"),
        ColumnSchema("b", "numerical"),
        ColumnSchema("c", "categorical", ("x", "y", "z")),
    )
    v = np.stack([rng.normal(size=n), rng.uniform(5, 9, n), rng.integers(0, 3, n)], 1)
    return MaskedTable.from_array(v, schema)


class Oracle:
    """Returns the held-out truth: only possible when metrics read the right cells."""

    def fit(self, train):
        return self

    def impute(self, table):
        return table.filled(np.where(table.target_mask, table.ground_truth, 0.0))


class Spy:
    """Wraps the baseline and records what it produced."""

    def __init__(self):
        self.inner = MeanMode()
        self.outputs = []

    def fit(self, train):
        self.inner.fit(train)
        return self

    def impute(self, table):
        out = self.inner.impute(table)
        self.outputs.append(out.copy())
        return out


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.5, 0.7], [0.5, 0.9]) == pytest.approx(math.sqrt(0.04 / 2))
    with pytest.raises(ValueError):
        rmse([1.0], [1.0], [False])


def test_pooled_rmse_equals_concatenated_cells():
    rng = np.random.default_rng(0)
    pred, truth = rng.random((20, 2)), rng.random((20, 2))
    mask = rng.random((20, 2)) < 0.5
    cells = [(pred[i, j] - truth[i, j]) ** 2 for i in range(20) for j in range(2) if mask[i, j]]
    assert rmse(pred, truth, mask) == pytest.approx(math.sqrt(sum(cells) / len(cells)), rel=1e-12)


def test_error_rate_examples():
    assert error_rate([0, 1, 2], [0, 1, 2]) == 0.0
    assert error_rate([0, 1, 2, 1], [0, 1, 2, 2]) == 0.25
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, t = rng.integers(0, 4, 30), rng.integers(0, 4, 30)
        accuracy = sum(int(a == b) for a, b in zip(p, t)) / 30
        assert error_rate(p, t) + accuracy == pytest.approx(1.0)


def test_prepare_scales_with_train_statistics_and_hides_cells():
    train, test = prepare(mixed_table(), seed=3, mcar_rate=0.2, train_fraction=0.8)
    assert (train.n_rows, test.n_rows) == (48, 12)
    assert train.normalized and test.normalized
    col = train.values[:, 1][train.observed_mask[:, 1]]
    assert col.min() == 0.0 and col.max() == 1.0
    assert test.target_mask.any() and train.target_mask.any()


def test_oracle_imputer_scores_zero():
    rep = run_experiment(mixed_table(), lambda s, seed: Oracle(), [0, 1, 2])
    assert rep.rmse == (0.0, 0.0)
    assert rep.error_rate == (0.0, 0.0)


def test_report_is_deterministic_and_uses_sample_std(tmp_path):
    factory = lambda s, seed: MeanMode()  # noqa: E731
    a = run_experiment(mixed_table(), factory, [0, 1, 2, 3], label="mean")
    b = run_experiment(mixed_table(), factory, [0, 1, 2, 3], label="mean")
    assert [r.rmse for r in a.repetitions] == [r.rmse for r in b.repetitions]
    assert a.fingerprint == b.fingerprint
    values = [r.rmse for r in a.repetitions]
    assert a.rmse == (statistics.fmean(values), statistics.stdev(values))
    path = tmp_path / "r.jsonl"
    a.write(path)
    back = MetricsReport.read(path)
    assert back.aggregate() == a.aggregate()
    assert "mean" in format_table([a])


def test_leakage_sentinel():
    """Perturbing held-out truth must not change what the imputer produces."""
    table = mixed_table()
    spy = Spy()
    run_experiment(table, lambda s, seed: spy, [5])

    train, test = prepare(table, 5, 0.2, 0.8)
    test.ground_truth[test.target_mask] += 1000.0
    train.ground_truth[train.target_mask] = -1000.0
    other = MeanMode().fit(train)
    assert np.array_equal(other.impute(test), spy.outputs[0])


def test_failing_repetition_names_seed():
    class Broken:
        def fit(self, train):
            raise ArithmeticError("boom")

    with pytest.raises(RuntimeError, match="seed 7"):
        run_experiment(mixed_table(), lambda s, seed: Broken(), [7])
