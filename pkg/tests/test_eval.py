import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from commap import evaluation
from commap.data import MissionConfig, Shadow, SplitSpec, SuccessField, simulate_mission
from commap.errors import ConfigError, DataError, NumericalError
from commap.evaluation import (
    EvalConfig, compare_methods, format_keyvalue, format_table, nll_metric, parse_keyvalue,
    predict_grid, probability_grid, ratio_metric, read_table_csv, snr_grid, threshold_sweep,
    write_table_csv,
)
from commap.laplace_gpc import GpcConfig, fit_gpc_laplace
from commap.prediction import PredictionResult


class FieldModel:
    """Ground-truth success probability exposed through the model interface."""

    def __init__(self, cfg):
        self.field = SuccessField(cfg)

    def predict(self, X):
        p = self.field.probability(X[:, :2], X[:, 2:])
        return PredictionResult(np.zeros(len(X)), np.zeros(len(X)), p)


class ConstantModel:
    def __init__(self, value):
        self.c = value

    def predict(self, X):
        n = len(X)
        return PredictionResult(np.zeros(n), np.ones(n), np.full(n, self.c))


class TestRatio:
    def test_examples(self):
        assert ratio_metric([12.0, 5.0], [1, 0], 9.8) == 1.0
        assert ratio_metric([5.0, 12.0], [1, 0], 9.8) == 0.0
        assert ratio_metric([1.0, 0.0, 1.0], [1, 0, 1], 0.5) == 1.0

    def test_boundary_counts_as_communicate(self):
        assert ratio_metric([0.5], [1], 0.5) == 1.0
        assert ratio_metric([0.5], [0], 0.5) == 0.0

    def test_errors(self):
        with pytest.raises(DataError):
            ratio_metric([], [], 0.5)
        with pytest.raises(DataError):
            ratio_metric([0.1, 0.2], [1], 0.5)

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            p, y, th = rng.normal(size=n), rng.integers(0, 2, n), rng.normal()
            tp = tn = 0
            for pi, yi in zip(p, y):
                if pi >= th and yi == 1:
                    tp += 1
                elif pi < th and yi == 0:
                    tn += 1
            assert ratio_metric(p, y, th) == (tp + tn) / n

    # Values on a 1/8 lattice so the transform stays strictly monotone in floats.
    @given(arrays(np.int64, 20, elements=st.integers(-400, 400)), st.integers(-400, 400),
           arrays(np.int64, 20, elements=st.integers(0, 1)))
    def test_monotone_invariance(self, k, kth, y):
        p, th = k / 8.0, kth / 8.0
        f = lambda v: np.exp(np.asarray(v) / 10.0) * 3.0 - 1.0
        assert ratio_metric(p, y, th) == ratio_metric(f(p), y, f(th))


class TestNll:
    def test_half(self):
        y = np.random.default_rng(1).integers(0, 2, 50)
        assert abs(nll_metric(np.full(50, 0.5), y) - math.log(2)) <= 1e-12

    def test_exact_labels(self):
        y = np.array([1, 0, 1, 1, 0])
        assert nll_metric(y.astype(float), y) <= 1e-11

    def test_summation_oracle(self):
        rng = np.random.default_rng(2)
        p, y = rng.uniform(0.01, 0.99, 200), rng.integers(0, 2, 200)
        ref = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y)) / 200
        assert nll_metric(p, y) == pytest.approx(ref, abs=1e-12)

    # Dyadic probabilities make 1 - p exact, so the identity can hold bit for bit.
    @given(arrays(np.int64, 15, elements=st.integers(0, 2**20)),
           arrays(np.int64, 15, elements=st.integers(0, 1)))
    def test_label_symmetry(self, k, y):
        p = k / 2.0**20
        assert nll_metric(p, y) == nll_metric(1 - p, 1 - y)

    def test_non_negative_and_mismatch(self):
        assert nll_metric([0.3, 0.9], [0, 1]) >= 0
        with pytest.raises(DataError):
            nll_metric([0.3], [0, 1])


class TestSweep:
    def test_tie_break_low(self):
        best, _, curve = threshold_sweep([[0.1, 0.2, 0.8, 0.9]], [[0, 0, 1, 1]],
                                         np.linspace(0, 1, 11))
        assert best == pytest.approx(0.3)
        assert curve.max() == 1.0

    def test_single_value(self):
        assert threshold_sweep([[1.0]], [[1]], [7.0])[0] == 7.0
        with pytest.raises(ConfigError):
            threshold_sweep([[1.0]], [[1]], [])

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        preds = [rng.normal(10, 5, 30) for _ in range(5)]
        labels = [(p + rng.normal(0, 4, 30) > 9).astype(int) for p in preds]
        grid = np.linspace(-5, 25, 200)
        scores = [np.mean([ratio_metric(p, y, g) for p, y in zip(preds, labels)]) for g in grid]
        best_val = max(scores)
        expected = grid[scores.index(best_val)]
        best, _, curve = threshold_sweep(preds, labels, grid)
        assert best == expected
        assert curve.max() == best_val

    def test_grids(self):
        g = snr_grid([3.04, 12.01])
        assert g[0] == pytest.approx(0.1) and g[-1] == pytest.approx(12.1)
        assert 9.8 in g and 10.2 in g
        np.testing.assert_allclose(np.diff(probability_grid()), 0.01)


def mission(n=120, seed=0):
    return simulate_mission(MissionConfig(n_events=n, success_offset=1.0,
                                          success_range_slope=0.003), seed=seed)


@pytest.fixture()
def dummy_methods(monkeypatch):
    """GPC replaced by a constant-0.5 classifier; GPR by the true SNR."""

    def fit(method, ds, idx, cfg):
        if method == "GPC":
            return ConstantModel(0.5)
        if method == "GPR":
            return "oracle"
        raise NumericalError("forced failure")

    def predict(method, model, ds, idx):
        if model == "oracle":
            gt = ds.ground_truth
            snr = gt.field.mean_snr(gt.true_X[idx, :2], gt.true_X[idx, 2:])
            return PredictionResult(snr, np.zeros(len(idx)))
        return model.predict(ds.X[idx])

    monkeypatch.setattr(evaluation, "fit_method", fit)
    monkeypatch.setattr(evaluation, "predict_method", predict)


class TestCompare:
    def test_dummy_classifier(self, dummy_methods):
        ds = mission()
        cmp = compare_methods(ds, SplitSpec(4), ["GPC"])
        r = cmp.reports["GPC"]
        for ratio, y in zip(r.ratios[0.5], cmp.labels):
            assert ratio == pytest.approx(np.mean(y == 1))
        assert r.mean_nll == pytest.approx(math.log(2), abs=1e-12)

    def test_shared_labels_and_failures(self, dummy_methods):
        ds = mission()
        cmp = compare_methods(ds, SplitSpec(3), ["GPC", "SVGPC", "GPR"])
        assert len(cmp.reports["SVGPC"].errors) == 3
        assert math.isnan(cmp.reports["SVGPC"].mean_ratio())
        assert "failed" in format_table(cmp)
        assert np.isfinite(cmp.reports["GPC"].mean_ratio())
        assert parse_keyvalue(format_keyvalue(cmp))["SVGPC.failures"] == "3"

    def test_sweep_consistency(self, dummy_methods):
        ds = mission(200)
        cmp = compare_methods(ds, SplitSpec(5), ["GPR"], EvalConfig(snr_thresholds=(9.8, 0.1)))
        r = cmp.reports["GPR"]
        grid = snr_grid(np.concatenate(cmp.predictions["GPR"]))
        best = r.mean_ratio(r.best_threshold)
        for th in grid:
            assert best >= np.mean([ratio_metric(p, y, th) for p, y in
                                    zip(cmp.predictions["GPR"], cmp.labels)])

    def test_real_methods_share_splits(self):
        ds = mission(80)
        cfg = EvalConfig(gpc=GpcConfig(optimize=False), sweep=False)
        a = compare_methods(ds, SplitSpec(2, seed=4), ["GPC"], cfg)
        b = compare_methods(ds, SplitSpec(2, seed=4), ["GPC"], cfg)
        for ya, yb in zip(a.labels, b.labels):
            np.testing.assert_array_equal(ya, yb)
        assert format_keyvalue(a) == format_keyvalue(b)
        assert 0 <= a.reports["GPC"].mean_ratio() <= 1

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            compare_methods(mission(), SplitSpec(1), ["KNN"])


class TestGrid:
    def test_pointwise(self):
        ds = mission(60)
        m = fit_gpc_laplace(ds.X, ds.labels, GpcConfig(optimize=False))
        g = predict_grid(m, (10.0, -20.0), (-100, 100, -50, 50), 2)
        assert g.value.shape == (2, 2)
        for x, y, v, s in g.rows():
            r = m.predict(np.array([[10.0, -20.0, x, y]]))
            assert v == r.value[0] and s == r.variance[0]

    def test_rays_non_increasing(self):
        cfg = MissionConfig(success_offset=3.0, success_range_slope=0.01)
        g = predict_grid(FieldModel(cfg), (0.0, 0.0), (-400, 400, -400, 400), 41)
        c = 20
        for di, dj in ((0, 1), (1, 0), (1, 1), (-1, 1), (0, -1), (-1, -1)):
            ray = [g.value[c + k * di, c + k * dj] for k in range(21)]
            assert np.all(np.diff(ray) <= 0.02)

    def test_shadow_depression(self):
        cfg = MissionConfig(success_offset=3.0, success_range_slope=0.002,
                            shadows=(Shadow(200.0, 0.0, 60.0, 4.0),))
        g = predict_grid(FieldModel(cfg), (0.0, 0.0), (0, 400, -200, 200), 41)
        centre = g.value[20, 20]
        ring = [g.value[20, 5], g.value[20, 35], g.value[5, 20], g.value[35, 20]]
        assert centre < min(ring) - 0.2

    @pytest.mark.parametrize("region, res", [((0, 0, 0, 1), 3), ((0, 1, 0, 1), 1),
                                             ((0, 1, 0, 1), (3, 1))])
    def test_degenerate(self, region, res):
        with pytest.raises(ConfigError):
            predict_grid(ConstantModel(0.5), (0, 0), region, res)


class TestTableCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "t.csv"
        rows = np.random.default_rng(0).normal(size=(5, 3))
        write_table_csv(path, ["a", "b", "c"], rows, meta={"seed": 1})
        meta, header, arr = read_table_csv(path)
        assert meta == {"seed": "1"} and header == ["a", "b", "c"]
        np.testing.assert_array_equal(arr, rows)

    def test_bad_row(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1,2\n3\n")
        with pytest.raises(DataError) as info:
            read_table_csv(path)
        assert info.value.line == 3
