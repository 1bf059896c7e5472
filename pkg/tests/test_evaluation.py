import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omar.data import ClusterData
from omar.evaluation import (REPORT_COLUMNS, ConfusionCounts, confusion, confusion_from_arrays, emit_report,
                             evaluation_row, fmt, metrics, parse_report_csv, report_csv, report_json,
                             squared_deviation, weighted_mean_omar)


def cluster(cid, y, a):
    return ClusterData(cid, y, a, np.zeros((len(y), 1)))


# six clusters: (Ybar, Abar) with target 0.5
SIX = [
    cluster("c1", [1, 1], [1, 1]),        # Ybar 1.0, Abar 1.0
    cluster("c2", [1, 0], [1, 0]),        # Ybar 0.5, Abar 0.5
    cluster("c3", [0, 0, 1], [0, 0, 0]),  # Ybar 1/3, Abar 0
    cluster("c4", [1, 1, 0], [0, 1, 0]),  # Ybar 2/3, Abar 1/3
    cluster("c5", [0], [1]),              # Ybar 0, Abar 1
    cluster("c6", [1, 1, 1, 1], [1, 0, 0, 0]),  # Ybar 1, Abar 1/4
]


def mcc_float(tp, tn, fp, fn):
    """Second implementation: correlation of the two indicator vectors."""
    truth = np.r_[np.ones(tp), np.zeros(tn), np.zeros(fp), np.ones(fn)]
    pred = np.r_[np.ones(tp), np.zeros(tn), np.ones(fp), np.zeros(fn)]
    if truth.std() == 0 or pred.std() == 0:
        return 0.0
    return float(np.corrcoef(truth, pred)[0, 1])


class TestConfusion:
    def test_fixture(self):
        theta = np.array([0.5, 0.5, 0.0, 0.2, 0.5, 0.3])
        # good = Ybar > .5: c1, c4, c6.  over = Abar > theta: c1, c4, c5.
        assert confusion(SIX, theta, 0.5) == ConfusionCounts(tp=2, tn=2, fp=1, fn=1)

    def test_zero_rule(self):
        c = confusion(SIX, np.zeros(6), 0.5)
        over = [1, 1, 0, 1, 1, 1]
        assert c.tp + c.fp == sum(over)

    def test_one_rule(self):
        c = confusion(SIX, lambda cl: np.ones(len(cl)), 0.5)
        assert c.tp == 0 and c.fp == 0 and c.total == 6

    def test_order_invariant(self, rng):
        theta = rng.random(6)
        perm = rng.permutation(6)
        assert confusion(SIX, theta, 0.4) == confusion([SIX[i] for i in perm], theta[perm], 0.4)

    def test_weak_inequalities(self):
        assert confusion_from_arrays([0.5], [0.3], [0.3], 0.5) == ConfusionCounts(0, 1, 0, 0)

    def test_counts_validated(self):
        with pytest.raises(ValueError):
            ConfusionCounts(-1, 0, 0, 0)


class TestMetrics:
    def test_perfect(self):
        m = metrics(ConfusionCounts(5, 7, 0, 0))
        assert (m.accuracy, m.f1_two_sided, m.mcc) == (1.0, 2.0, 1.0)

    def test_uninformative(self):
        m = metrics(ConfusionCounts(25, 25, 25, 25))
        assert m.mcc == 0.0 and m.accuracy == 0.5

    def test_mcc_value(self):
        m = metrics(ConfusionCounts(40, 30, 20, 10))
        assert m.mcc == pytest.approx(1000 / math.sqrt(60 * 50 * 50 * 40), abs=1e-15)
        # 1000 / sqrt(6e6); the commonly quoted 0.2887 would need a 12e6 denominator
        assert m.mcc == pytest.approx(0.408248, abs=5e-7)
        assert m.mcc == pytest.approx(mcc_float(40, 30, 20, 10), abs=1e-12)

    def test_f1_is_sum(self):
        m = metrics(ConfusionCounts(40, 30, 20, 10))
        assert m.f1_two_sided == pytest.approx(80 / 110 + 60 / 90, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics(ConfusionCounts(0, 0, 0, 0))

    def test_zero_factor(self):
        assert metrics(ConfusionCounts(0, 10, 0, 5)).mcc == 0.0

    @settings(max_examples=10_000, deadline=None)
    @given(st.tuples(*[st.integers(0, 60)] * 4).filter(lambda t: sum(t) > 0))
    def test_ranges_and_second_implementation(self, counts):
        m = metrics(ConfusionCounts(*counts))
        assert 0 <= m.accuracy <= 1
        assert 0 <= m.f1_two_sided <= 2
        assert -1 <= m.mcc <= 1
        assert m.mcc == pytest.approx(mcc_float(*counts), abs=1e-9)


class TestDeviation:
    def test_oracle(self):
        dev, mean = squared_deviation([0.1, 0.5], [0.1, 0.5])
        assert np.all(dev == 0) and mean == 0

    def test_offset(self):
        dev, mean = squared_deviation(np.array([0.2, 0.6]), np.array([0.1, 0.5]))
        assert np.allclose(dev, 0.01) and mean == pytest.approx(0.01)

    def test_callables_and_length(self):
        dev, _ = squared_deviation(lambda cl: np.ones(len(cl)), lambda cl: np.zeros(len(cl)), SIX)
        assert dev.tolist() == [1.0] * 6
        with pytest.raises(ValueError):
            squared_deviation([0.1], [0.1, 0.2])


class TestWeighted:
    def test_equal_sizes(self):
        per, overall = weighted_mean_omar([0.2, 0.4, 0.9], ["g"] * 3, [3, 3, 3])
        assert overall == pytest.approx(0.5) and per == {"g": pytest.approx(0.5)}

    def test_dominant_weight(self):
        _, overall = weighted_mean_omar([0.8, 0.1], None, [100, 1])
        assert abs(overall - 0.8) <= 0.01

    def test_two_groups(self):
        per, overall = weighted_mean_omar([0.2, 0.6, 0.5, 1.0], ["n", "n", "s", "s"], [2, 3, 1, 4])
        assert per["n"] == pytest.approx((0.4 + 1.8) / 5)
        assert per["s"] == pytest.approx((0.5 + 4.0) / 5)
        assert overall == pytest.approx((0.4 + 1.8 + 0.5 + 4.0) / 10)

    def test_empty_group(self):
        with pytest.warns(RuntimeWarning, match="empty"):
            per, _ = weighted_mean_omar([0.2, 0.4], {"a": [True, False], "b": [False, False], "c": [1]}, [1, 1])
        assert set(per) == {"a", "c"}

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            weighted_mean_omar([0.2, 0.4], None, [1, 0])
        with pytest.raises(ValueError):
            weighted_mean_omar([0.2, 0.4], None, [1])


class TestReports:
    def rows(self):
        theta = np.array([0.5, 0.5, 0.0, 0.2, 0.5, 0.3])
        return [evaluation_row(t, "direct", SIX, theta, theta + 0.1) for t in (0.4, 0.5)]

    def test_row_content(self):
        r = self.rows()[1]
        assert (r["tp"], r["tn"], r["fp"], r["fn"], r["n_clusters"]) == (2, 2, 1, 1, 6)
        assert r["mean_squared_deviation"] == pytest.approx(0.01)
        sizes = np.array([c.n for c in SIX])
        assert r["weighted_mean_omar"] == pytest.approx(np.sum(sizes * [0.5, 0.5, 0, 0.2, 0.5, 0.3]) / sizes.sum())

    def test_fmt(self):
        assert fmt(1 / 3) == "0.333333"
        assert fmt(123456789.0) == "1.23457e+08"
        assert fmt(7) == "7" and fmt(np.int64(3)) == "3"
        assert fmt(float("nan")) == "nan" and fmt(None) == "" and fmt(True) == "true"

    def test_header_only(self):
        assert report_csv([]) == ",".join(REPORT_COLUMNS) + "\n"

    def test_csv_json_equal(self):
        rows = self.rows()
        from_csv = parse_report_csv(report_csv(rows))
        from_json = json.loads(report_json(rows))
        assert from_json["columns"] == list(REPORT_COLUMNS)
        assert from_csv == from_json["rows"]

    def test_emit(self, tmp_path):
        rows = self.rows()
        a = emit_report(rows, tmp_path / "r.csv", "csv")
        b = emit_report(rows, tmp_path / "r.json", "json", extra={"config_hash": "abc"})
        assert parse_report_csv(a.read_text()) == json.loads(b.read_text())["rows"]
        assert json.loads(b.read_text())["config_hash"] == "abc"
        with pytest.raises(ValueError):
            emit_report(rows, tmp_path / "r.txt", "xml")
