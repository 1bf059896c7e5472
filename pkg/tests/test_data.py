import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omar.data import (ClusterData, DataError, cluster_features, cluster_means, parse_csv, read_csv,
                       validate_dataset, write_csv)
from omar.simulation import SimConfig, simulate

FIXTURE = """cluster_id,household_id,y,a,x1,x2
A,1,1,0,0.5,1.0
A,2,0,1,-0.5,2.0
B,1,1,1,0.0,0.0
B,2,0,0,1.0,-1.0
B,3,1,0,2.0,3.0
"""


def test_two_cluster_fixture():
    data = parse_csv(io.StringIO(FIXTURE))
    assert [c.cluster_id for c in data] == ["A", "B"]
    assert [c.n for c in data] == [2, 3]
    assert data[1].x.tolist() == [[0.0, 0.0], [1.0, -1.0], [2.0, 3.0]]
    assert data[0].household_ids == ("1", "2")


def test_bad_outcome_cites_line():
    text = FIXTURE + "B,4,2,0,1.0,1.0\n"  # header is line 1, so this row is line 7
    with pytest.raises(DataError, match="line 7"):
        parse_csv(io.StringIO(text))


def test_missing_column():
    with pytest.raises(DataError, match="line 1"):
        parse_csv(io.StringIO("cluster_id,household_id,y,x1\nA,1,1,0.5\n"))


def test_ragged_row():
    with pytest.raises(DataError, match="line 3"):
        parse_csv(io.StringIO("cluster_id,household_id,y,a,x1\nA,1,1,0,0.5\nA,2,1,0\n"))


def test_non_binary_treatment():
    with pytest.raises(DataError, match="line 2"):
        parse_csv(io.StringIO("cluster_id,household_id,y,a,x1\nA,1,1,3,0.5\n"))


def test_non_numeric_covariate():
    with pytest.raises(DataError, match="line 2"):
        parse_csv(io.StringIO("cluster_id,household_id,y,a,x1\nA,1,1,0,abc\n"))


def test_interleaved_rows_grouped_in_order():
    text = "cluster_id,household_id,y,a,x1\nA,1,1,0,0\nB,1,0,0,1\nA,2,0,1,2\n"
    data = parse_csv(io.StringIO(text))
    assert [c.cluster_id for c in data] == ["A", "B"]
    assert data[0].x[:, 0].tolist() == [0.0, 2.0]


def test_round_trip(tmp_path):
    data = simulate(SimConfig(n_clusters=50), seed=4)
    write_csv(data, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv")
    assert len(back) == len(data)
    assert all(a.same_as(b) for a, b in zip(data, back))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 12))
def test_round_trip_property(tmp_path_factory, seed, n):
    r = np.random.default_rng(seed)
    data = [ClusterData(f"k{i}", r.integers(0, 2, m), r.integers(0, 2, m), r.standard_normal((m, 3)) * 1e3)
            for i, m in enumerate(r.integers(1, 6, n))]
    p = tmp_path_factory.mktemp("rt") / "x.csv"
    write_csv(data, p)
    assert all(a.same_as(b) for a, b in zip(data, read_csv(p)))


def test_cluster_validation():
    with pytest.raises(DataError):
        ClusterData("a", [0, 1], [0], np.zeros((2, 1)))
    with pytest.raises(DataError):
        ClusterData("a", [0, 2], [0, 1], np.zeros((2, 1)))
    c = ClusterData("a", [0, 1], [1, 1], np.zeros((2, 1)))
    with pytest.raises(ValueError):
        c.y[0] = 1


def test_dataset_validation():
    a = ClusterData("a", [0], [0], np.zeros((1, 2)))
    b = ClusterData("b", [0], [0], np.zeros((1, 3)))
    with pytest.raises(DataError, match="covariates"):
        validate_dataset([a, b])
    with pytest.raises(DataError, match="duplicate"):
        validate_dataset([a, a])
    big = ClusterData("c", np.zeros(31, int), np.zeros(31, int), np.zeros((31, 2)))
    with pytest.raises(DataError, match="cap"):
        validate_dataset([big])


def test_peer_views():
    c = ClusterData("a", [0, 1, 1], [1, 0, 1], np.zeros((3, 1)))
    assert c.peer_counts().tolist() == [1, 2, 1]
    assert c.peer_fraction().tolist() == [0.5, 1.0, 0.5]
    single = ClusterData("s", [1], [1], np.zeros((1, 1)))
    assert single.peer_fraction().tolist() == [0.0]


def test_features_and_means():
    data = parse_csv(io.StringIO(FIXTURE))
    f = cluster_features(data)
    assert f[0].tolist() == [0.0, 1.5, 2.0]
    ybar, abar = cluster_means(data)
    assert ybar.tolist() == [0.5, 2 / 3]
    assert abar.tolist() == [0.5, 1 / 3]
