import itertools

import numpy as np
import pytest

from omar.data import ClusterData
from omar.simulation import SimConfig, simulate


def enumerate_ov(tab, alpha):
    """Average potential outcome under Bernoulli(alpha), summed over all 2^n treatment vectors."""
    n = tab.shape[0]
    total = 0.0
    for vec in itertools.product((0, 1), repeat=n):
        vec = np.array(vec)
        w = np.prod(np.where(vec == 1, alpha, 1.0 - alpha))
        s = vec.sum() - vec
        total += w * np.mean([tab[j, vec[j], s[j]] for j in range(n)])
    return total


def enumerate_so(tab, alpha):
    """Untreated-ego outcome averaged over peers' Bernoulli(alpha) vectors."""
    n = tab.shape[0]
    if n == 1:
        return tab[0, 0, 0]
    total = 0.0
    for j in range(n):
        for vec in itertools.product((0, 1), repeat=n - 1):
            vec = np.array(vec)
            w = np.prod(np.where(vec == 1, alpha, 1.0 - alpha))
            total += w * tab[j, 0, vec.sum()]
    return total / n


def subset_pb(p):
    """P(sum of independent Bernoulli(p_k) = s) by enumerating every subset."""
    n = len(p)
    out = np.zeros(n + 1)
    for vec in itertools.product((0, 1), repeat=n):
        vec = np.array(vec, dtype=int)
        out[vec.sum()] += np.prod(np.where(vec == 1, p, 1.0 - p))
    return out


def random_cluster(rng, n, d=2, cid="c"):
    return ClusterData(cid, rng.integers(0, 2, n), rng.integers(0, 2, n), rng.standard_normal((n, d)))


class TableModel:
    """Fixed per-cluster tables keyed by cluster id (mu-table protocol)."""

    def __init__(self, tables):
        self.tables = tables

    def table(self, cluster):
        return self.tables[cluster.cluster_id]

    def household(self, cluster):
        tab = self.tables[cluster.cluster_id]
        return tab[np.arange(cluster.n), cluster.a, cluster.peer_counts()]


@pytest.fixture(scope="session")
def sim_small():
    return simulate(SimConfig(n_clusters=200), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
