import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from omar.data import ClusterData
from omar.estimands import OV, SO, first_crossing, indirect_rule
from omar.simulation import (BiasDemoConfig, SimConfig, SurveyConfig, TrueMu, TruePropensity, bias_demo, peer_means,
                             simulate, simulate_survey, threshold_beta2, true_mu, true_omar_oracle, true_omars,
                             true_propensity)

from conftest import enumerate_ov, subset_pb


@pytest.fixture(scope="module")
def big():
    return simulate(SimConfig(n_clusters=29_000), seed=1)


class TestSimulate:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimConfig(n_clusters=0)
        with pytest.raises(ValueError):
            SimConfig(size_min=3, size_max=2)
        with pytest.raises(ValueError):
            SimConfig(size_max=31)
        with pytest.raises(ValueError):
            SimConfig(ego_a=-0.1)

    def test_shapes_and_sizes(self, sim_small):
        assert len(sim_small) == 200
        assert all(2 <= c.n <= 5 and c.d == 4 for c in sim_small)
        # C is shared within a cluster
        assert all(np.all(c.x[:, 3] == c.x[0, 3]) for c in sim_small)
        assert {c.n for c in sim_small} == {2, 3, 4, 5}

    def test_deterministic(self):
        a = simulate(SimConfig(n_clusters=40), seed=5)
        b = simulate(SimConfig(n_clusters=40), seed=5)
        assert all(x.same_as(y) for x, y in zip(a, b))
        c = simulate(SimConfig(n_clusters=40), seed=6)
        assert not all(x.same_as(y) for x, y in zip(a, c))

    def test_prefix_stable(self):
        # per-cluster seeding: a larger draw extends a smaller one
        a = simulate(SimConfig(n_clusters=10), seed=5)
        b = simulate(SimConfig(n_clusters=100), seed=5)
        assert all(np.array_equal(x.x, y.x) and np.array_equal(x.y, y.y) for x, y in zip(a, b))

    def test_treatment_rate(self, big):
        a = np.concatenate([c.a for c in big])
        assert a.size >= 100_000
        f = lambda z: expit(0.25 * (-2 + z)) * stats.norm.pdf(z, scale=2.0)
        expected = integrate.quad(f, -np.inf, np.inf)[0]
        assert abs(a.mean() - expected) <= 0.01

    def test_cell_means_at_size_two(self):
        data = simulate(SimConfig(n_clusters=40_000, size_min=2, size_max=2), seed=3)
        mu = TrueMu()
        y = np.concatenate([c.y for c in data])
        a = np.concatenate([c.a for c in data])
        s = np.concatenate([c.peer_counts() for c in data])
        m = np.concatenate([mu.household(c) for c in data])
        for cell in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            sel = (a == cell[0]) & (s == cell[1])
            d = y[sel] - m[sel]
            assert abs(d.mean()) <= 3 * d.std(ddof=1) / np.sqrt(sel.sum())

    def test_null_treatment(self):
        # A and Y share covariates, so independence is tested on Y - mu(x)
        cfg = SimConfig(n_clusters=29_000).null_treatment()
        data = simulate(cfg, seed=2)
        mu = TrueMu(cfg)
        y = np.concatenate([c.y for c in data])
        a = np.concatenate([c.a for c in data])
        resid = y - np.concatenate([mu.household(c) for c in data])
        assert y.size >= 100_000
        assert stats.ttest_ind(resid[a == 1], resid[a == 0]).pvalue > 0.001

    def test_overlap(self, big):
        p = np.concatenate([true_propensity(c.x) for c in big])
        assert p.min() > 0 and p.max() < 1

    def test_survey_profile(self):
        data = simulate_survey(SurveyConfig(n_clusters=300), seed=1)
        sizes = np.array([c.n for c in data])
        assert sizes.min() >= 1 and sizes.max() <= 30 and data[0].d == 9
        ybar = np.mean(np.concatenate([c.y for c in data]))
        assert 0.55 < ybar < 0.85


class TestTrueMu:
    def test_intercept(self):
        assert true_mu(0, 0, np.zeros(4), np.zeros(4)) == pytest.approx(expit(-0.35), abs=1e-15)

    def test_monotone(self, rng):
        x = rng.standard_normal((10_000, 4)) * 2
        pm = rng.standard_normal((10_000, 4))
        ab = rng.random(10_000)
        assert np.all(true_mu(1, ab, x, pm) >= true_mu(0, ab, x, pm))
        assert np.all(true_mu(1, np.minimum(ab + 0.1, 1), x, pm) >= true_mu(1, ab, x, pm))

    def test_table_layout(self, sim_small):
        c = sim_small[0]
        tab = TrueMu().table(c)
        pm = peer_means(c.x)
        j, a, s = c.n - 1, 1, 1
        assert tab[j, a, s] == pytest.approx(float(true_mu(a, s / (c.n - 1), c.x[j], pm[j])), abs=1e-15)

    def test_true_propensity_table(self, sim_small):
        c = sim_small[3]
        tab = TruePropensity().table(c)
        p = true_propensity(c.x)
        assert np.allclose(tab[0, 1], p[0] * subset_pb(p[1:]), atol=1e-14)
        assert np.allclose(tab.sum(axis=(1, 2)), 1.0)


class TestOracle:
    def test_extremes(self, sim_small):
        assert np.all(true_omars(sim_small, 0.0) == 0.0)
        assert np.all(true_omars(sim_small, 1.0) == 1.0)

    def test_size_two_enumeration(self, rng):
        grid = np.linspace(0, 1, 1001)
        for k in range(20):
            x = np.column_stack([rng.standard_normal((2, 3)), np.full(2, rng.standard_normal())])
            c = ClusterData(f"e{k}", [0, 0], [0, 0], x)
            tab = TrueMu().table(c)
            surf = np.array([enumerate_ov(tab, al) for al in grid])
            for target in (0.4, 0.6, 0.8):
                assert abs(true_omar_oracle(c, target) - first_crossing(surf, grid, target)) <= 1e-3 + 1e-12

    @pytest.mark.parametrize("estimand", [OV, SO])
    def test_matches_indirect_rule(self, sim_small, estimand):
        mu = lambda a, abar, cluster, j: float(true_mu(a, abar, cluster.x[j], peer_means(cluster.x)[j]))
        for c in sim_small[:15]:
            assert abs(indirect_rule(mu, c, 0.7, estimand) - true_omar_oracle(c, 0.7, estimand)) <= 1e-3 + 1e-12


class TestBiasDemo:
    def test_beta2_scaling(self):
        assert threshold_beta2(0.6, 2) == pytest.approx(1 / 0.16)
        with pytest.raises(ValueError):
            threshold_beta2(0.5, 1, beta0=0.6, beta1=0.4)
        with pytest.raises(ValueError):
            BiasDemoConfig(q_values=(1.0,))
        with pytest.raises(ValueError):
            BiasDemoConfig(p_values=(1.5,))

    def test_linear_case_aggregates(self):
        rec = bias_demo(BiasDemoConfig(q_values=(0.0,), p_values=(1,)))[0]
        assert abs(rec["difference"]) <= 1e-3 + 1e-12

    def test_published_range(self):
        recs = bias_demo()
        assert len(recs) == 9
        for r in recs:
            assert 0.05 <= abs(r["difference"]) <= 0.19, r

    def test_grid_refinement(self):
        coarse = bias_demo(BiasDemoConfig(grid_step=1e-3))
        fine = bias_demo(BiasDemoConfig(grid_step=1e-4))
        for a, b in zip(coarse, fine):
            assert np.sign(a["difference"]) == np.sign(b["difference"])
            assert abs(a["difference"] - b["difference"]) <= 1e-3 + 1e-12
