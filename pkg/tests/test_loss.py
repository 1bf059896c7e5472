import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omar.data import ClusterData
from omar.estimands import OV, SO, first_crossing
from omar.loss import (build_loss, cell_indicator, compute_c0, constant_rule_argmin, convex_split, grid_argmin,
                       loss_eval, make_loss, psi_eval, psi_table, psi_tables)
from omar.nuisance import NuisanceFit
from omar.simulation import SimConfig, TrueMu, TruePropensity, simulate

from conftest import TableModel, random_cluster

TRUE = NuisanceFit(TrueMu(), TruePropensity())


class ConstModel:
    def __init__(self, v):
        self.v = v

    def table(self, cluster):
        return np.full((cluster.n, 2, cluster.n), self.v)


def random_spec(seed, n_clusters=6, estimand=OV, variant="DR", target=0.5, delta=0.1):
    rng = np.random.default_rng(seed)
    clusters = [random_cluster(rng, int(rng.integers(1, 8)), cid=f"k{i}") for i in range(n_clusters)]
    psi = [rng.uniform(-1.5, 2.5, (c.n, 2, c.n)) for c in clusters]
    return clusters, build_loss(clusters, psi, target, estimand, variant, delta)


# --------------------------------------------------------------------------
# pseudo-outcomes


class TestPsi:
    def test_indicator_marks_observed_cell(self):
        c = ClusterData("c", [1, 0, 1], [1, 1, 0], np.zeros((3, 1)))
        ind = cell_indicator(c)
        assert ind.sum() == 3
        assert ind[0, 1, 1] == 1 and ind[1, 1, 1] == 1 and ind[2, 0, 2] == 1

    def test_dr_off_cell_is_mu(self, sim_small):
        c = sim_small[0]
        mu = TrueMu().table(c)
        ind = cell_indicator(c)
        for j in range(c.n):
            for a in (0, 1):
                for s in range(c.n):
                    if ind[j, a, s] == 0:
                        assert psi_eval("DR", a, s, c, j, TRUE) == mu[j, a, s]

    def test_dr_zero_residual(self):
        c = ClusterData("z", [1, 1], [1, 0], np.zeros((2, 1)))
        nf = NuisanceFit(ConstModel(1.0), ConstModel(0.3))
        tab = psi_table("DR", c, nf.mu_table(c), nf.e_table(c))
        assert np.all(tab == 1.0)

    def test_ipw_and_or(self):
        c = ClusterData("z", [1, 0], [1, 0], np.zeros((2, 1)))
        nf = NuisanceFit(ConstModel(0.4), ConstModel(0.25))
        assert psi_eval("IPW", 1, 0, c, 0, nf) == pytest.approx(4.0)
        assert psi_eval("IPW", 0, 1, c, 1, nf) == 0.0  # y = 0 for household 1
        assert psi_eval("IPW", 1, 1, c, 0, nf) == 0.0  # cell mismatch
        assert psi_eval("OR", 1, 1, c, 0, nf) == 0.4

    def test_bound_with_floor(self, sim_small):
        from omar.nuisance import fit_nuisances
        nf = fit_nuisances(sim_small, floor=0.01)
        for tab in psi_tables("IPW", sim_small[:50], nf) + psi_tables("DR", sim_small[:50], nf):
            assert np.abs(tab).max() <= 1 / 0.01 + 1

    def test_bad_cell(self, sim_small):
        with pytest.raises(ValueError):
            psi_eval("DR", 2, 0, sim_small[0], 0, TRUE)
        with pytest.raises(ValueError):
            psi_eval("DR", 0, sim_small[0].n, sim_small[0], 0, TRUE)
        with pytest.raises(ValueError):
            psi_eval("AIPW", 0, 0, sim_small[0], 0, TRUE)

    def test_nan_nuisance_aborts(self):
        c = ClusterData("z", [1, 0], [1, 0], np.zeros((2, 1)))
        nf = NuisanceFit(ConstModel(np.nan), ConstModel(0.5))
        with pytest.raises(ValueError, match="non-finite"):
            psi_tables("DR", [c], nf)


@pytest.fixture(scope="module")
def mc_clusters():
    return simulate(SimConfig(n_clusters=10_000, size_min=3, size_max=3), seed=123)


def cell_errors(clusters, nuisances, truth):
    """Per-(a, s) mean and standard error of psi_DR - true mu, pooled over households and clusters."""
    diffs = {}
    for c in clusters:
        tab = psi_table("DR", c, nuisances.mu_table(c), nuisances.e_table(c)) - truth.table(c)
        for a in (0, 1):
            for s in range(c.n):
                diffs.setdefault((a, s), []).append(tab[:, a, s].mean())
    out = {}
    for key, v in diffs.items():
        v = np.asarray(v)
        out[key] = (v.mean(), v.std(ddof=1) / np.sqrt(v.size))
    return out


@pytest.mark.slow
class TestDoubleRobustness:
    """With either nuisance correct, psi_DR is conditionally unbiased for the true mu."""

    def check(self, clusters, nf):
        for (a, s), (m, se) in cell_errors(clusters, nf, TrueMu()).items():
            assert abs(m) <= 3 * se, (a, s, m, se)

    def test_true_nuisances(self, mc_clusters):
        self.check(mc_clusters, TRUE)

    def test_wrong_mu(self, mc_clusters):
        self.check(mc_clusters, NuisanceFit(ConstModel(0.5), TruePropensity()))

    def test_wrong_e(self, mc_clusters):
        class Shifted:
            def table(self, cluster):
                t = TruePropensity().table(cluster)
                return np.clip(0.6 * t + 0.4 / (2 * cluster.n), 0.01, None)
        self.check(mc_clusters, NuisanceFit(TrueMu(), Shifted()))

    def test_both_wrong_is_biased(self, mc_clusters):
        # sanity: the check above has power
        errs = cell_errors(mc_clusters, NuisanceFit(ConstModel(0.5), ConstModel(0.125)), TrueMu())
        assert max(abs(m) / se for m, se in errs.values()) > 3


# --------------------------------------------------------------------------
# loss values


class TestLossEval:
    def test_continuity(self):
        clusters, spec = random_spec(0)
        for c in clusters:
            assert abs(loss_eval(-1e-9, c, spec) - loss_eval(0.0, c, spec)) <= 1e-8
            assert abs(loss_eval(1 + 1e-9, c, spec) - loss_eval(1.0, c, spec)) <= 1e-8

    def test_nonnegative_on_unit_interval(self):
        clusters, spec = random_spec(1, n_clusters=20)
        grid = np.linspace(0, 1, 201)
        for c in clusters:
            assert min(loss_eval(t, c, spec) for t in grid) >= 0

    def test_tails(self):
        clusters, spec = random_spec(2, delta=0.3)
        c = clusters[0]
        nu0, nu1 = loss_eval(0.0, c, spec), loss_eval(1.0, c, spec)
        assert loss_eval(-2.0, c, spec) == pytest.approx(nu0 + 0.3 - 0.3 * np.exp(-2.0), abs=1e-14)
        assert loss_eval(3.0, c, spec) == pytest.approx(nu1 + 0.3 - 0.3 * np.exp(-2.0), abs=1e-14)
        # bounded and monotone outside [0, 1]
        assert loss_eval(-50.0, c, spec) <= nu0 + 0.3
        assert loss_eval(50.0, c, spec) <= nu1 + 0.3

    def test_non_finite(self):
        clusters, spec = random_spec(3)
        with pytest.raises(ValueError):
            loss_eval(np.nan, clusters[0], spec)
        with pytest.raises(ValueError):
            spec.loss(np.inf)

    def test_foreign_cluster(self):
        _, spec = random_spec(3)
        with pytest.raises(KeyError):
            loss_eval(0.5, ClusterData("stranger", [0], [0], np.zeros((1, 2))), spec)

    @pytest.mark.parametrize("estimand", [OV, SO])
    def test_derivative_is_integrand(self, estimand):
        clusters, spec = random_spec(5, estimand=estimand, target=0.4)
        h = 1e-5
        for i, c in enumerate(clusters):
            w, d = spec.weights[i], spec.deg[i]
            for t in (0.13, 0.5, 0.77):
                fd = (loss_eval(t + h, c, spec) - loss_eval(t - h, c, spec)) / (2 * h)
                k = np.arange(d + 1)
                integrand = float((w[: d + 1] * t**k * (1 - t) ** (d - k)).sum()) - 0.4
                assert fd == pytest.approx(integrand, abs=1e-6)

    def test_integrand_from_raw_psi(self):
        # the same identity written directly in terms of psi, without the Bernstein bookkeeping
        from math import comb
        rng = np.random.default_rng(6)
        c = random_cluster(rng, 4)
        psi = rng.uniform(0, 1, (4, 2, 4))
        spec = build_loss([c], [psi], 0.3)
        t, h, n = 0.41, 1e-5, 4
        direct = sum(comb(n - 1, s) * psi[j, a, s] * t ** (a + s) * (1 - t) ** (n - a - s)
                     for j in range(n) for a in (0, 1) for s in range(n)) / n - 0.3
        fd = (loss_eval(t + h, c, spec) - loss_eval(t - h, c, spec)) / (2 * h)
        assert fd == pytest.approx(direct, abs=1e-6)

    def test_kahan_matches_quadrature(self):
        _, spec = random_spec(7, n_clusters=30)
        t = np.random.default_rng(7).uniform(0, 1, spec.size)
        assert np.allclose(spec.nu(t), spec.nu_quadrature(t), atol=1e-10)

    def test_large_cluster_quadrature(self):
        rng = np.random.default_rng(8)
        clusters = [random_cluster(rng, 30, cid=f"b{i}") for i in range(3)]
        psi = [rng.uniform(0, 1, (30, 2, 30)) for _ in clusters]
        spec = build_loss(clusters, psi, 0.6)
        t = np.array([0.2, 0.55, 0.95])
        assert np.allclose(spec.nu(t), spec.nu_quadrature(t), atol=1e-9)

    @pytest.mark.parametrize("delta", [0.01, 0.1, 1.0])
    def test_delta_invariance(self, delta):
        clusters, base = random_spec(9, delta=0.1)
        _, other = random_spec(9, delta=delta)
        grid = np.linspace(0, 1, 101)
        for t in grid:
            assert np.array_equal(base.loss(np.full(base.size, t)), other.loss(np.full(other.size, t)))

    def test_c0_shift_keeps_argmin(self):
        rng = np.random.default_rng(10)
        clusters = [random_cluster(rng, 3, cid=f"k{i}") for i in range(5)]
        psi = [rng.uniform(0, 1, (3, 2, 3)) for _ in clusters]
        a = build_loss(clusters, psi, 0.5)
        b = build_loss(clusters, psi, 0.5, c0=a.c0 + 17.0)
        assert np.array_equal(grid_argmin(a), grid_argmin(b))
        assert constant_rule_argmin(a) == constant_rule_argmin(b)
        assert np.allclose(b.nu_grid([0.3]) - a.nu_grid([0.3]), 17.0)


# --------------------------------------------------------------------------
# C0


class TestC0:
    def test_zero_psi(self):
        c = ClusterData("z", [0, 0], [0, 0], np.zeros((2, 1)))
        assert compute_c0([c], [np.zeros((2, 2, 2))], 0.5) == pytest.approx(1.5, abs=1e-12)

    def test_psi_above_target(self):
        c = ClusterData("z", [0, 0, 0], [0, 0, 0], np.zeros((3, 1)))
        assert compute_c0([c], [np.full((3, 2, 3), 0.9)], 0.5) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), estimand=st.sampled_from([OV, SO]),
           target=st.floats(0.0, 1.0))
    def test_nu_at_least_one(self, seed, estimand, target):
        _, spec = random_spec(seed, estimand=estimand, target=target)
        grid = np.linspace(0, 1, 10_001)
        assert spec.nu_grid(grid).min() >= 1 - 1e-9


# --------------------------------------------------------------------------
# convex split


class TestSplit:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), estimand=st.sampled_from([OV, SO]), delta=st.sampled_from([0.01, 0.1, 1.0]))
    def test_identity(self, seed, estimand, delta):
        clusters, spec = random_spec(seed, estimand=estimand, delta=delta)
        grid = np.linspace(-0.5, 1.5, 101)
        for c in clusters:
            for t in grid:
                lp, lm, _ = convex_split(t, c, spec)
                assert lp - lm == pytest.approx(loss_eval(t, c, spec), abs=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), estimand=st.sampled_from([OV, SO]))
    def test_convex_and_nondecreasing(self, seed, estimand):
        _, spec = random_spec(seed, estimand=estimand)
        grid = np.linspace(-2, 2, 401)
        lp = np.array([spec.split(np.full(spec.size, t))[0] for t in grid]).T
        lm = np.array([spec.split(np.full(spec.size, t))[2] for t in grid]).T
        for part in (lp, lm):
            assert np.diff(part, 2, axis=1).min() >= -1e-8
            assert np.diff(part, axis=1).min() >= -1e-12

    def test_subgradient_matches_finite_difference(self):
        clusters, spec = random_spec(11)
        h = 1e-6
        for c in clusters:
            for t in (-0.7, 0.3, 0.8, 1.6):
                _, lm_hi, _ = convex_split(t + h, c, spec)
                _, lm_lo, _ = convex_split(t - h, c, spec)
                assert convex_split(t, c, spec)[2] == pytest.approx((lm_hi - lm_lo) / (2 * h), abs=1e-5)

    def test_kink_subgradient_is_average(self):
        clusters, spec = random_spec(12)
        h = 1e-7
        for c in clusters:
            for t in (0.0, 1.0):
                left = (convex_split(t, c, spec)[1] - convex_split(t - h, c, spec)[1]) / h
                right = (convex_split(t + h, c, spec)[1] - convex_split(t, c, spec)[1]) / h
                assert convex_split(t, c, spec)[2] == pytest.approx(0.5 * (left + right), rel=1e-6, abs=1e-5)


# --------------------------------------------------------------------------
# minimizers


def test_grid_argmin_is_first_crossing():
    rng = np.random.default_rng(13)
    clusters = [random_cluster(rng, int(rng.integers(1, 6)), cid=f"k{i}") for i in range(40)]
    tables = [np.sort(rng.uniform(0, 1, (c.n, 2, c.n)), axis=2) for c in clusters]
    for t in tables:
        t[:, 1] = np.maximum(t[:, 1], t[:, 0])
    spec = build_loss(clusters, tables, 0.5)
    grid = np.linspace(0, 1, 1001)
    surf = spec.surface_grid(grid)
    r = grid_argmin(spec)
    for i in range(len(clusters)):
        cross = first_crossing(surf[i], grid, 0.5)
        assert abs(r[i] - cross) <= 1e-3 + 1e-12


def test_constant_rule_recovers_pooled_crossing(sim_small):
    # with OR pseudo-outcomes the empirical risk over constant rules is minimized at
    # the first crossing of the sample-averaged surface
    spec = make_loss(sim_small, TRUE, 0.7, psi_variant="OR")
    grid = np.linspace(0, 1, 1001)
    pooled = spec.surface_grid(grid).mean(axis=0)
    assert abs(constant_rule_argmin(spec) - first_crossing(pooled, grid, 0.7)) <= 1e-3 + 1e-12


def test_make_loss_matches_build(sim_small):
    sub = sim_small[:20]
    a = make_loss(sub, TRUE, 0.6, SO, "IPW")
    b = build_loss(sub, psi_tables("IPW", sub, TRUE), 0.6, SO, "IPW")
    assert np.array_equal(a.coef, b.coef) and a.c0 == b.c0
    assert a.cluster_ids == tuple(c.cluster_id for c in sub)


def test_table_model_protocol():
    rng = np.random.default_rng(14)
    c = random_cluster(rng, 3, cid="t")
    tab = rng.uniform(0, 1, (3, 2, 3))
    nf = NuisanceFit(TableModel({"t": tab}), TableModel({"t": np.full((3, 2, 3), 0.5)}))
    assert psi_eval("OR", 1, 2, c, 0, nf) == tab[0, 1, 2]
