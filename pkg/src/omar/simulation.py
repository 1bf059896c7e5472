"""Synthetic clustered data with known nuisances, the true-OMAR oracle, and the
block-aggregation bias demonstration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np
from scipy.special import expit

from .data import M_CAP, ClusterData
from .estimands import OV, alpha_grid, check_target, first_crossing, omar_batch
from .kernels import loo_pb
from .seeds import stage_rng


@dataclass(frozen=True)
class SimConfig:
    n_clusters: int = 1000
    size_min: int = 2
    size_max: int = 5
    seed: int = 0
    # treatment model: expit(treat_scale * (treat_shift + W1 + W2 + W3 + C))
    treat_shift: float = -2.0
    treat_scale: float = 0.25
    # outcome model
    intercept: float = -0.35
    ego_a: float = 0.1
    ego_a_quad: float = 0.25
    peer_a: float = 0.05
    peer_a_quad: float = 0.15
    lin: float = 0.1
    quad: float = 0.25
    peer_lin: float = 0.05

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be positive")
        if not (1 <= self.size_min <= self.size_max <= M_CAP):
            raise ValueError(f"cluster sizes must satisfy 1 <= min <= max <= {M_CAP}")
        if min(self.ego_a, self.ego_a_quad, self.peer_a, self.peer_a_quad) < 0:
            raise ValueError("treatment coefficients must be non-negative (monotone outcome model)")

    def null_treatment(self) -> "SimConfig":
        return SimConfig(**{**asdict(self), "ego_a": 0.0, "ego_a_quad": 0.0, "peer_a": 0.0, "peer_a_quad": 0.0})


def peer_means(x: np.ndarray) -> np.ndarray:
    """Row j: mean of the other rows (zeros for a singleton)."""
    n = x.shape[0]
    if n == 1:
        return np.zeros_like(x)
    return (x.sum(axis=0, keepdims=True) - x) / (n - 1)


def true_propensity(x: np.ndarray, config: SimConfig = SimConfig()) -> np.ndarray:
    """P(A=1 | x) for covariate rows [W1, W2, W3, C]."""
    x = np.asarray(x, dtype=float)
    return expit(config.treat_scale * (config.treat_shift + x[..., :4].sum(axis=-1)))


def true_mu(a, abar_peer, x_ego, peer_mean, config: SimConfig = SimConfig()):
    """Outcome probability given own treatment, treated-peer fraction, own covariates
    [W1, W2, W3, C] and the peers' mean covariates (only the W columns are used)."""
    a = np.asarray(a, dtype=float)
    abar = np.asarray(abar_peer, dtype=float)
    x = np.asarray(x_ego, dtype=float)
    pm = np.asarray(peer_mean, dtype=float)
    w1, w2, w3, c = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    pw1, pw2, pw3 = pm[..., 0], pm[..., 1], pm[..., 2]
    eta = (
        config.intercept
        + (config.ego_a + config.ego_a_quad * (c + w1) ** 2) * a
        + (config.peer_a + config.peer_a_quad * (pw2 + pw3) ** 2) * abar
        + config.lin * (c + w1 + w2 + w3)
        + config.quad * (c**2 + w1**2 + w2**2 + w3**2)
        + config.peer_lin * (pw1 + pw2 + pw3)
    )
    return expit(eta)


class TrueMu:
    """The data-generating outcome regression, exposing the mu-table protocol."""

    def __init__(self, config: SimConfig = SimConfig()):
        self.config = config

    def table(self, cluster: ClusterData) -> np.ndarray:
        n = cluster.n
        pm = peer_means(cluster.x)
        s = np.arange(n) / max(n - 1, 1)
        a = np.array([0.0, 1.0])
        return true_mu(a[None, :, None], s[None, None, :], cluster.x[:, None, None, :], pm[:, None, None, :], self.config)

    def household(self, cluster: ClusterData) -> np.ndarray:
        """mu at the observed (A_ij, Abar_i(-j))."""
        return true_mu(cluster.a, cluster.peer_fraction(), cluster.x, peer_means(cluster.x), self.config)

    def at(self, cluster: ClusterData, a: float, abar: float) -> np.ndarray:
        return true_mu(a, abar, cluster.x, peer_means(cluster.x), self.config)


class TruePropensity:
    """Exact e(a, s | X_i): ego Bernoulli times the Poisson-binomial law of treated peers."""

    def __init__(self, config: SimConfig = SimConfig()):
        self.config = config

    def table(self, cluster: ClusterData) -> np.ndarray:
        p = true_propensity(cluster.x, self.config)
        peers = loo_pb(np.ascontiguousarray(p))
        return np.stack([(1.0 - p)[:, None] * peers, p[:, None] * peers], axis=1)


def simulate(config: SimConfig = SimConfig(), seed: int | None = None) -> list[ClusterData]:
    """Draw a dataset; each cluster uses its own generator keyed on (seed, index)."""
    seed = config.seed if seed is None else seed
    width = len(str(config.n_clusters))
    out = []
    for i in range(config.n_clusters):
        rng = stage_rng(seed, "simulate", i)
        n = int(rng.integers(config.size_min, config.size_max + 1))
        w = rng.standard_normal((n, 3))
        c = rng.standard_normal()
        x = np.column_stack([w, np.full(n, c)])
        a = (rng.random(n) < true_propensity(x, config)).astype(np.int64)
        abar = (a.sum() - a) / max(n - 1, 1)
        mu = true_mu(a, abar, x, peer_means(x), config)
        y = (rng.random(n) < mu).astype(np.int64)
        out.append(ClusterData(f"c{i + 1:0{width}d}", y, a, x))
    return out


def true_omar_oracle(cluster: ClusterData, target: float, estimand: str = OV, grid_step: float = 1e-3,
                     config: SimConfig = SimConfig()) -> float:
    return float(omar_batch([TrueMu(config).table(cluster)], target, estimand, grid_step)[0])


def true_omars(clusters, target: float, estimand: str = OV, grid_step: float = 1e-3,
               config: SimConfig = SimConfig()) -> np.ndarray:
    mu = TrueMu(config)
    return omar_batch([mu.table(c) for c in clusters], target, estimand, grid_step)


# --------------------------------------------------------------------------
# block-aggregation bias


@dataclass(frozen=True)
class BiasDemoConfig:
    n: int = 10
    q_values: tuple = (0.4, 0.6, 0.8)
    p_values: tuple = (1, 2, 5)
    beta0: float = 0.0
    beta1: float = 0.0
    target: float = 0.2
    grid_step: float = 1e-3

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("bias demo needs clusters of size >= 2")
        for q in self.q_values:
            if not (0.0 <= q < 1.0):
                raise ValueError(f"q_a must lie in [0, 1), got {q}")
        for p in self.p_values:
            if int(p) != p or p < 1:
                raise ValueError(f"p must be a positive integer, got {p}")
        check_target(self.target)


def threshold_beta2(q: float, p: int, beta0: float = 0.0, beta1: float = 0.0) -> float:
    """Spillover scale that maps the response range over abar in [0, 1] onto [0, 1]."""
    top = (1.0 - q) ** p
    if top <= 0 or 1.0 - beta0 - beta1 <= 0:
        raise ValueError(f"degenerate response range for q_a={q}, p={p}")
    return (1.0 - beta0 - beta1) / top


def threshold_mu(a, abar, q: float, p: int, beta0: float, beta1: float, beta2: float):
    return beta0 + beta1 * np.asarray(a, float) + beta2 * np.maximum(np.asarray(abar, float) - q, 0.0) ** p


def bias_demo(config: BiasDemoConfig = BiasDemoConfig()) -> list[dict]:
    """Household-level OMAR versus the OMAR read off the block-level response E[Ybar | Abar].

    Under complete randomization the block response at Abar = k/n is exact:
    k treated units see (k-1)/(n-1) treated peers, the rest see k/(n-1).
    It only exists on the k/n lattice, so the block rule is the smallest k/n
    meeting the target.
    """
    n = config.n
    grid = alpha_grid(config.grid_step)
    s = np.arange(n)
    cb = np.array([comb(n - 1, k) for k in s], dtype=float)
    k = np.arange(n + 1)
    records = []
    for q in config.q_values:
        for p in config.p_values:
            b2 = threshold_beta2(q, p, config.beta0, config.beta1)
            m0 = threshold_mu(0, s / (n - 1), q, p, config.beta0, config.beta1, b2)
            m1 = threshold_mu(1, s / (n - 1), q, p, config.beta0, config.beta1, b2)
            basis = cb[None, :] * grid[:, None] ** s[None, :] * (1 - grid[:, None]) ** (n - 1 - s)[None, :]
            # tau_OV = alpha * E[mu(1, .)] + (1 - alpha) * E[mu(0, .)] with Bin(n-1, alpha) peers
            tau = grid * (basis @ m1) + (1 - grid) * (basis @ m0)
            true = first_crossing(tau, grid, config.target)
            treated = threshold_mu(1, np.maximum(k - 1, 0) / (n - 1), q, p, config.beta0, config.beta1, b2)
            control = threshold_mu(0, np.minimum(k, n - 1) / (n - 1), q, p, config.beta0, config.beta1, b2)
            block = (k / n) * treated + ((n - k) / n) * control
            naive = first_crossing(block, k / n, config.target)
            records.append({"q_a": float(q), "p": int(p), "beta2": b2, "naive_omar": naive,
                            "true_omar": true, "difference": naive - true})
    return records


# --------------------------------------------------------------------------
# survey-like synthetic profile (larger, heterogeneous clusters, 9 covariates)


@dataclass(frozen=True)
class SurveyConfig:
    n_clusters: int = 1027
    d: int = 9
    mean_size: float = 9.0
    seed: int = 0
    coef: tuple = field(default=(0.3, -0.2, 0.15, 0.1, 0.0, -0.1, 0.05, 0.2, -0.05))


def simulate_survey(config: SurveyConfig = SurveyConfig(), seed: int | None = None) -> list[ClusterData]:
    """Cluster sizes 1..30, a shared cluster effect, and a monotone logistic outcome
    whose base rate sits near 0.7."""
    seed = config.seed if seed is None else seed
    beta = np.resize(np.asarray(config.coef, float), config.d)
    width = len(str(config.n_clusters))
    out = []
    for i in range(config.n_clusters):
        rng = stage_rng(seed, "survey", i)
        n = int(np.clip(rng.poisson(config.mean_size - 1) + 1, 1, M_CAP))
        u = rng.standard_normal(config.d)
        x = 0.6 * u[None, :] + 0.8 * rng.standard_normal((n, config.d))
        a = (rng.random(n) < expit(-0.2 + 0.4 * x[:, 0] - 0.3 * x[:, 1])).astype(np.int64)
        abar = (a.sum() - a) / max(n - 1, 1)
        eta = 0.6 + x @ beta * 0.5 + (0.3 + 0.2 * x[:, 2] ** 2) * a + (0.5 + 0.2 * x[:, 3] ** 2) * abar
        y = (rng.random(n) < expit(eta)).astype(np.int64)
        out.append(ClusterData(f"s{i + 1:0{width}d}", y, a, x))
    return out
