"""Outcome-regression and propensity models for clustered treatments.

Every fitted model exposes ``table(cluster)`` returning an (n, 2, n) array
indexed by (household j, own treatment a, treated peers s), the layout that
the estimand and loss code consume. Household covariates are unified to a
fixed width regardless of cluster size: own x, componentwise max and min over
peers, and a peer-presence flag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .data import M_CAP, ClusterData
from .kernels import loo_pb, nw_loo, nw_predict
from .seeds import stage_rng

PROPENSITY_FLOOR = 0.01
LAMBDA_GRID = tuple(10.0 ** np.arange(-5, 1))


class NuisanceFitError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# covariate unification


@dataclass(frozen=True)
class UnifiedCovariates:
    ego: np.ndarray
    peer_max: np.ndarray
    peer_min: np.ndarray
    has_peers: bool
    n: int

    def vector(self) -> np.ndarray:
        return np.concatenate([self.ego, self.peer_max, self.peer_min, [float(self.has_peers)]])


def unify_covariates(cluster: ClusterData, j: int) -> UnifiedCovariates:
    if not (0 <= j < cluster.n):
        raise IndexError(f"household index {j} out of range for cluster of size {cluster.n}")
    row = unified_block(cluster)[j]
    d = cluster.d
    return UnifiedCovariates(row[:d], row[d : 2 * d], row[2 * d : 3 * d], bool(row[-1]), cluster.n)


def unified_block(cluster: ClusterData) -> np.ndarray:
    """Unified covariate rows for all households of a cluster, shape (n, 3d + 1)."""
    x = cluster.x
    n, d = x.shape
    out = np.zeros((n, 3 * d + 1))
    out[:, :d] = x
    if n > 1:
        for j in range(n):
            peers = np.delete(x, j, axis=0)
            out[j, d : 2 * d] = peers.max(axis=0)
            out[j, 2 * d : 3 * d] = peers.min(axis=0)
        out[:, -1] = 1.0
    return out


def household_frame(clusters: Sequence[ClusterData]):
    """Stacked household rows: y, a, abar_peer, unified z and cluster index."""
    y, a, abar, z, grp = [], [], [], [], []
    for i, c in enumerate(clusters):
        y.append(c.y)
        a.append(c.a)
        abar.append(c.peer_fraction())
        z.append(unified_block(c))
        grp.append(np.full(c.n, i))
    return (np.concatenate(y).astype(float), np.concatenate(a).astype(float), np.concatenate(abar),
            np.vstack(z), np.concatenate(grp))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, z: np.ndarray) -> "Standardizer":
        sd = z.std(axis=0)
        return cls(z.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], float), np.asarray(d["scale"], float))


# --------------------------------------------------------------------------
# ridge logistic regression (Newton with step halving)


def ridge_logistic(X: np.ndarray, y: np.ndarray, lam: float, max_iter: int = 100, tol: float = 1e-10,
                   cond_max: float = 1e14) -> np.ndarray:
    """Minimize mean log-loss + lam/2 * ||beta[1:]||^2; column 0 is the unpenalized intercept."""
    m, p = X.shape
    pen = np.full(p, lam)
    pen[0] = 0.0
    ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    beta = np.zeros(p)
    beta[0] = np.log(ybar / (1 - ybar))

    def objective(b):
        eta = X @ b
        return -np.mean(y * log_expit(eta) + (1 - y) * log_expit(-eta)) + 0.5 * np.dot(pen * b, b)

    obj = objective(beta)
    for _ in range(max_iter):
        mu = expit(X @ beta)
        grad = X.T @ (mu - y) / m + pen * beta
        w = mu * (1 - mu)
        H = (X * w[:, None]).T @ X / m + np.diag(pen)
        # tiny ridge on the intercept keeps H invertible for separated data
        H[0, 0] += 1e-12
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > cond_max:
            raise NuisanceFitError(f"ill-conditioned logistic fit (condition number {cond:.3g}, lambda={lam:g})")
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-10:
            cand = beta - t * step
            new = objective(cand)
            if new <= obj + 1e-14:
                break
            t *= 0.5
        beta, obj = cand, new
        if np.max(np.abs(t * step)) < tol:
            return beta
    gnorm = float(np.linalg.norm(X.T @ (expit(X @ beta) - y) / m + pen * beta))
    if gnorm > 1e-6:
        raise NuisanceFitError(f"logistic fit did not converge (gradient norm {gnorm:.3g})")
    return beta


def group_folds(groups: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Assign whole clusters to k folds."""
    ids = np.unique(groups)
    perm = rng.permutation(ids.size)
    fold_of = np.empty(ids.size, dtype=int)
    fold_of[perm] = np.arange(ids.size) % k
    return fold_of[np.searchsorted(ids, groups)]


def deviance(y, p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return -2.0 * np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))


def cv_ridge_logistic(X, y, groups, rng, grid=LAMBDA_GRID, folds: int = 5) -> tuple[float, np.ndarray]:
    """Pick the penalty by grouped k-fold deviance, refit on everything."""
    grid = sorted(grid)
    if len(grid) == 1 or np.unique(groups).size < folds:
        lam = grid[-1] if np.unique(groups).size < folds else grid[0]
        return lam, ridge_logistic(X, y, lam)
    fold = group_folds(groups, folds, rng)
    scores = []
    for lam in grid:
        dev = 0.0
        try:
            for f in range(folds):
                tr, te = fold != f, fold == f
                if np.unique(y[tr]).size < 2:
                    b = np.zeros(X.shape[1])
                    b[0] = np.log(np.clip(y[tr].mean(), 1e-6, 1 - 1e-6) / np.clip(1 - y[tr].mean(), 1e-6, 1))
                else:
                    b = ridge_logistic(X[tr], y[tr], lam)
                dev += deviance(y[te], expit(X[te] @ b)) * te.sum()
        except NuisanceFitError:
            dev = np.inf
        scores.append(dev)
    scores = np.asarray(scores)
    if not np.isfinite(scores).any():
        raise NuisanceFitError("every penalty in the grid failed to fit")
    # ties go to the larger penalty
    best = max(i for i in range(len(grid)) if scores[i] <= scores.min() * (1 + 1e-12))
    return grid[best], ridge_logistic(X, y, grid[best])


# --------------------------------------------------------------------------
# outcome regression


def _mu_design(a, abar, zs):
    a = a[:, None]
    abar = abar[:, None]
    return np.hstack([np.ones_like(a), a, abar, zs, a * zs, abar * zs])


def _table_queries(cluster: ClusterData, z: np.ndarray):
    """(a, abar, z) for every (j, a, s) cell in C order."""
    n = cluster.n
    jj, aa, ss = np.meshgrid(np.arange(n), np.arange(2), np.arange(n), indexing="ij")
    jj, aa, ss = jj.ravel(), aa.ravel().astype(float), ss.ravel()
    return aa, ss / max(n - 1, 1), z[jj]


class LogisticMu:
    family = "logistic"

    def __init__(self, scaler: Standardizer, beta: np.ndarray | None, lam: float, constant: float | None = None):
        self.scaler = scaler
        self.beta = beta
        self.lam = lam
        self.constant = constant

    def predict(self, a, abar, z) -> np.ndarray:
        a = np.asarray(a, float).reshape(-1)
        if self.constant is not None:
            return np.full(a.shape[0], self.constant)
        X = _mu_design(a, np.asarray(abar, float).reshape(-1), self.scaler(np.atleast_2d(z)))
        return expit(X @ self.beta)

    def table(self, cluster: ClusterData) -> np.ndarray:
        a, abar, z = _table_queries(cluster, unified_block(cluster))
        return self.predict(a, abar, z).reshape(cluster.n, 2, cluster.n)

    def household(self, cluster: ClusterData) -> np.ndarray:
        return self.predict(cluster.a, cluster.peer_fraction(), unified_block(cluster))

    def at(self, cluster: ClusterData, a: float, abar: float) -> np.ndarray:
        """mu(a, abar, household covariates) for every household, abar on a continuous scale."""
        n = cluster.n
        return self.predict(np.full(n, float(a)), np.full(n, float(abar)), unified_block(cluster))

    def to_dict(self) -> dict:
        return {"family": self.family, "scaler": self.scaler.to_dict(), "lam": self.lam, "constant": self.constant,
                "beta": None if self.beta is None else self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticMu":
        beta = None if d["beta"] is None else np.asarray(d["beta"], float)
        return cls(Standardizer.from_dict(d["scaler"]), beta, d["lam"], d["constant"])


class KernelMu:
    family = "kernel"

    def __init__(self, scaler: Standardizer, train: np.ndarray, y: np.ndarray, bandwidth: float):
        self.scaler = scaler
        self.train = np.ascontiguousarray(train, dtype=float)
        self.y = np.ascontiguousarray(y, dtype=float)
        self.bandwidth = float(bandwidth)

    def _features(self, a, abar, z):
        return np.ascontiguousarray(np.column_stack([a, abar, self.scaler(np.atleast_2d(z))]))

    def predict(self, a, abar, z) -> np.ndarray:
        a = np.asarray(a, float).reshape(-1)
        q = self._features(a, np.asarray(abar, float).reshape(-1), z)
        return np.clip(nw_predict(self.train, self.y, q, self.bandwidth), 0.0, 1.0)

    def table(self, cluster: ClusterData) -> np.ndarray:
        a, abar, z = _table_queries(cluster, unified_block(cluster))
        return self.predict(a, abar, z).reshape(cluster.n, 2, cluster.n)

    def household(self, cluster: ClusterData) -> np.ndarray:
        return self.predict(cluster.a, cluster.peer_fraction(), unified_block(cluster))

    def at(self, cluster: ClusterData, a: float, abar: float) -> np.ndarray:
        """mu(a, abar, household covariates) for every household, abar on a continuous scale."""
        n = cluster.n
        return self.predict(np.full(n, float(a)), np.full(n, float(abar)), unified_block(cluster))

    def to_dict(self) -> dict:
        return {"family": self.family, "scaler": self.scaler.to_dict(), "bandwidth": self.bandwidth,
                "train": self.train.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelMu":
        return cls(Standardizer.from_dict(d["scaler"]), np.asarray(d["train"], float), np.asarray(d["y"], float),
                   d["bandwidth"])


def _check_strata(a: np.ndarray) -> None:
    if a.min() == a.max():
        raise NuisanceFitError(f"empty treatment stratum: every household has a={int(a[0])}")


def fit_outcome_regression(train: Sequence[ClusterData], family: str = "logistic", hyper: dict | None = None,
                           seed: int = 0):
    """Fit mu(a, abar_peer, unified covariates).

    ``hyper`` may fix ``lam`` (logistic) or ``bandwidth`` (kernel); otherwise
    they are chosen by 5-fold grouped deviance CV and leave-one-out squared
    error respectively.
    """
    hyper = dict(hyper or {})
    if len(train) == 0:
        raise NuisanceFitError("empty training set")
    y, a, abar, z, grp = household_frame(train)
    _check_strata(a)
    scaler = Standardizer.fit(z)
    zs = scaler(z)
    rng = stage_rng(seed, "mu-cv")
    if family == "logistic":
        if y.min() == y.max():
            return LogisticMu(scaler, None, 0.0, constant=float(y[0]))
        X = _mu_design(a, abar, zs)
        if "lam" in hyper:
            lam = float(hyper["lam"])
            beta = ridge_logistic(X, y, lam)
        else:
            lam, beta = cv_ridge_logistic(X, y, grp, rng, hyper.get("lam_grid", LAMBDA_GRID))
        return LogisticMu(scaler, beta, lam)
    if family == "kernel":
        feats = np.ascontiguousarray(np.column_stack([a, abar, zs]))
        h = hyper.get("bandwidth")
        if h is None:
            h = select_bandwidth(feats, y, rng, hyper.get("max_rows", 3000))
        return KernelMu(scaler, feats, y, h)
    raise ValueError(f"unknown outcome family {family!r}")


def select_bandwidth(feats, y, rng, max_rows: int = 3000) -> float:
    m = feats.shape[0]
    sub = np.sort(rng.choice(m, max_rows, replace=False)) if m > max_rows else np.arange(m)
    f, yy = np.ascontiguousarray(feats[sub]), y[sub]
    # median pairwise distance on a small sample sets the scale
    probe = f[: min(400, f.shape[0])]
    d = np.sqrt(np.maximum(((probe[:, None, :] - probe[None, :, :]) ** 2).sum(-1), 0))
    med = np.median(d[np.triu_indices(probe.shape[0], 1)]) if probe.shape[0] > 1 else 1.0
    med = med if med > 0 else 1.0
    best, best_h = np.inf, med
    for mult in (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0):
        h = med * mult
        err = np.mean((yy - nw_loo(f, yy, h)) ** 2)
        if err < best - 1e-15:
            best, best_h = err, h
    return float(best_h)


# --------------------------------------------------------------------------
# propensity


class ProductPropensity:
    """Independent household treatments: ego Bernoulli times Poisson-binomial peers."""

    variant = "product"

    def __init__(self, scaler: Standardizer, beta: np.ndarray, lam: float, floor: float = PROPENSITY_FLOOR):
        self.scaler = scaler
        self.beta = beta
        self.lam = lam
        self.floor = floor

    def household_prob(self, x: np.ndarray) -> np.ndarray:
        xs = self.scaler(np.atleast_2d(x))
        return expit(np.column_stack([np.ones(xs.shape[0]), xs]) @ self.beta)

    def raw_table(self, cluster: ClusterData) -> np.ndarray:
        p = self.household_prob(cluster.x)
        peers = loo_pb(np.ascontiguousarray(p))
        return np.stack([(1.0 - p)[:, None] * peers, p[:, None] * peers], axis=1)

    def table(self, cluster: ClusterData) -> np.ndarray:
        return np.maximum(self.raw_table(cluster), self.floor)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "scaler": self.scaler.to_dict(), "beta": self.beta.tolist(),
                "lam": self.lam, "floor": self.floor}

    @classmethod
    def from_dict(cls, d: dict) -> "ProductPropensity":
        return cls(Standardizer.from_dict(d["scaler"]), np.asarray(d["beta"], float), d["lam"], d["floor"])


def bin_index(abar, m: int) -> np.ndarray:
    return np.rint(np.asarray(abar, float) * m).astype(int)


def bins_to_counts(n: int, m: int) -> np.ndarray:
    """Peer count s that each of the m+1 bins collapses to for a cluster of size n."""
    if n == 1:
        return np.zeros(m + 1, dtype=int)
    return np.rint(np.arange(m + 1) * (n - 1) / m).astype(int)


class OrdinalPropensity:
    """Cumulative-logit model for the binned treated-peer fraction, times a
    logistic model for the ego's treatment given that fraction.

    ``thresholds`` holds the M finite cut-points; the last bin's cumulative
    probability is 1.
    """

    variant = "ordinal"

    def __init__(self, scaler, thresholds, slopes, ego_beta, ego_lam, m, floor=PROPENSITY_FLOOR):
        self.scaler = scaler
        self.thresholds = np.asarray(thresholds, float)
        self.slopes = np.asarray(slopes, float)
        self.ego_beta = np.asarray(ego_beta, float)
        self.ego_lam = ego_lam
        self.m = int(m)
        self.floor = floor

    def bin_probs(self, z: np.ndarray) -> np.ndarray:
        eta = self.scaler(np.atleast_2d(z)) @ self.slopes
        cum = expit(self.thresholds[None, :] + eta[:, None])
        cum = np.hstack([np.zeros((cum.shape[0], 1)), cum, np.ones((cum.shape[0], 1))])
        return np.diff(cum, axis=1)

    def ego_prob(self, abar, z) -> np.ndarray:
        zs = self.scaler(np.atleast_2d(z))
        X = np.column_stack([np.ones(zs.shape[0]), np.asarray(abar, float).reshape(-1), zs])
        return expit(X @ self.ego_beta)

    def raw_table(self, cluster: ClusterData) -> np.ndarray:
        n = cluster.n
        z = unified_block(cluster)
        probs = self.bin_probs(z)
        to_s = bins_to_counts(n, self.m)
        peers = np.zeros((n, n))
        for t in range(self.m + 1):
            peers[:, to_s[t]] += probs[:, t]
        s = np.arange(n) / max(n - 1, 1)
        p1 = self.ego_prob(np.tile(s, n), np.repeat(z, n, axis=0)).reshape(n, n)
        return np.stack([(1.0 - p1) * peers, p1 * peers], axis=1)

    def table(self, cluster: ClusterData) -> np.ndarray:
        return np.maximum(self.raw_table(cluster), self.floor)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "scaler": self.scaler.to_dict(), "thresholds": self.thresholds.tolist(),
                "slopes": self.slopes.tolist(), "ego_beta": self.ego_beta.tolist(), "ego_lam": self.ego_lam,
                "m": self.m, "floor": self.floor}

    @classmethod
    def from_dict(cls, d: dict) -> "OrdinalPropensity":
        return cls(Standardizer.from_dict(d["scaler"]), d["thresholds"], d["slopes"], d["ego_beta"], d["ego_lam"],
                   d["m"], d["floor"])


def _ordinal_nll(theta, zs, bins, m, ridge):
    """Negative mean log-likelihood and gradient; cut-points are c0 + cumsum(exp(gaps))."""
    p = zs.shape[1]
    c0, gaps, beta = theta[0], theta[1 : m], theta[m:]
    cuts = np.concatenate([[c0], c0 + np.cumsum(np.exp(gaps))])
    eta = zs @ beta
    hi_idx = bins
    lo_idx = bins - 1
    has_hi = hi_idx < m
    has_lo = lo_idx >= 0
    arg_hi = np.where(has_hi, cuts[np.minimum(hi_idx, m - 1)] + eta, 0.0)
    arg_lo = np.where(has_lo, cuts[np.maximum(lo_idx, 0)] + eta, 0.0)
    F_hi = np.where(has_hi, expit(arg_hi), 1.0)
    F_lo = np.where(has_lo, expit(arg_lo), 0.0)
    prob = np.maximum(F_hi - F_lo, 1e-300)
    f_hi = np.where(has_hi, F_hi * (1 - F_hi), 0.0)
    f_lo = np.where(has_lo, F_lo * (1 - F_lo), 0.0)
    nobs = zs.shape[0]
    nll = -np.mean(np.log(prob)) + 0.5 * ridge * np.dot(beta, beta)
    g_hi = -f_hi / prob / nobs
    g_lo = f_lo / prob / nobs
    g_cuts = np.bincount(np.minimum(hi_idx, m - 1)[has_hi], weights=g_hi[has_hi], minlength=m)
    g_cuts += np.bincount(np.maximum(lo_idx, 0)[has_lo], weights=g_lo[has_lo], minlength=m)
    g_beta = zs.T @ (g_hi + g_lo) + ridge * beta
    tail = np.cumsum(g_cuts[::-1])[::-1]
    grad = np.concatenate([[g_cuts.sum()], np.exp(gaps) * tail[1:], g_beta])
    return nll, grad


def fit_ordinal_thresholds(zs, bins, m, ridge: float = 1e-4, max_iter: int = 2000):
    p = zs.shape[1]
    freq = np.bincount(bins, minlength=m + 1) + 0.5
    cum = np.cumsum(freq)[:-1] / freq.sum()
    logit_cum = np.log(cum / (1 - cum))
    gaps0 = np.log(np.maximum(np.diff(logit_cum), 1e-3))
    theta0 = np.concatenate([[logit_cum[0]], gaps0, np.zeros(p)])
    bounds = [(None, None)] + [(-30.0, 5.0)] * (m - 1) + [(None, None)] * p
    res = minimize(_ordinal_nll, theta0, args=(zs, bins, m, ridge), jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "gtol": 1e-8})
    _, grad = _ordinal_nll(res.x, zs, bins, m, ridge)
    # projected gradient: components pinned at a bound do not count
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    free = ~(((res.x <= lo + 1e-9) & (grad > 0)) | ((res.x >= hi - 1e-9) & (grad < 0)))
    gnorm = float(np.linalg.norm(grad[free]))
    if not res.success and gnorm > 1e-4:
        raise NuisanceFitError(f"ordinal likelihood did not converge (gradient norm {gnorm:.3g})")
    theta = res.x
    cuts = np.concatenate([[theta[0]], theta[0] + np.cumsum(np.exp(theta[1:m]))])
    if np.any(np.diff(cuts) < 0):
        warnings.warn("ordinal thresholds out of order after fitting; projecting to monotone", RuntimeWarning)
        cuts = np.maximum.accumulate(cuts)
    return cuts, theta[m:]


def fit_propensity(train: Sequence[ClusterData], variant: str = "product", bins: int = M_CAP,
                   floor: float = PROPENSITY_FLOOR, seed: int = 0, hyper: dict | None = None):
    """Fit e(a, s | X_i); ``bins`` is the number of ordinal bins M + 1."""
    hyper = dict(hyper or {})
    if len(train) == 0:
        raise NuisanceFitError("empty training set")
    if not (0 < floor < 0.5):
        raise ValueError("propensity floor must lie in (0, 0.5)")
    y, a, abar, z, grp = household_frame(train)
    _check_strata(a)
    rng = stage_rng(seed, "e-cv")
    if variant == "product":
        x = np.vstack([c.x for c in train])
        scaler = Standardizer.fit(x)
        X = np.column_stack([np.ones(x.shape[0]), scaler(x)])
        if "lam" in hyper:
            lam = float(hyper["lam"])
            beta = ridge_logistic(X, a, lam)
        else:
            lam, beta = cv_ridge_logistic(X, a, grp, rng)
        return ProductPropensity(scaler, beta, lam, floor)
    if variant == "ordinal":
        if bins < 2:
            raise ValueError("ordinal propensity needs at least 2 bins")
        m = bins - 1
        scaler = Standardizer.fit(z)
        zs = scaler(z)
        cuts, slopes = fit_ordinal_thresholds(zs, bin_index(abar, m), m)
        X = np.column_stack([np.ones(zs.shape[0]), abar, zs])
        if "lam" in hyper:
            lam = float(hyper["lam"])
            ego = ridge_logistic(X, a, lam)
        else:
            lam, ego = cv_ridge_logistic(X, a, grp, rng)
        return OrdinalPropensity(scaler, cuts, slopes, ego, lam, m, floor)
    raise ValueError(f"unknown propensity variant {variant!r}")


# --------------------------------------------------------------------------
# undersampling and aggregation


def undersample(clusters: Sequence[ClusterData], seed: int, target_size: int | None = None) -> list[ClusterData]:
    """Thin every cluster to min(n_i, median size), keeping household order."""
    sizes = np.array([c.n for c in clusters])
    if target_size is None:
        target_size = max(1, int(np.floor(np.median(sizes))))
    out = []
    for i, c in enumerate(clusters):
        if c.n <= target_size:
            out.append(c)
            continue
        keep = np.sort(stage_rng(seed, "undersample", i).choice(c.n, target_size, replace=False))
        out.append(c.subset(keep))
    return out


class MedianModel:
    """Pointwise median of several fitted models' tables."""

    def __init__(self, models: Sequence, floor: float | None = None):
        if not models:
            raise ValueError("need at least one model")
        self.models = list(models)
        self.floor = floor

    def table(self, cluster: ClusterData) -> np.ndarray:
        tab = np.median(np.stack([m.table(cluster) for m in self.models]), axis=0)
        return tab if self.floor is None else np.maximum(tab, self.floor)

    def household(self, cluster: ClusterData) -> np.ndarray:
        return np.median(np.stack([m.household(cluster) for m in self.models]), axis=0)

    def at(self, cluster: ClusterData, a: float, abar: float) -> np.ndarray:
        return np.median(np.stack([m.at(cluster, a, abar) for m in self.models]), axis=0)


@dataclass
class NuisanceFit:
    mu: object
    e: object
    fold_id: int | None = None
    train_ids: tuple = ()

    def mu_table(self, cluster: ClusterData) -> np.ndarray:
        return self.mu.table(cluster)

    def e_table(self, cluster: ClusterData) -> np.ndarray:
        return self.e.table(cluster)

    def to_dict(self) -> dict:
        return {"fold_id": self.fold_id, "train_ids": list(self.train_ids),
                "mu": [m.to_dict() for m in _members(self.mu)], "e": [m.to_dict() for m in _members(self.e)]}

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceFit":
        mus = [mu_from_dict(m) for m in d["mu"]]
        es = [e_from_dict(m) for m in d["e"]]
        mu = mus[0] if len(mus) == 1 else MedianModel(mus)
        e = es[0] if len(es) == 1 else MedianModel(es, floor=es[0].floor)
        return cls(mu, e, d["fold_id"], tuple(d["train_ids"]))


def _members(model):
    return model.models if isinstance(model, MedianModel) else [model]


def mu_from_dict(d: dict):
    return {"logistic": LogisticMu, "kernel": KernelMu}[d["family"]].from_dict(d)


def e_from_dict(d: dict):
    return {"product": ProductPropensity, "ordinal": OrdinalPropensity}[d["variant"]].from_dict(d)


def fit_nuisances(train: Sequence[ClusterData], mu_family: str = "logistic", e_variant: str = "product",
                  rounds: int = 1, seed: int = 0, fold_id: int | None = None, floor: float = PROPENSITY_FLOOR,
                  mu_hyper: dict | None = None, e_hyper: dict | None = None, bins: int = M_CAP) -> NuisanceFit:
    """Fit mu and e on ``rounds`` undersampled copies and median-aggregate them.

    With rounds == 1 and equal cluster sizes this is a plain fit.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    mus, es = [], []
    for u in range(rounds):
        sub = undersample(train, seed=int(stage_rng(seed, "undersample-round", u).integers(2**31)))
        mus.append(fit_outcome_regression(sub, mu_family, mu_hyper, seed=seed + u))
        es.append(fit_propensity(sub, e_variant, bins=bins, floor=floor, seed=seed + u, hyper=e_hyper))
    mu = mus[0] if rounds == 1 else MedianModel(mus)
    e = es[0] if rounds == 1 else MedianModel(es, floor=floor)
    return NuisanceFit(mu, e, fold_id, tuple(c.cluster_id for c in train))
