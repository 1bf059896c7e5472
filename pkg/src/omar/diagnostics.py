"""Assumption checks: covariate balance across treatment bins, propensity overlap,
monotonicity of the fitted outcome surface, and binned residuals."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClusterData
from .simulation import peer_means

MONOTONE_TOL = 1e-10
N_DECILES = 10
GROUP_LABELS = {1: "A=0, low peers", 2: "A=0, high peers", 3: "A=1, low peers", 4: "A=1, high peers"}


def _e_table(e_hat, cluster: ClusterData) -> np.ndarray:
    return e_hat.e_table(cluster) if hasattr(e_hat, "e_table") else e_hat.table(cluster)


def _mu_table(mu_hat, cluster: ClusterData) -> np.ndarray:
    return mu_hat.mu_table(cluster) if hasattr(mu_hat, "mu_table") else mu_hat.table(cluster)


def _households(clusters: Sequence[ClusterData]):
    a = np.concatenate([c.a for c in clusters])
    abar = np.concatenate([c.peer_fraction() for c in clusters])
    x = np.vstack([c.x for c in clusters])
    cid = np.concatenate([np.full(c.n, i) for i, c in enumerate(clusters)])
    return a, abar, x, cid


def treatment_groups(clusters: Sequence[ClusterData]):
    """Group label 1..4 per household and the cut points (alpha0, alpha1).

    The cuts are the medians of the treated-peer fraction among untreated and
    treated households, which splits each arm as evenly as ties allow.
    """
    a, abar, _, _ = _households(clusters)
    cuts = []
    for arm in (0, 1):
        sel = abar[a == arm]
        cuts.append(float(np.median(sel)) if sel.size else 0.0)
    a0, a1 = cuts
    g = np.where(a == 0, np.where(abar <= a0, 1, 2), np.where(abar <= a1, 3, 4))
    return g, a0, a1


def group_probabilities(clusters: Sequence[ClusterData], e_hat, alpha0: float, alpha1: float) -> np.ndarray:
    """P{(A, Abar_peer) in R_k | X} per household (rows) and group k (columns)."""
    out = []
    for c in clusters:
        tab = _e_table(e_hat, c)
        s = np.arange(c.n) / max(c.n - 1, 1)
        low0, low1 = s <= alpha0, s <= alpha1
        out.append(np.column_stack([tab[:, 0, low0].sum(1), tab[:, 0, ~low0].sum(1),
                                    tab[:, 1, low1].sum(1), tab[:, 1, ~low1].sum(1)]))
    return np.vstack(out)


def _cluster_averages(x: np.ndarray, cid: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-cluster mean covariates over the masked households (clusters with none are dropped)."""
    ids, inv = np.unique(cid[mask], return_inverse=True)
    if ids.size == 0:
        return np.zeros((0, x.shape[1]))
    sums = np.zeros((ids.size, x.shape[1]))
    np.add.at(sums, inv, x[mask])
    return sums / np.bincount(inv)[:, None]


def welch_t(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise two-sample t statistics with unpooled variances.

    Columns with zero spread on both sides get t = 0 and are flagged degenerate.
    """
    if u.shape[0] < 2 or v.shape[0] < 2:
        raise ValueError("each side needs at least 2 observations")
    se2 = u.var(axis=0, ddof=1) / u.shape[0] + v.var(axis=0, ddof=1) / v.shape[0]
    diff = u.mean(axis=0) - v.mean(axis=0)
    degenerate = se2 <= 1e-300
    t = np.where(degenerate, 0.0, diff / np.sqrt(np.where(degenerate, 1.0, se2)))
    return t, degenerate


@dataclass
class BalanceReport:
    alpha0: float
    alpha1: float
    group_sizes: dict
    unadjusted: dict  # group -> array over covariates
    adjusted: dict
    degenerate: dict
    skipped_bins: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for k in sorted(self.unadjusted):
            for j, (tu, ta) in enumerate(zip(self.unadjusted[k], self.adjusted[k])):
                out.append({"group": k, "covariate": f"x{j + 1}", "n_group": self.group_sizes[k],
                            "t_unadjusted": float(tu), "t_adjusted": float(ta),
                            "degenerate": bool(self.degenerate[k][j]), "alpha0": self.alpha0, "alpha1": self.alpha1})
        return out


BALANCE_COLUMNS = ("group", "covariate", "n_group", "t_unadjusted", "t_adjusted", "degenerate", "alpha0", "alpha1")


def balance_diagnostic(clusters: Sequence[ClusterData], e_hat, n_bins: int = N_DECILES) -> BalanceReport:
    """Unadjusted and propensity-stratified t statistics of each covariate, group versus rest.

    Covariates are first averaged within cluster on each side, so a t statistic
    compares cluster-level means. The adjusted statistic is the stratum-size
    weighted mean over propensity deciles (deciles taken within the group).
    """
    a, abar, x, cid = _households(clusters)
    groups, a0, a1 = treatment_groups(clusters)
    probs = group_probabilities(clusters, e_hat, a0, a1)
    unadj, adj, degen, skipped, sizes = {}, {}, {}, {}, {}
    for k in (1, 2, 3, 4):
        inside = groups == k
        sizes[k] = int(inside.sum())
        u, v = _cluster_averages(x, cid, inside), _cluster_averages(x, cid, ~inside)
        if u.shape[0] < 2 or v.shape[0] < 2:
            warnings.warn(f"group {k} has too few clusters on one side for a t statistic", RuntimeWarning)
            unadj[k] = np.full(x.shape[1], np.nan)
            adj[k] = np.full(x.shape[1], np.nan)
            degen[k] = np.ones(x.shape[1], dtype=bool)
            continue
        unadj[k], degen[k] = welch_t(u, v)
        ek = probs[:, k - 1]
        qs = np.quantile(ek[inside], np.arange(1, n_bins) / n_bins)
        edges = np.concatenate([[-np.inf], qs, [np.inf]])
        total = np.zeros(x.shape[1])
        weight = 0.0
        skipped[k] = []
        for b in range(n_bins):
            stratum = (ek > edges[b]) & (ek <= edges[b + 1])
            u = _cluster_averages(x, cid, stratum & inside)
            v = _cluster_averages(x, cid, stratum & ~inside)
            if u.shape[0] < 2 or v.shape[0] < 2:
                skipped[k].append(b + 1)
                continue
            t, _ = welch_t(u, v)
            w = float(stratum.sum())
            total += w * t
            weight += w
        if skipped[k]:
            warnings.warn(f"group {k}: propensity strata {skipped[k]} skipped (fewer than 2 clusters on a side)",
                          RuntimeWarning)
        adj[k] = total / weight if weight > 0 else np.full(x.shape[1], np.nan)
    return BalanceReport(a0, a1, sizes, unadj, adj, degen, skipped)


@dataclass
class OverlapReport:
    edges: np.ndarray
    groups: dict  # k -> {"in": counts, "out": counts, "in_min", "in_max", "out_min", "out_max", "n_in", "n_out"}

    def rows(self) -> list[dict]:
        out = []
        for k, g in sorted(self.groups.items()):
            for side in ("in", "out"):
                for b, cnt in enumerate(g[side]):
                    out.append({"group": k, "side": side, "bin_lo": float(self.edges[b]),
                                "bin_hi": float(self.edges[b + 1]), "count": int(cnt),
                                "min": g[f"{side}_min"], "max": g[f"{side}_max"]})
        return out


OVERLAP_COLUMNS = ("group", "side", "bin_lo", "bin_hi", "count", "min", "max")


def overlap_diagnostic(clusters: Sequence[ClusterData], e_hat, bins=20) -> OverlapReport:
    """Histogram data of P{(A, Abar) in R_k | X} for households inside versus outside group k."""
    groups, a0, a1 = treatment_groups(clusters)
    probs = group_probabilities(clusters, e_hat, a0, a1)
    edges = np.linspace(0.0, 1.0, bins + 1) if np.isscalar(bins) else np.asarray(bins, float)
    out = {}
    for k in (1, 2, 3, 4):
        ek = probs[:, k - 1]
        rec = {}
        for side, sel in (("in", groups == k), ("out", groups != k)):
            vals = np.clip(ek[sel], edges[0], edges[-1])
            rec[side] = np.histogram(vals, edges)[0]
            rec[f"n_{side}"] = int(sel.sum())
            rec[f"{side}_min"] = float(ek[sel].min()) if sel.any() else float("nan")
            rec[f"{side}_max"] = float(ek[sel].max()) if sel.any() else float("nan")
        out[k] = rec
    return OverlapReport(edges, out)


@dataclass(frozen=True)
class MonotonicityReport:
    total: int
    violations: int
    violation_fraction: float
    decreasing_magnitude: float

    def rows(self) -> list[dict]:
        return [{"total_variations": self.total, "violations": self.violations,
                 "violation_fraction": self.violation_fraction, "decreasing_magnitude": self.decreasing_magnitude}]


MONOTONICITY_COLUMNS = ("total_variations", "violations", "violation_fraction", "decreasing_magnitude")


def cluster_variations(tab: np.ndarray) -> np.ndarray:
    """The 3n - 2 adjacent differences of the cluster-mean outcome regression."""
    mbar = tab.mean(axis=0)  # (2, n)
    return np.concatenate([np.diff(mbar[0]), np.diff(mbar[1]), mbar[1] - mbar[0]])


def monotonicity_diagnostic(clusters: Sequence[ClusterData], mu_hat, tol: float = MONOTONE_TOL) -> MonotonicityReport:
    v = np.concatenate([cluster_variations(_mu_table(mu_hat, c)) for c in clusters])
    dec = v < -tol
    tv = np.abs(v)
    total_tv = float(tv.sum())
    mag = float(tv[dec].sum() / total_tv) if total_tv > 0 else 0.0
    return MonotonicityReport(int(v.size), int(dec.sum()), float(dec.mean()) if v.size else 0.0, mag)


@dataclass
class ResidualReport:
    bins: dict  # regressor -> list of {center, mean_residual, se, count}

    def rows(self) -> list[dict]:
        return [{"regressor": name, "bin": b + 1, **rec} for name, recs in self.bins.items()
                for b, rec in enumerate(recs)]


RESIDUAL_COLUMNS = ("regressor", "bin", "center", "mean_residual", "se", "count")


def equal_count_bins(values: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Index sets of the sorted values split into n_bins nearly equal parts (sizes differ by <= 1)."""
    order = np.argsort(values, kind="stable")
    return [b for b in np.array_split(order, min(n_bins, values.size)) if b.size]


def residual_diagnostic(clusters: Sequence[ClusterData], mu_hat, n_bins: int = 10) -> ResidualReport:
    """Mean residual y - mu_hat per equal-count bin of the fitted value and of each regressor.

    Peer-mean covariates are only defined for households with peers.
    """
    y = np.concatenate([c.y for c in clusters]).astype(float)
    fitted = np.concatenate([mu_hat.household(c) for c in clusters])
    a, abar, x, _ = _households(clusters)
    pm = np.vstack([peer_means(c.x) for c in clusters])
    has_peers = np.concatenate([np.full(c.n, c.n > 1) for c in clusters])
    resid = y - fitted
    regs = {"fitted": (fitted, None), "a": (a.astype(float), None), "abar_peer": (abar, None)}
    for j in range(x.shape[1]):
        regs[f"x{j + 1}"] = (x[:, j], None)
    for j in range(x.shape[1]):
        regs[f"peer_mean_x{j + 1}"] = (pm[:, j], has_peers)
    out = {}
    for name, (vals, mask) in regs.items():
        idx = np.arange(vals.size) if mask is None else np.nonzero(mask)[0]
        recs = []
        for b in equal_count_bins(vals[idx], n_bins):
            r = resid[idx[b]]
            se = float(r.std(ddof=1) / np.sqrt(r.size)) if r.size > 1 else float("nan")
            recs.append({"center": float(vals[idx[b]].mean()), "mean_residual": float(r.mean()), "se": se,
                         "count": int(r.size)})
        out[name] = recs
    return ResidualReport(out)
