"""Expected-outcome surfaces under Bernoulli(alpha) allocation policies and their OMARs.

An outcome regression is consumed as a *mu table*: for a cluster of size n,
``table[j, a, s]`` is mu(a, s/(n-1), x_j, x_(-j)) for a in {0, 1} and
s in {0..n-1}. Both surfaces are Bernstein polynomials in alpha whose
coefficients are cluster averages of binomially weighted table entries, so
they are evaluated as probability-weighted sums and never expanded into the
alternating-sign power basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ClusterData
from .kernels import bernstein_grid

OV = "OV"
SO = "SO"
ESTIMANDS = (OV, SO)

# Surfaces are sums of up to 2n rounded products; a target exactly on the
# surface (e.g. mu == 1, target 1) must not fail by one ulp.
SURFACE_SLACK = 1e-12


def check_estimand(estimand: str) -> str:
    e = str(estimand).upper()
    if e not in ESTIMANDS:
        raise ValueError(f"estimand must be OV or SO, got {estimand!r}")
    return e


def check_target(tau: float) -> float:
    tau = float(tau)
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"target must lie in [0, 1], got {tau}")
    return tau


def alpha_grid(grid_step: float) -> np.ndarray:
    """Uniform grid on [0, 1] inclusive; ``1/grid_step`` must be (close to) an integer."""
    if not (0.0 < grid_step <= 1.0):
        raise ValueError(f"grid_step must lie in (0, 1], got {grid_step}")
    m = round(1.0 / grid_step)
    if abs(m * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid_step {grid_step} does not divide [0, 1] evenly")
    return np.linspace(0.0, 1.0, m + 1)


def policy_weight(a_vec, alpha: float) -> float:
    """Probability of treatment vector ``a_vec`` under i.i.d. Bernoulli(alpha) assignment (0**0 = 1)."""
    a = np.asarray(a_vec).reshape(-1)
    if not np.isin(a, (0, 1)).all():
        raise ValueError("treatment vector entries must be 0 or 1")
    alpha = float(alpha)
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    k = int(a.sum())
    # Python's float power already yields 0.0**0 == 1.0
    return alpha**k * (1.0 - alpha) ** (a.size - k)


# --------------------------------------------------------------------------
# mu tables


def mu_table(mu, cluster: ClusterData) -> np.ndarray:
    """Tabulate ``mu`` on a cluster as an (n, 2, n) array.

    ``mu`` is either an object with a ``table(cluster)`` method (fitted
    models) or a callable ``mu(a, abar_peer, cluster, j)``.
    """
    if hasattr(mu, "table"):
        tab = np.asarray(mu.table(cluster), dtype=float)
    else:
        n = cluster.n
        tab = np.empty((n, 2, n))
        denom = max(n - 1, 1)
        for j in range(n):
            for a in (0, 1):
                for s in range(n):
                    tab[j, a, s] = mu(a, s / denom, cluster, j)
    check_table(tab, cluster.n)
    return tab


def check_table(tab: np.ndarray, n: int) -> None:
    if tab.shape != (n, 2, n):
        raise ValueError(f"mu table has shape {tab.shape}, expected {(n, 2, n)}")
    bad = np.argwhere(~np.isfinite(tab))
    if bad.size:
        j, a, s = (int(v) for v in bad[0])
        raise ValueError(f"non-finite mu value at (a={a}, s={s}, j={j})")


def binom_row(m: int) -> np.ndarray:
    return np.array([math.comb(m, s) for s in range(m + 1)], dtype=float)


def bernstein_weights(tab: np.ndarray, estimand: str) -> tuple[np.ndarray, int]:
    """Coefficients w_k of ``sum_k w_k alpha^k (1-alpha)^(deg-k)`` for a cluster table.

    Works for mu tables and for pseudo-outcome (psi) tables alike.
    """
    estimand = check_estimand(estimand)
    n = tab.shape[0]
    cb = binom_row(n - 1)
    if estimand == SO:
        if n == 1:
            return np.array([tab[0, 0, 0]]), 0
        return (cb * tab[:, 0, :]).mean(axis=0), n - 1
    w = np.zeros(n + 1)
    avg0 = (cb * tab[:, 0, :]).mean(axis=0)
    avg1 = (cb * tab[:, 1, :]).mean(axis=0)
    w[:n] += avg0
    w[1:] += avg1
    return w, n


# --------------------------------------------------------------------------
# surfaces and OMARs


@dataclass(frozen=True)
class OutcomeSurface:
    grid: np.ndarray
    values: np.ndarray
    grid_step: float

    def __post_init__(self):
        if self.grid.shape != self.values.shape:
            raise ValueError("grid and values differ in length")
        if not np.isfinite(self.values).all():
            raise ValueError("surface has non-finite values")

    def __call__(self, alpha: float) -> float:
        idx = int(round(float(alpha) / self.grid_step))
        return float(self.values[idx])


def surface_values(weights: np.ndarray, deg: int, grid: np.ndarray) -> np.ndarray:
    w = np.zeros((1, deg + 1))
    w[0] = weights
    return bernstein_grid(w, np.array([deg], dtype=np.int64), np.ascontiguousarray(grid, dtype=float))[0]


def outcome_surface(mu, cluster: ClusterData, estimand: str = OV, grid_step: float = 1e-3) -> OutcomeSurface:
    """tau_OV(alpha) or tau_SO(alpha) of one cluster tabulated on the alpha grid."""
    grid = alpha_grid(grid_step)
    w, deg = bernstein_weights(mu_table(mu, cluster), estimand)
    return OutcomeSurface(grid, surface_values(w, deg, grid), grid_step)


def first_crossing(values: np.ndarray, grid: np.ndarray, tau: float) -> float:
    hit = np.nonzero(values >= tau - SURFACE_SLACK)[0]
    return float(grid[hit[0]]) if hit.size else 1.0


def omar_from_surface(surface: OutcomeSurface, target: float) -> float:
    """Smallest grid alpha whose surface value reaches the target; 1 when none does."""
    return first_crossing(surface.values, surface.grid, check_target(target))


def indirect_rule(mu_hat, cluster: ClusterData, target: float, estimand: str = OV, grid_step: float = 1e-3) -> float:
    return omar_from_surface(outcome_surface(mu_hat, cluster, estimand, grid_step), target)


def omar_batch(tables, target: float, estimand: str = OV, grid_step: float = 1e-3) -> np.ndarray:
    """Grid-search OMAR for many clusters at once (one mu table per cluster)."""
    tau = check_target(target)
    grid = alpha_grid(grid_step)
    vals = surface_batch(tables, estimand, grid)
    ok = vals >= tau - SURFACE_SLACK
    first = np.argmax(ok, axis=1)
    out = grid[first]
    out[~ok.any(axis=1)] = 1.0
    return out


def surface_batch(tables, estimand: str, grid: np.ndarray) -> np.ndarray:
    """Surface values of many clusters on a common grid, one row per cluster."""
    ws = [bernstein_weights(t, estimand) for t in tables]
    width = max(d for _, d in ws) + 1
    W = np.zeros((len(ws), width))
    deg = np.zeros(len(ws), dtype=np.int64)
    for i, (w, d) in enumerate(ws):
        W[i, : d + 1] = w
        deg[i] = d
    return bernstein_grid(W, deg, np.ascontiguousarray(grid, dtype=float))
