"""The OMAR loss, its pseudo-outcomes, and a difference-of-convex split.

For one cluster with pseudo-outcome table psi[j, a, s] the weighted surface

    S(alpha) = (1/n) sum_{j,a,s} C(n-1, s) psi[j, a, s] alpha^(a+s) (1-alpha)^(n-a-s)

(the a = 0 slice with degree n - 1 for the spillover estimand) is a Bernstein
polynomial, and

    nu(t) = C0 + int_0^t {S(alpha) - target} d alpha

is a polynomial of one degree higher. On [0, 1] the loss equals nu; outside it
continues with exponential tails of height delta so that it stays bounded and
monotone. Minimizing the mean loss over constant rules recovers the smallest
alpha at which the population surface reaches the target.

The convex split keeps, per power of t, the positive coefficients in L_plus
and the negated negative ones in L_minus (both add ``delta * t`` so their
slopes at 0 leave room for the tails). Left of 0 both parts are linear with a
shared slope sigma0 (plus the exponential tail in L_minus), right of 1 both
continue with a shared slope sigma1; the slopes are the extreme one-sided
derivatives that keep each part convex and non-decreasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Sequence

import numpy as np

from .data import ClusterData
from .estimands import OV, SO, bernstein_weights, check_estimand, check_target
from .kernels import bernstein_grid, horner, kahan_poly, split_eval

PSI_VARIANTS = ("DR", "IPW", "OR")
DEFAULT_DELTA = 0.1


def check_psi(variant: str) -> str:
    v = str(variant).upper()
    if v not in PSI_VARIANTS:
        raise ValueError(f"psi variant must be one of {PSI_VARIANTS}, got {variant!r}")
    return v


# --------------------------------------------------------------------------
# pseudo-outcomes


def cell_indicator(cluster: ClusterData) -> np.ndarray:
    """ind[j, a, s] = 1 when household j has A_j = a and s treated peers."""
    n = cluster.n
    ind = np.zeros((n, 2, n))
    ind[np.arange(n), cluster.a, cluster.peer_counts()] = 1.0
    return ind


def psi_table(variant: str, cluster: ClusterData, mu_tab: np.ndarray | None, e_tab: np.ndarray | None) -> np.ndarray:
    variant = check_psi(variant)
    n = cluster.n
    if variant == "OR":
        out = np.array(mu_tab, dtype=float)
    else:
        ind = cell_indicator(cluster)
        y = cluster.y.astype(float)[:, None, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(ind > 0, ind / e_tab, 0.0)
        if variant == "IPW":
            out = y * w
        else:
            out = mu_tab + (y - mu_tab) * w
    if out.shape != (n, 2, n) or not np.isfinite(out).all():
        raise ValueError(f"non-finite pseudo-outcome in cluster {cluster.cluster_id!r}")
    return out


def psi_eval(variant: str, a: int, s: int, cluster: ClusterData, j: int, nuisances) -> float:
    """Single pseudo-outcome psi(a, s, O_ij, O_i(-j))."""
    if a not in (0, 1) or not (0 <= s < cluster.n):
        raise ValueError(f"cell (a={a}, s={s}) outside the cluster's range")
    variant = check_psi(variant)
    mu_tab = nuisances.mu_table(cluster) if variant != "IPW" else None
    e_tab = nuisances.e_table(cluster) if variant != "OR" else None
    return float(psi_table(variant, cluster, mu_tab, e_tab)[j, a, s])


def psi_tables(variant: str, clusters: Sequence[ClusterData], nuisances) -> list[np.ndarray]:
    variant = check_psi(variant)
    out = []
    for c in clusters:
        mu_tab = nuisances.mu_table(c) if variant != "IPW" else None
        e_tab = nuisances.e_table(c) if variant != "OR" else None
        out.append(psi_table(variant, c, mu_tab, e_tab))
    return out


# --------------------------------------------------------------------------
# polynomial bookkeeping


def _bernstein_to_power(deg: int) -> np.ndarray:
    """M[k, m]: coefficient of alpha^m in alpha^k (1 - alpha)^(deg - k)."""
    M = np.zeros((deg + 1, deg + 1))
    for k in range(deg + 1):
        for r in range(deg - k + 1):
            M[k, k + r] = comb(deg - k, r) * (-1.0) ** r
    return M


def nu_coefficients(weights: np.ndarray, deg: np.ndarray, target: float) -> np.ndarray:
    """Power coefficients of int_0^t {S - target} (constant term left at 0)."""
    width = int(deg.max()) + 2
    coef = np.zeros((weights.shape[0], width))
    for d in np.unique(deg):
        rows = np.nonzero(deg == d)[0]
        p = weights[rows, : d + 1] @ _bernstein_to_power(int(d))
        coef[rows, 1 : d + 2] = p / np.arange(1, d + 2)
    coef[:, 1] -= target
    return coef


def _gauss_legendre(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass
class LossSpec:
    """Loss tables for one dataset under fixed nuisances.

    Row i of every array belongs to ``cluster_ids[i]``.
    """

    estimand: str
    psi_variant: str
    target: float
    delta: float
    c0: float
    weights: np.ndarray
    deg: np.ndarray
    coef: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    sig0: np.ndarray
    sig1: np.ndarray
    cluster_ids: tuple = ()
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        self._index = {cid: i for i, cid in enumerate(self.cluster_ids)}

    @property
    def size(self) -> int:
        return self.coef.shape[0]

    def index_of(self, cluster: ClusterData) -> int:
        try:
            return self._index[cluster.cluster_id]
        except KeyError:
            raise KeyError(f"cluster {cluster.cluster_id!r} is not part of this loss") from None

    def rows(self, idx) -> "LossSpec":
        idx = np.asarray(idx, dtype=int)
        return LossSpec(self.estimand, self.psi_variant, self.target, self.delta, self.c0, self.weights[idx],
                        self.deg[idx], self.coef[idx], self.pos[idx], self.neg[idx], self.sig0[idx], self.sig1[idx],
                        tuple(self.cluster_ids[i] for i in idx))

    # nu and its derivative on [0, 1]

    def surface(self, t: np.ndarray) -> np.ndarray:
        """S_i(t_i) for one t per row."""
        t = np.asarray(t, float)
        out = np.empty(self.size)
        for d in np.unique(self.deg):
            rows = np.nonzero(self.deg == d)[0]
            k = np.arange(d + 1)
            tt = t[rows, None]
            out[rows] = (self.weights[rows, : d + 1] * tt**k * (1 - tt) ** (d - k)).sum(axis=1)
        return out

    def surface_grid(self, grid: np.ndarray) -> np.ndarray:
        return bernstein_grid(self.weights, self.deg, np.ascontiguousarray(grid, dtype=float))

    def nu(self, t: np.ndarray) -> np.ndarray:
        return kahan_poly(self.coef, np.ascontiguousarray(np.clip(np.asarray(t, float), 0.0, 1.0)))

    def nu_quadrature(self, t: np.ndarray) -> np.ndarray:
        """Reference nu from Gauss-Legendre integration of the Bernstein integrand (exact for polynomials)."""
        t = np.clip(np.asarray(t, float), 0.0, 1.0)
        nodes, w = _gauss_legendre(int(self.deg.max()) // 2 + 2)
        vals = np.zeros(self.size)
        for x, wx in zip(nodes, w):
            vals += wx * t * (self.surface(t * x) - self.target)
        return self.c0 + vals

    def nu_grid(self, grid: np.ndarray) -> np.ndarray:
        """nu for every row on a shared grid, shape (N, len(grid))."""
        powers = np.asarray(grid, float)[None, :] ** np.arange(self.coef.shape[1])[:, None]
        return self.coef @ powers

    # the loss itself

    def loss(self, t) -> np.ndarray:
        """L_i(t_i), one t per row."""
        t = np.asarray(t, float)
        if t.shape != (self.size,):
            t = np.broadcast_to(t, (self.size,))
        if not np.isfinite(t).all():
            raise ValueError("loss argument must be finite")
        t = np.ascontiguousarray(t)
        inner = self.nu(t)
        d = self.delta
        below = t < 0
        above = t > 1
        out = inner.copy()
        out[below] = inner[below] + d - d * np.exp(t[below])
        out[above] = inner[above] + d - d * np.exp(1.0 - t[above])
        return out

    def split(self, t):
        """(L_plus, dL_plus, L_minus, dL_minus) per row; kink derivatives are one-sided averages."""
        t = np.ascontiguousarray(np.broadcast_to(np.asarray(t, float), (self.size,)))
        return split_eval(t, self.pos, self.neg, self.sig0, self.sig1, self.delta)

    def risk(self, t) -> float:
        return float(np.mean(self.loss(t)))


def split_parts(coef: np.ndarray, delta: float):
    """Non-negative coefficient parts and tail slopes of the convex split."""
    pos = np.maximum(coef, 0.0)
    neg = np.maximum(-coef, 0.0)
    pos[:, 0] = coef[:, 0]
    neg[:, 0] = 0.0
    pos[:, 1] += delta
    neg[:, 1] += delta
    sig0 = np.minimum(pos[:, 1], neg[:, 1] - delta)
    _, dp1 = horner(pos, np.ones(coef.shape[0]))
    _, dn1 = horner(neg, np.ones(coef.shape[0]))
    sig1 = np.maximum(dp1, dn1 + delta)
    return pos, neg, sig0, sig1


def build_loss(clusters: Sequence[ClusterData], psi: Sequence[np.ndarray], target: float, estimand: str = OV,
               psi_variant: str = "DR", delta: float = DEFAULT_DELTA, c0: float | None = None) -> LossSpec:
    """Assemble loss tables from per-cluster pseudo-outcome tables; C0 is computed when not given."""
    estimand = check_estimand(estimand)
    target = check_target(target)
    if not delta > 0:
        raise ValueError("delta must be positive")
    ws = [bernstein_weights(p, estimand) for p in psi]
    deg = np.array([d for _, d in ws], dtype=np.int64)
    W = np.zeros((len(ws), int(deg.max()) + 1))
    for i, (w, d) in enumerate(ws):
        W[i, : d + 1] = w
    coef = nu_coefficients(W, deg, target)
    if c0 is None:
        c0 = compute_c0_from(coef, W, deg, target)
    coef[:, 0] = c0
    pos, neg, sig0, sig1 = split_parts(coef, delta)
    ids = tuple(c.cluster_id for c in clusters)
    return LossSpec(estimand, check_psi(psi_variant), target, float(delta), float(c0), W, deg, coef, pos, neg,
                    sig0, sig1, ids)


def make_loss(clusters: Sequence[ClusterData], nuisances, target: float, estimand: str = OV, psi_variant: str = "DR",
              delta: float = DEFAULT_DELTA, c0: float | None = None) -> LossSpec:
    return build_loss(clusters, psi_tables(psi_variant, clusters, nuisances), target, estimand, psi_variant, delta, c0)


def loss_eval(t: float, cluster: ClusterData, spec: LossSpec) -> float:
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("loss argument must be finite")
    i = spec.index_of(cluster)
    return float(spec.rows([i]).loss(np.array([t]))[0])


def convex_split(t: float, cluster: ClusterData, spec: LossSpec) -> tuple[float, float, float]:
    """(L_plus, L_minus, subgradient of L_minus) at t for one cluster."""
    i = spec.index_of(cluster)
    lp, _, lm, gm = spec.rows([i]).split(np.array([float(t)]))
    return float(lp[0]), float(lm[0]), float(gm[0])


# --------------------------------------------------------------------------
# C0


def _min_nu(coef: np.ndarray, W: np.ndarray, deg: np.ndarray, target: float, grid_step: float = 1e-3) -> float:
    """Minimum over rows and t in [0, 1] of the C0-free nu.

    Grid values plus the exact local minima: wherever the derivative S - target
    changes sign from negative to non-negative between grid points, the root is
    bracketed and refined by bisection.
    """
    grid = np.linspace(0.0, 1.0, int(round(1 / grid_step)) + 1)
    c = coef.copy()
    c[:, 0] = 0.0
    powers = grid[None, :] ** np.arange(c.shape[1])[:, None]
    vals = c @ powers
    best = float(vals.min())
    dv = bernstein_grid(W, deg, grid) - target
    rows, cols = np.nonzero((dv[:, :-1] < 0) & (dv[:, 1:] >= 0))
    if rows.size:
        lo = grid[cols].copy()
        hi = grid[cols + 1].copy()
        sub_w, sub_d = W[rows], deg[rows]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            k = np.arange(W.shape[1])
            tt = mid[:, None]
            expo = np.maximum(sub_d[:, None] - k[None, :], 0)
            mask = k[None, :] <= sub_d[:, None]
            s = np.where(mask, sub_w * tt**k * (1 - tt) ** expo, 0.0).sum(axis=1) - target
            neg = s < 0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
        root = 0.5 * (lo + hi)
        rv, _ = horner(c[rows], root)
        best = min(best, float(rv.min()))
    return best


def compute_c0_from(coef, W, deg, target: float, grid_step: float = 1e-3) -> float:
    return 1.0 - _min_nu(coef, W, deg, target, grid_step)


def compute_c0(clusters: Sequence[ClusterData], psi: Sequence[np.ndarray], target: float, estimand: str = OV,
               grid_step: float = 1e-3) -> float:
    """Smallest constant that lifts every cluster's nu to at least 1 on [0, 1]."""
    estimand = check_estimand(estimand)
    ws = [bernstein_weights(p, estimand) for p in psi]
    deg = np.array([d for _, d in ws], dtype=np.int64)
    W = np.zeros((len(ws), int(deg.max()) + 1))
    for i, (w, d) in enumerate(ws):
        W[i, : d + 1] = w
    return compute_c0_from(nu_coefficients(W, deg, target), W, deg, target, grid_step)


# --------------------------------------------------------------------------
# grid minimizers


def grid_argmin(spec: LossSpec, grid_step: float = 1e-3) -> np.ndarray:
    """Per-cluster argmin of L on the [0, 1] grid (first minimizer on ties)."""
    grid = np.linspace(0.0, 1.0, int(round(1 / grid_step)) + 1)
    return grid[np.argmin(spec.nu_grid(grid), axis=1)]


def constant_rule_argmin(spec: LossSpec, grid_step: float = 1e-3) -> float:
    """Grid minimizer of the empirical risk over constant rules theta == alpha."""
    grid = np.linspace(0.0, 1.0, int(round(1 / grid_step)) + 1)
    risk = spec.nu_grid(grid).mean(axis=0)
    return float(grid[int(np.argmin(risk))])


__all__ = [
    "OV", "SO", "PSI_VARIANTS", "DEFAULT_DELTA", "LossSpec", "psi_table", "psi_tables", "psi_eval", "build_loss",
    "make_loss", "loss_eval", "convex_split", "compute_c0", "grid_argmin", "constant_rule_argmin", "cell_indicator",
]
