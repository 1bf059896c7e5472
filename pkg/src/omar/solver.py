"""Gaussian-kernel rule trained by the difference-of-convex algorithm.

The rule is theta(x) = sum_j eta_j k(x, x_j) + b over standardized cluster
features. Each outer DC step linearizes L_minus at the current fit and solves
the convex remainder with a monotone accelerated proximal-free gradient method
in the kernel metric; the accepted step is then extrapolated while the full
objective keeps falling.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClusterData
from .kernels import solve_subproblem
from .loss import LossSpec, grid_argmin
from .nuisance import Standardizer
from .seeds import stage_rng

log = logging.getLogger(__name__)

GAMMA_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)
LAMBDA_GRID = tuple(np.logspace(-4, 0, 7))
STRETCH_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
STRETCH_CLIP = (-1.0, 2.0)


def winsorize(t):
    """Clamp into [0, 1]."""
    t = np.asarray(t, dtype=float)
    if not np.isfinite(t).all():
        raise ValueError("winsorize needs finite input")
    out = np.clip(t, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def kernel_matrix(points: np.ndarray, gamma: float, other: np.ndarray | None = None) -> np.ndarray:
    """exp(-||x - x'||^2 / gamma^2); symmetric with unit diagonal when ``other`` is omitted."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    points = np.asarray(points, dtype=float)
    if not np.isfinite(points).all():
        raise ValueError("kernel features must be finite")
    if other is None:
        K = np.exp(-sq_dists(points, points) / gamma**2)
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
        return K
    return np.exp(-sq_dists(points, np.asarray(other, float)) / gamma**2)


def median_heuristic(points: np.ndarray) -> float:
    d2 = sq_dists(points, points)
    iu = np.triu_indices(points.shape[0], 1)
    med = float(np.sqrt(np.median(d2[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def jittered_solve(K: np.ndarray, rhs: np.ndarray, jitter: float = 1e-8) -> np.ndarray:
    """Solve (K + jitter I) x = rhs, growing the jitter tenfold until Cholesky succeeds."""
    n = K.shape[0]
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > 1.0:
                raise
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


# --------------------------------------------------------------------------
# rules


@dataclass
class KernelRule:
    support: np.ndarray
    eta: np.ndarray
    b: float
    gamma: float
    scaler: Standardizer

    def __post_init__(self):
        if self.support.shape[0] != self.eta.shape[0]:
            raise ValueError("support and eta lengths differ")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def decision(self, features: np.ndarray) -> np.ndarray:
        z = self.scaler(np.atleast_2d(np.asarray(features, float)))
        return kernel_matrix(z, self.gamma, self.support) @ self.eta + self.b

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "eta": self.eta.tolist(), "b": self.b, "gamma": self.gamma,
                "scaler": self.scaler.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelRule":
        return cls(np.asarray(d["support"], float), np.asarray(d["eta"], float), float(d["b"]), float(d["gamma"]),
                   Standardizer.from_dict(d["scaler"]))


@dataclass
class WinsorizedRule:
    inner: KernelRule

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.clip(self.inner.decision(features), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"inner": self.inner.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "WinsorizedRule":
        return cls(KernelRule.from_dict(d["inner"]))


# --------------------------------------------------------------------------
# initialization


def phi_features(clusters: Sequence[ClusterData], nuisances) -> np.ndarray:
    """Cluster summaries used to stretch boundary initial points: 12 averaged mu levels plus
    the averaged weighted residual."""
    cols = []
    for c in clusters:
        row = [float(np.mean(nuisances.mu.at(c, a, lv))) for a in (0, 1) for lv in STRETCH_LEVELS]
        e_tab = nuisances.e_table(c)
        e_obs = e_tab[np.arange(c.n), c.a, c.peer_counts()]
        row.append(float(np.mean((c.y - nuisances.mu.household(c)) / e_obs)))
        cols.append(row)
    return np.asarray(cols)


def init_points(spec: LossSpec, clusters: Sequence[ClusterData] | None = None, nuisances=None,
                grid_step: float = 1e-3, phi: np.ndarray | None = None) -> np.ndarray:
    """Grid minimizers of each cluster's loss, with boundary values pushed outside [0, 1].

    Each summary feature is regressed on the interior minimizers and inverted;
    a cluster stuck at 1 takes the largest inverted value (at least 1), one at 0
    the smallest (at most 0). Inverted values are clipped to [-1, 2].
    """
    r = grid_argmin(spec, grid_step)
    at0, at1 = r <= 0.0, r >= 1.0
    if not (at0.any() or at1.any()):
        return r
    if phi is None:
        if clusters is None or nuisances is None:
            return r
        phi = phi_features(clusters, nuisances)
    interior = ~(at0 | at1)
    if interior.sum() < 2:
        warnings.warn("fewer than two interior initial points; boundary values kept", RuntimeWarning)
        return r
    ri = r[interior]
    preds = []
    for k in range(phi.shape[1]):
        y = phi[interior, k]
        if np.ptp(ri) == 0:
            continue
        b1, b0 = np.polyfit(ri, y, 1)
        if abs(b1) < 1e-10:
            continue
        preds.append((phi[:, k] - b0) / b1)
    if not preds:
        return r
    P = np.clip(np.column_stack(preds), *STRETCH_CLIP)
    out = r.copy()
    out[at1] = np.maximum(P[at1].max(axis=1), 1.0)
    out[at0] = np.minimum(P[at0].min(axis=1), 0.0)
    return out


# --------------------------------------------------------------------------
# DC algorithm


@dataclass
class DCResult:
    eta: np.ndarray
    b: float
    objective: float
    history: list = field(default_factory=list)
    iterations: int = 0
    status: str = "converged"
    inner_flags: list = field(default_factory=list)


def dc_objective(spec: LossSpec, K: np.ndarray, eta: np.ndarray, b: float, lam: float) -> float:
    f = K @ eta + b
    return float(np.mean(spec.loss(f)) + 0.5 * lam * eta @ (K @ eta))


def _dc_loop(spec, K, lam, eta, b, max_outer, tol, inner_iter, inner_tol, boost=True):
    obj = dc_objective(spec, K, eta, b, lam)
    history = [obj]
    flags = []
    status = "max_iter"
    it = 0
    for it in range(1, max_outer + 1):
        f = K @ eta + b
        gm = spec.split(f)[3]
        eta_n, b_n, _, _, flag = solve_subproblem(K, eta, float(b), gm, float(lam), spec.pos, spec.sig0, spec.sig1,
                                                 inner_iter, inner_tol)
        flags.append(int(flag))
        obj_n = dc_objective(spec, K, eta_n, b_n, lam)
        if not np.isfinite(obj_n):
            status = "non_finite"
            break
        if obj_n > obj:
            # rounding-level rises mean the fixed point is reached; larger ones an inexact inner solve
            status = "converged" if obj_n - obj <= 1e-10 * max(1.0, abs(obj)) else "stalled"
            break
        if boost:
            # extrapolate along the DC direction while the objective keeps falling
            d_eta, d_b = eta_n - eta, b_n - b
            beta = 1.0
            while beta < 1e6:
                cand_eta, cand_b = eta_n + beta * d_eta, b_n + beta * d_b
                cand = dc_objective(spec, K, cand_eta, cand_b, lam)
                if not cand < obj_n:
                    break
                eta_b, b_b, obj_b = cand_eta, cand_b, cand
                beta *= 2.0
            if beta > 1.0:
                eta_n, b_n, obj_n = eta_b, b_b, obj_b
        step = float(np.sqrt(np.sum((eta_n - eta) ** 2) + (b_n - b) ** 2))
        eta, b, obj = eta_n, float(b_n), obj_n
        history.append(obj)
        if step < tol:
            status = "converged"
            break
    return DCResult(eta, float(b), obj, history, it, status, flags)


def dc_fit(spec: LossSpec, K: np.ndarray, lam: float, eta0: np.ndarray, b0: float, max_outer: int = 100,
           tol: float = 1e-5, inner_iter: int = 500, inner_tol: float = 1e-6, safeguard: bool = True,
           boost: bool = True) -> DCResult:
    """Minimize mean L(K eta + b) + lam/2 eta' K eta from (eta0, b0).

    After each convex solve the iterate is pushed further along the step
    direction while that keeps lowering the objective (boosted DC); the plain
    algorithm is ``boost=False``. When the result is worse than the zero rule
    (eta = 0, b = b0 = mean of the initial points) the loop is restarted from
    there and the better of the two runs is returned.
    """
    K = np.ascontiguousarray(K, dtype=float)
    res = _dc_loop(spec, K, lam, np.asarray(eta0, float).copy(), float(b0), max_outer, tol, inner_iter, inner_tol, boost)
    if safeguard:
        zero = np.zeros_like(res.eta)
        zobj = dc_objective(spec, K, zero, b0, lam)
        if zobj < res.objective:
            alt = _dc_loop(spec, K, lam, zero, float(b0), max_outer, tol, inner_iter, inner_tol, boost)
            if alt.objective < res.objective:
                alt.status = alt.status + "+restarted"
                res = alt
    return res


def init_coefficients(K: np.ndarray, r_hat: np.ndarray) -> tuple[np.ndarray, float]:
    b0 = float(np.mean(r_hat))
    return jittered_solve(K, r_hat - b0), b0


@dataclass
class SolverConfig:
    gamma_multipliers: tuple = GAMMA_MULTIPLIERS
    lambda_grid: tuple = LAMBDA_GRID
    folds: int = 10
    max_outer: int = 100
    tol: float = 1e-5
    inner_iter: int = 500
    inner_tol: float = 1e-6
    grid_step: float = 1e-3
    gamma: float | None = None
    lam: float | None = None


def fit_rule(spec: LossSpec, features: np.ndarray, r_hat: np.ndarray, gamma: float, lam: float,
             config: SolverConfig = SolverConfig()) -> tuple[KernelRule, DCResult]:
    """Standardize features, build K, initialize from r_hat and run the DC algorithm."""
    scaler = Standardizer.fit(features)
    z = scaler(features)
    K = kernel_matrix(z, gamma)
    eta0, b0 = init_coefficients(K, r_hat)
    res = dc_fit(spec, K, lam, eta0, b0, config.max_outer, config.tol, config.inner_iter, config.inner_tol)
    return KernelRule(z, res.eta, res.b, gamma, scaler), res


def gamma_grid(features: np.ndarray, multipliers=GAMMA_MULTIPLIERS) -> tuple:
    base = median_heuristic(Standardizer.fit(features)(features))
    return tuple(base * m for m in multipliers)


def cross_validate(spec: LossSpec, features: np.ndarray, r_hat: np.ndarray, gamma_grid: Sequence[float],
                   lambda_grid: Sequence[float], folds: int = 10, seed: int = 0,
                   config: SolverConfig = SolverConfig(), return_scores: bool = False):
    """Pick (gamma, lambda) minimizing the held-out mean loss of the winsorized rule.

    Ties go to the larger lambda, then the larger gamma. Failed fits score +inf.
    """
    if folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    if not gamma_grid or not lambda_grid:
        raise ValueError("empty tuning grid")
    cands = [(float(g), float(l)) for g in gamma_grid for l in lambda_grid]
    if len(set(cands)) == 1:
        return (cands[0], {cands[0]: np.nan}) if return_scores else cands[0]
    n = spec.size
    folds = min(folds, n)
    perm = stage_rng(seed, "cv-folds").permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % folds
    scores = {c: 0.0 for c in cands}
    for f in range(folds):
        tr = np.nonzero(fold_of != f)[0]
        te = np.nonzero(fold_of == f)[0]
        sp_tr, sp_te = spec.rows(tr), spec.rows(te)
        for g, l in dict.fromkeys(cands):
            try:
                rule, _ = fit_rule(sp_tr, features[tr], r_hat[tr], g, l, config)
                pred = np.clip(rule.decision(features[te]), 0.0, 1.0)
                val = float(np.sum(sp_te.loss(pred)))
                if not np.isfinite(val):
                    raise FloatingPointError("non-finite held-out loss")
            except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                warnings.warn(f"CV candidate gamma={g:g}, lambda={l:g} failed: {exc}", RuntimeWarning)
                val = np.inf
            scores[(g, l)] += val
    scores = {c: v / n for c, v in scores.items()}
    best = min(scores.values())
    tied = [c for c in cands if scores[c] <= best + 1e-12 * max(1.0, abs(best))]
    choice = max(tied, key=lambda c: (c[1], c[0]))
    return (choice, scores) if return_scores else choice
