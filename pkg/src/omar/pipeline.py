"""Cross-fitted direct OMAR estimation and the indirect (plug-in) comparators.

Each repeat splits the clusters into two halves. For half l the nuisances are
fitted on the other half (median of U undersampled fits), the loss is built on
half l, and a kernel rule theta_(-l) is trained there. A new point gets the
winsorized average of the two unwinsorized rules; a training point in half l
gets W(theta_(-l)). Repeats are aggregated by median (or mean) and winsorized.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import M_CAP, ClusterData, cluster_features, validate_dataset
from .estimands import OV, check_estimand, check_target, omar_batch
from .loss import DEFAULT_DELTA, check_psi, make_loss
from .nuisance import (PROPENSITY_FLOOR, MedianModel, NuisanceFit, NuisanceFitError, fit_nuisances,
                       fit_outcome_regression, mu_from_dict, undersample)
from .seeds import stage_rng
from .solver import KernelRule, SolverConfig, cross_validate, fit_rule, gamma_grid, init_points

log = logging.getLogger(__name__)

AGGREGATIONS = ("median", "mean")
MIN_SUCCESS = 0.6


class SolverFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class CrossFitPlan:
    repeats: int = 5
    undersample_rounds: int = 3
    aggregation: str = "median"
    seed: int = 0
    n_folds: int = 2

    def __post_init__(self):
        if self.n_folds != 2:
            raise ValueError("cross-fitting uses exactly two folds")
        if self.repeats < 1 or self.undersample_rounds < 1:
            raise ValueError("repeats and undersample_rounds must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass(frozen=True)
class LossConfig:
    target: float = 0.7
    estimand: str = OV
    psi_variant: str = "DR"
    delta: float = DEFAULT_DELTA
    grid_step: float = 1e-3

    def __post_init__(self):
        check_target(self.target)
        check_estimand(self.estimand)
        check_psi(self.psi_variant)
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class NuisanceConfig:
    mu_family: str = "logistic"
    e_variant: str = "product"
    floor: float = PROPENSITY_FLOOR
    bins: int = M_CAP


def _child_seed(seed: int, stage: str, *idx) -> int:
    return int(stage_rng(seed, stage, *idx).integers(2**31))


def fold_split(n: int, seed: int, repeat: int) -> np.ndarray:
    """Fold label (1 or 2) per cluster for one repeat; halves differ in size by at most one."""
    perm = stage_rng(seed, "folds", repeat).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.where(np.arange(n) < n // 2, 1, 2)
    return labels


# --------------------------------------------------------------------------
# fitted objects


@dataclass
class FoldFit:
    fold: int
    eval_ids: tuple
    train_ids: tuple
    rule: KernelRule
    gamma: float
    lam: float
    status: str
    iterations: int
    history: list
    nuisance: NuisanceFit | None = None

    def to_dict(self, include_nuisance: bool = False) -> dict:
        d = {"fold": self.fold, "eval_ids": list(self.eval_ids), "train_ids": list(self.train_ids),
             "rule": self.rule.to_dict(), "gamma": self.gamma, "lambda": self.lam, "status": self.status,
             "iterations": self.iterations, "history": [float(v) for v in self.history]}
        if include_nuisance and self.nuisance is not None:
            d["nuisance"] = self.nuisance.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldFit":
        nuis = NuisanceFit.from_dict(d["nuisance"]) if "nuisance" in d else None
        return cls(int(d["fold"]), tuple(d["eval_ids"]), tuple(d["train_ids"]), KernelRule.from_dict(d["rule"]),
                   float(d["gamma"]), float(d["lambda"]), d["status"], int(d["iterations"]), list(d["history"]),
                   nuis)


@dataclass
class RepeatFit:
    index: int
    folds: tuple  # (FoldFit for fold 1, FoldFit for fold 2)

    def fold_of(self, cluster_id: str) -> int | None:
        for f in self.folds:
            if cluster_id in f.eval_ids:
                return f.fold
        return None

    def decisions(self, features: np.ndarray) -> np.ndarray:
        """Unwinsorized theta_(-1), theta_(-2) at the given features, shape (2, N)."""
        return np.stack([f.rule.decision(features) for f in self.folds])

    def predict(self, features: np.ndarray, cluster_ids: Sequence[str] | None = None,
                fold: int | None = None) -> np.ndarray:
        dec = self.decisions(features)
        if fold is not None:
            if fold not in (1, 2):
                raise ValueError(f"unknown fold tag {fold!r}; expected 1 or 2")
            return np.clip(dec[fold - 1], 0.0, 1.0)
        if cluster_ids is None:
            return np.clip(dec.mean(axis=0), 0.0, 1.0)
        out = np.empty(features.shape[0])
        for i, cid in enumerate(cluster_ids):
            f = self.fold_of(cid)
            if f is None:
                raise KeyError(f"cluster {cid!r} has no fold tag in repeat {self.index}")
            out[i] = dec[f - 1, i]
        return np.clip(out, 0.0, 1.0)


@dataclass
class DirectRuleSet:
    repeats: list
    plan: CrossFitPlan
    loss: LossConfig
    solver: SolverConfig
    nuisance: NuisanceConfig
    requested: int
    dropped: list = field(default_factory=list)
    include_size: bool = True

    @property
    def effective_repeats(self) -> int:
        return len(self.repeats)

    def features(self, clusters: Sequence[ClusterData]) -> np.ndarray:
        return cluster_features(clusters, include_size=self.include_size)

    def repeat_predictions(self, clusters: Sequence[ClusterData], in_sample: bool = False,
                           fold: int | None = None) -> np.ndarray:
        feats = self.features(clusters)
        ids = [c.cluster_id for c in clusters] if in_sample else None
        return np.stack([r.predict(feats, ids, fold) for r in self.repeats])

    def predict(self, clusters: Sequence[ClusterData], in_sample: bool = False, fold: int | None = None) -> np.ndarray:
        """Aggregated prediction in [0, 1].

        ``in_sample`` routes each training cluster to the rule trained without
        its nuisance fold; ``fold`` forces one fold's rule in every repeat.
        """
        P = self.repeat_predictions(clusters, in_sample, fold)
        agg = np.median(P, axis=0) if self.plan.aggregation == "median" else P.mean(axis=0)
        return np.clip(agg, 0.0, 1.0)

    def to_dict(self, include_nuisance: bool = False) -> dict:
        return {
            "kind": "direct",
            "plan": asdict(self.plan),
            "loss": asdict(self.loss),
            "solver": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.solver).items()},
            "nuisance": asdict(self.nuisance),
            "requested_repeats": self.requested,
            "effective_repeats": self.effective_repeats,
            "dropped": self.dropped,
            "include_size": self.include_size,
            "repeats": [{"index": r.index, "folds": [f.to_dict(include_nuisance) for f in r.folds]}
                        for r in self.repeats],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DirectRuleSet":
        solver = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d["solver"].items()}
        reps = [RepeatFit(r["index"], tuple(FoldFit.from_dict(f) for f in r["folds"])) for r in d["repeats"]]
        return cls(reps, CrossFitPlan(**d["plan"]), LossConfig(**d["loss"]), SolverConfig(**solver),
                   NuisanceConfig(**d["nuisance"]), int(d["requested_repeats"]), list(d["dropped"]),
                   bool(d["include_size"]))


# --------------------------------------------------------------------------
# direct rule


def _fit_fold_nuisance(train, plan: CrossFitPlan, ncfg: NuisanceConfig, repeat: int, fold: int) -> NuisanceFit:
    return fit_nuisances(train, ncfg.mu_family, ncfg.e_variant, rounds=plan.undersample_rounds,
                         seed=_child_seed(plan.seed, "nuisance", repeat, fold), fold_id=fold, floor=ncfg.floor,
                         bins=ncfg.bins)


def _fit_fold_rule(held, nuis: NuisanceFit, lcfg: LossConfig, scfg: SolverConfig, solver_seed: int,
                   include_size: bool):
    spec = make_loss(held, nuis, lcfg.target, lcfg.estimand, lcfg.psi_variant, lcfg.delta)
    feats = cluster_features(held, include_size=include_size)
    r_hat = init_points(spec, held, nuis, lcfg.grid_step)
    if scfg.gamma is not None and scfg.lam is not None:
        gamma, lam = float(scfg.gamma), float(scfg.lam)
    else:
        grid = gamma_grid(feats, scfg.gamma_multipliers) if scfg.gamma is None else (float(scfg.gamma),)
        lams = scfg.lambda_grid if scfg.lam is None else (float(scfg.lam),)
        gamma, lam = cross_validate(spec, feats, r_hat, grid, lams, scfg.folds, solver_seed, scfg)
    rule, res = fit_rule(spec, feats, r_hat, gamma, lam, scfg)
    if res.status == "non_finite" or not np.isfinite(res.objective):
        raise SolverFailure("DC iterations produced a non-finite objective")
    return rule, res, gamma, lam


def fit_direct_rules(clusters: Sequence[ClusterData], plan: CrossFitPlan = CrossFitPlan(),
                     loss_configs: Sequence[LossConfig] = (LossConfig(),), solver: SolverConfig = SolverConfig(),
                     nuisance: NuisanceConfig = NuisanceConfig(), include_size: bool = True,
                     keep_nuisance: bool = False, solver_seed_overrides: dict | None = None,
                     progress: Callable[[str], None] | None = None) -> list[DirectRuleSet]:
    """Direct rules for several loss configurations sharing the same folds and nuisance fits.

    ``solver_seed_overrides`` maps (repeat, fold) to a CV seed, so that one
    fold's solver randomness can be perturbed in isolation.
    """
    clusters = list(clusters)
    validate_dataset(clusters)
    if len(clusters) < 4:
        raise ValueError("direct rule estimation needs at least 4 clusters")
    overrides = solver_seed_overrides or {}
    n = len(clusters)
    fits = [[] for _ in loss_configs]
    dropped = [[] for _ in loss_configs]
    for t in range(plan.repeats):
        labels = fold_split(n, plan.seed, t)
        per_cfg = [[] for _ in loss_configs]
        failed = [None] * len(loss_configs)
        for fold in (1, 2):
            held = [c for c, lab in zip(clusters, labels) if lab == fold]
            train = [c for c, lab in zip(clusters, labels) if lab != fold]
            if len(held) < 2 or len(train) < 2:
                raise ValueError("each cross-fitting fold needs at least 2 clusters")
            try:
                nuis = _fit_fold_nuisance(train, plan, nuisance, t, fold)
            except (NuisanceFitError, np.linalg.LinAlgError, FloatingPointError) as exc:
                failed = [f or f"nuisance fit failed in fold {fold}: {exc}" for f in failed]
                continue
            seed = overrides.get((t, fold), _child_seed(plan.seed, "solver", t, fold))
            for k, lcfg in enumerate(loss_configs):
                if failed[k]:
                    continue
                try:
                    rule, res, g, lam = _fit_fold_rule(held, nuis, lcfg, solver, seed, include_size)
                except (SolverFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
                    failed[k] = f"solver failed in fold {fold}: {exc}"
                    continue
                per_cfg[k].append(FoldFit(fold, tuple(c.cluster_id for c in held), nuis.train_ids, rule, g, lam,
                                          res.status, res.iterations, res.history,
                                          nuis if keep_nuisance else None))
            if progress:
                progress(f"repeat {t + 1}/{plan.repeats} fold {fold} done")
        for k in range(len(loss_configs)):
            if failed[k]:
                warnings.warn(f"repeat {t} dropped: {failed[k]}", RuntimeWarning)
                dropped[k].append({"repeat": t, "reason": failed[k]})
            else:
                fits[k].append(RepeatFit(t, tuple(per_cfg[k])))
    out = []
    for k, lcfg in enumerate(loss_configs):
        if len(fits[k]) < MIN_SUCCESS * plan.repeats or not fits[k]:
            raise SolverFailure(f"only {len(fits[k])} of {plan.repeats} repeats succeeded")
        out.append(DirectRuleSet(fits[k], plan, lcfg, solver, nuisance, plan.repeats, dropped[k], include_size))
    return out


def fit_direct_rule(clusters: Sequence[ClusterData], plan: CrossFitPlan = CrossFitPlan(),
                    loss: LossConfig = LossConfig(), solver: SolverConfig = SolverConfig(),
                    nuisance: NuisanceConfig = NuisanceConfig(), **kwargs) -> DirectRuleSet:
    return fit_direct_rules(clusters, plan, (loss,), solver, nuisance, **kwargs)[0]


# --------------------------------------------------------------------------
# indirect rule


@dataclass
class IndirectRule:
    mu: object
    target: float
    estimand: str = OV
    grid_step: float = 1e-3
    family: str = "logistic"

    def predict(self, clusters: Sequence[ClusterData]) -> np.ndarray:
        return omar_batch([self.mu.table(c) for c in clusters], self.target, self.estimand, self.grid_step)

    def with_target(self, target: float) -> "IndirectRule":
        return IndirectRule(self.mu, check_target(target), self.estimand, self.grid_step, self.family)

    def to_dict(self) -> dict:
        members = self.mu.models if isinstance(self.mu, MedianModel) else [self.mu]
        return {"kind": "indirect", "family": self.family, "target": self.target, "estimand": self.estimand,
                "grid_step": self.grid_step, "mu": [m.to_dict() for m in members]}

    @classmethod
    def from_dict(cls, d: dict) -> "IndirectRule":
        mus = [mu_from_dict(m) for m in d["mu"]]
        mu = mus[0] if len(mus) == 1 else MedianModel(mus)
        return cls(mu, float(d["target"]), d["estimand"], float(d["grid_step"]), d["family"])


def fit_indirect_rule(clusters: Sequence[ClusterData], plan: CrossFitPlan = CrossFitPlan(),
                      family: str = "logistic", loss: LossConfig = LossConfig(),
                      hyper: dict | None = None) -> IndirectRule:
    """Plug-in rule: median of U outcome regressions fitted on undersampled copies of all clusters."""
    clusters = list(clusters)
    validate_dataset(clusters)
    if len(clusters) < 4:
        raise ValueError("indirect rule estimation needs at least 4 clusters")
    models = []
    for u in range(plan.undersample_rounds):
        sub = undersample(clusters, seed=_child_seed(plan.seed, "indirect-undersample", u))
        models.append(fit_outcome_regression(sub, family, hyper, seed=_child_seed(plan.seed, "indirect", u)))
    mu = models[0] if len(models) == 1 else MedianModel(models)
    return IndirectRule(mu, loss.target, loss.estimand, loss.grid_step, family)
