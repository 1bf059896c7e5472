"""Scoring of allocation rules: confusion counts, accuracy / two-sided F1 / MCC,
squared deviation from the oracle, and size-weighted OMAR summaries."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ClusterData, cluster_means


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for k in ("tp", "tn", "fp", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a non-negative integer")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1_two_sided: float
    mcc: float


def confusion_from_arrays(ybar, abar, theta, target: float) -> ConfusionCounts:
    """Positive outcome means Ybar > target; a positive call means Abar > theta."""
    ybar, abar, theta = (np.asarray(v, dtype=float) for v in (ybar, abar, theta))
    good = ybar > target
    over = abar > theta
    return ConfusionCounts(int(np.sum(good & over)), int(np.sum(~good & ~over)), int(np.sum(~good & over)),
                           int(np.sum(good & ~over)))


def confusion(clusters: Sequence[ClusterData], rule, target: float) -> ConfusionCounts:
    """``rule`` is an array of per-cluster thresholds or a callable on the cluster list."""
    ybar, abar = cluster_means(clusters)
    theta = rule(clusters) if callable(rule) else rule
    theta = np.broadcast_to(np.asarray(theta, dtype=float), ybar.shape)
    return confusion_from_arrays(ybar, abar, theta, target)


def metrics(counts: ConfusionCounts) -> Metrics:
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    total = counts.total
    if total == 0:
        raise ValueError("metrics need at least one evaluated cluster")
    acc = (tp + tn) / total
    f1 = 0.0
    if 2 * tp + fp + fn > 0:
        f1 += 2 * tp / (2 * tp + fp + fn)
    if 2 * tn + fp + fn > 0:
        f1 += 2 * tn / (2 * tn + fp + fn)
    factors = (tp + fp, tp + fn, tn + fp, tn + fn)
    if min(factors) == 0:
        mcc = 0.0
    else:
        # integer numerator keeps exact cancellation for the uninformative case
        mcc = (tp * tn - fp * fn) / math.sqrt(math.prod(factors))
        mcc = min(1.0, max(-1.0, mcc))
    return Metrics(acc, f1, mcc)


def squared_deviation(rule, oracle, clusters: Sequence[ClusterData] | None = None) -> tuple[np.ndarray, float]:
    """Per-cluster (theta_hat - theta*)^2 and their mean; callables are applied to ``clusters``."""
    pred = np.asarray(rule(clusters) if callable(rule) else rule, dtype=float)
    true = np.asarray(oracle(clusters) if callable(oracle) else oracle, dtype=float)
    if pred.shape != true.shape:
        raise ValueError("rule and oracle disagree in length")
    dev = (pred - true) ** 2
    return dev, float(dev.mean()) if dev.size else float("nan")


def weighted_mean_omar(theta, groups=None, weights=None) -> tuple[dict, float]:
    """Size-weighted average OMAR overall and per group label; empty groups are skipped with a warning.

    ``groups`` may be a label per cluster, or a mapping label -> boolean mask /
    index list (so that a requested group can be empty).
    """
    theta = np.asarray(theta, dtype=float)
    w = np.ones_like(theta) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != theta.shape:
        raise ValueError("weights and theta disagree in length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    overall = float(np.sum(w * theta) / np.sum(w)) if theta.size else float("nan")
    per = {}
    if groups is None:
        return per, overall
    if isinstance(groups, dict):
        members = {}
        for g, sel in groups.items():
            sel = np.asarray(sel)
            members[g] = sel if sel.dtype == bool else np.isin(np.arange(theta.size), sel)
    else:
        labels = np.asarray(groups)
        if labels.shape != theta.shape:
            raise ValueError("group labels and theta disagree in length")
        members = {g: labels == g for g in dict.fromkeys(labels.tolist())}
    for g, mask in members.items():
        if not mask.any():
            warnings.warn(f"group {g!r} is empty and is omitted", RuntimeWarning)
            continue
        per[g] = float(np.sum(w[mask] * theta[mask]) / np.sum(w[mask]))
    return per, overall


# --------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ("target", "method", "accuracy", "f1_two_sided", "mcc", "mean_squared_deviation",
                  "weighted_mean_omar", "tp", "tn", "fp", "fn", "n_clusters")


def fmt(v) -> str:
    """Six significant digits for reals; integers and strings verbatim."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return "" if v is None else str(v)


def evaluation_row(target: float, method: str, clusters: Sequence[ClusterData], theta, oracle=None) -> dict:
    theta = np.asarray(theta, dtype=float)
    counts = confusion(clusters, theta, target)
    m = metrics(counts)
    msd = squared_deviation(theta, oracle)[1] if oracle is not None else float("nan")
    sizes = np.array([c.n for c in clusters], dtype=float)
    return {"target": target, "method": method, "accuracy": m.accuracy, "f1_two_sided": m.f1_two_sided,
            "mcc": m.mcc, "mean_squared_deviation": msd, "weighted_mean_omar": weighted_mean_omar(theta, None, sizes)[1],
            "tp": counts.tp, "tn": counts.tn, "fp": counts.fp, "fn": counts.fn, "n_clusters": counts.total}


def report_csv(rows: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def report_json(rows: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS, extra: dict | None = None) -> str:
    """Same cells as the CSV, as strings, so both files carry identical content."""
    doc = {"columns": list(columns), "rows": [{c: fmt(r.get(c)) for c in columns} for r in rows]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def parse_report_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def emit_report(rows: Sequence[dict], path: str | Path, fmt_kind: str = "csv",
                columns: Sequence[str] = REPORT_COLUMNS, extra: dict | None = None) -> Path:
    path = Path(path)
    if fmt_kind == "csv":
        text = report_csv(rows, columns)
    elif fmt_kind == "json":
        text = report_json(rows, columns, extra)
    else:
        raise ValueError(f"unknown report format {fmt_kind!r}")
    path.write_text(text, encoding="utf-8")
    return path
