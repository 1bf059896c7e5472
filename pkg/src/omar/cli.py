"""Command-line entry point.

Every command reads a JSON config (``--config``), writes its artifacts plus a
``manifest.json`` into ``--out`` and is a deterministic function of the config
and seed. Outputs are staged in a temporary directory and only moved into
place when the command succeeds. Failures print a JSON error document to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import shutil
import sys
import tempfile
import traceback
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend_name, set_threads
from .data import DataError, read_csv, write_csv
from .diagnostics import (BALANCE_COLUMNS, MONOTONICITY_COLUMNS, OVERLAP_COLUMNS, RESIDUAL_COLUMNS,
                          balance_diagnostic, monotonicity_diagnostic, overlap_diagnostic, residual_diagnostic)
from .estimands import check_target
from .evaluation import REPORT_COLUMNS, evaluation_row, report_csv, report_json
from .nuisance import MedianModel, fit_nuisances
from .pipeline import (CrossFitPlan, LossConfig, NuisanceConfig, _child_seed, fit_direct_rules, fit_indirect_rule,
                       fold_split)
from .simulation import (BiasDemoConfig, SimConfig, SurveyConfig, bias_demo, simulate, simulate_survey, true_omars)
from .solver import SolverConfig

COMMANDS = ("simulate", "fit-direct", "fit-indirect", "evaluate", "diagnose", "bias-demo")
DEFAULT_TARGETS = (0.67, 0.68, 0.69, 0.70, 0.71, 0.72, 0.73)
INDIRECT_FAMILIES = ("logistic", "kernel")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config helpers


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(command: str, config: dict) -> str:
    return hashlib.sha256(canonical_json({"command": command, "config": config}).encode()).hexdigest()


def load_config(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    # a run manifest can be fed back in to reproduce its run
    if "config" in cfg and "command" in cfg:
        if cfg["command"] != command:
            raise ConfigError(f"manifest is for command {cfg['command']!r}, not {command!r}")
        cfg = cfg["config"]
    return cfg


def _build(cls, section: dict | None, name: str):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    for k, v in section.items():
        if isinstance(v, list):
            section[k] = tuple(v)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name}: {exc}") from exc


def _targets(cfg: dict) -> list[float]:
    targets = cfg.get("targets", list(DEFAULT_TARGETS))
    if not isinstance(targets, list) or not targets:
        raise ConfigError("targets must be a non-empty list")
    try:
        return [check_target(float(t)) for t in targets]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _input(cfg: dict, key: str) -> Path:
    if key not in cfg:
        raise ConfigError(f"config needs {key!r}")
    p = Path(cfg[key])
    if not p.is_file():
        raise ConfigError(f"input file not found: {p}")
    return p


def _loss_configs(cfg: dict, targets) -> list[LossConfig]:
    base = dict(cfg.get("loss", {}))
    base.pop("target", None)
    return [_build(LossConfig, {**base, "target": t}, "loss") for t in targets]


def _plan(cfg: dict, seed: int) -> CrossFitPlan:
    return _build(CrossFitPlan, {**cfg.get("plan", {}), "seed": seed}, "plan")


def _sim_config(section: dict) -> tuple[str, object]:
    section = dict(section)
    profile = section.pop("profile", "simulation")
    if profile == "simulation":
        return profile, _build(SimConfig, section, "simulation")
    if profile == "survey":
        return profile, _build(SurveyConfig, section, "simulation")
    raise ConfigError(f"unknown simulation profile {profile!r}")


def _simulate(section: dict, seed: int, n: int | None = None):
    profile, sc = _sim_config({**section, **({"n_clusters": n} if n else {})})
    return (simulate if profile == "simulation" else simulate_survey)(sc, seed=seed)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=False) + "\n"


def _with_hash(rows, h):
    return [{**r, "config_hash": h} for r in rows]


def _emit(out: Path, stem: str, rows, columns, h: str) -> list[str]:
    cols = tuple(columns) + ("config_hash",)
    rows = _with_hash(rows, h)
    (out / f"{stem}.csv").write_text(report_csv(rows, cols), encoding="utf-8")
    (out / f"{stem}.json").write_text(report_json(rows, cols, {"config_hash": h}), encoding="utf-8")
    return [f"{stem}.csv", f"{stem}.json"]


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, seed: int, out: Path, h: str) -> list[str]:
    """Write a synthetic dataset (and optionally a test set) as CSV."""
    section = {k: v for k, v in cfg.items() if k not in ("seed", "test_clusters")}
    data = _simulate(section, seed)
    write_csv(data, out / "data.csv")
    files = ["data.csv"]
    n_test = int(cfg.get("test_clusters", 0))
    if n_test > 0:
        write_csv(_simulate(section, seed + 1, n_test), out / "test.csv")
        files.append("test.csv")
    return files


def _solver(cfg: dict) -> SolverConfig:
    return _build(SolverConfig, cfg.get("solver", {}), "solver")


def cmd_fit_direct(cfg: dict, seed: int, out: Path, h: str) -> list[str]:
    """Cross-fitted direct rules for each target, with in-sample predictions."""
    data = read_csv(_input(cfg, "data"))
    targets = _targets(cfg)
    sets = fit_direct_rules(data, _plan(cfg, seed), _loss_configs(cfg, targets), _solver(cfg),
                            _build(NuisanceConfig, cfg.get("nuisance", {}), "nuisance"))
    (out / "direct_rules.json").write_text(_dump({"config_hash": h, "rule_sets": [s.to_dict() for s in sets]}),
                                           encoding="utf-8")
    rows = []
    for t, s in zip(targets, sets):
        pred = s.predict(data, in_sample=True)
        rows += [{"cluster_id": c.cluster_id, "target": t, "omar": float(p)} for c, p in zip(data, pred)]
    return ["direct_rules.json"] + _emit(out, "predictions", rows, ("cluster_id", "target", "omar"), h)


def cmd_fit_indirect(cfg: dict, seed: int, out: Path, h: str) -> list[str]:
    """Plug-in rule from a fitted outcome regression, with predictions per target."""
    data = read_csv(_input(cfg, "data"))
    targets = _targets(cfg)
    family = cfg.get("family", "logistic")
    if family not in INDIRECT_FAMILIES:
        raise ConfigError(f"family must be one of {INDIRECT_FAMILIES}")
    loss = _loss_configs(cfg, targets[:1])[0]
    rule = fit_indirect_rule(data, _plan(cfg, seed), family, loss, cfg.get("hyper"))
    (out / "indirect_rule.json").write_text(_dump({"config_hash": h, "rule": rule.to_dict()}), encoding="utf-8")
    rows = []
    for t in targets:
        pred = rule.with_target(t).predict(data)
        rows += [{"cluster_id": c.cluster_id, "target": t, "omar": float(p)} for c, p in zip(data, pred)]
    return ["indirect_rule.json"] + _emit(out, "predictions", rows, ("cluster_id", "target", "omar"), h)


def cmd_evaluate(cfg: dict, seed: int, out: Path, h: str) -> list[str]:
    """Fit the direct and indirect rules on training data and score them on test data.

    Data come either from ``train``/``test`` CSV paths or from a ``simulation``
    block (with ``n_train``/``n_test``). The oracle row needs the generating
    model, given by the ``simulation`` block.
    """
    targets = _targets(cfg)
    sim = cfg.get("simulation")
    if "train" in cfg:
        train, test = read_csv(_input(cfg, "train")), read_csv(_input(cfg, "test"))
    elif sim is not None:
        sim = dict(sim)
        n_train, n_test = int(sim.pop("n_train", 500)), int(sim.pop("n_test", 200))
        both = _simulate(sim, seed, n_train + n_test)
        train, test = both[:n_train], both[n_train:]
    else:
        raise ConfigError("evaluate needs train/test paths or a simulation block")
    oracle_cfg = None
    if sim is not None:
        profile, sc = _sim_config({k: v for k, v in sim.items() if k not in ("n_train", "n_test")})
        if profile == "simulation":
            oracle_cfg = sc
    methods = cfg.get("methods", ["direct", "indirect-logistic", "indirect-kernel"])
    plan = _plan(cfg, seed)
    losses = _loss_configs(cfg, targets)
    preds = {}
    if "direct" in methods:
        sets = fit_direct_rules(train, plan, losses, _solver(cfg),
                                _build(NuisanceConfig, cfg.get("nuisance", {}), "nuisance"))
        preds["direct"] = [s.predict(test) for s in sets]
    for fam in INDIRECT_FAMILIES:
        if f"indirect-{fam}" in methods:
            rule = fit_indirect_rule(train, plan, fam, losses[0])
            preds[f"indirect-{fam}"] = [rule.with_target(t).predict(test) for t in targets]
    unknown = set(methods) - {"direct"} - {f"indirect-{f}" for f in INDIRECT_FAMILIES}
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}")
    rows = []
    oracles = [true_omars(test, t, lc.estimand, lc.grid_step, oracle_cfg) for t, lc in zip(targets, losses)] \
        if oracle_cfg is not None else [None] * len(targets)
    for k, t in enumerate(targets):
        if oracles[k] is not None:
            rows.append(evaluation_row(t, "oracle", test, oracles[k], oracles[k]))
        for m in preds:
            rows.append(evaluation_row(t, m, test, preds[m][k], oracles[k]))
    rows.sort(key=lambda r: (r["method"], r["target"]))
    return _emit(out, "metrics", rows, REPORT_COLUMNS, h)


def cmd_diagnose(cfg: dict, seed: int, out: Path, h: str) -> list[str]:
    """Median of the cross-fitted nuisance models, then the four assumption checks."""
    data = read_csv(_input(cfg, "data"))
    plan = _plan(cfg, seed)
    ncfg = _build(NuisanceConfig, cfg.get("nuisance", {}), "nuisance")
    mus, es = [], []
    for t in range(plan.repeats):
        labels = fold_split(len(data), plan.seed, t)
        for fold in (1, 2):
            train = [c for c, lab in zip(data, labels) if lab != fold]
            nf = fit_nuisances(train, ncfg.mu_family, ncfg.e_variant, plan.undersample_rounds,
                               seed=_child_seed(plan.seed, "nuisance", t, fold), fold_id=fold, floor=ncfg.floor, bins=ncfg.bins)
            mus.append(nf.mu)
            es.append(nf.e)
    mu = MedianModel(mus)
    e = MedianModel(es, floor=ncfg.floor)
    files = []
    files += _emit(out, "balance", balance_diagnostic(data, e).rows(), BALANCE_COLUMNS, h)
    files += _emit(out, "overlap", overlap_diagnostic(data, e, int(cfg.get("bins", 20))).rows(), OVERLAP_COLUMNS, h)
    files += _emit(out, "monotonicity", monotonicity_diagnostic(data, mu).rows(), MONOTONICITY_COLUMNS, h)
    files += _emit(out, "residuals", residual_diagnostic(data, mu, int(cfg.get("n_bins", 10))).rows(),
                   RESIDUAL_COLUMNS, h)
    return files


def cmd_bias_demo(cfg: dict, seed: int, out: Path, h: str) -> list[str]:
    """Household-level versus block-level OMAR under the threshold spillover model."""
    section = {k: v for k, v in cfg.items() if k != "seed"}
    rows = bias_demo(_build(BiasDemoConfig, section, "bias-demo"))
    return _emit(out, "bias_demo", rows, ("q_a", "p", "beta2", "naive_omar", "true_omar", "difference"), h)


HANDLERS = {"simulate": cmd_simulate, "fit-direct": cmd_fit_direct, "fit-indirect": cmd_fit_indirect,
            "evaluate": cmd_evaluate, "diagnose": cmd_diagnose, "bias-demo": cmd_bias_demo}


# --------------------------------------------------------------------------
# runner


def _versions() -> dict:
    import scipy

    v = {"omar": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
         "python": platform.python_version(), "backend": backend_name()}
    try:
        import numba

        v["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    return v


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(command: str, config: dict, out: str | Path, seed: int | None = None) -> list[Path]:
    """Execute one command; returns the written paths. Raises on failure with no files left behind."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    config = dict(config)
    if seed is not None:
        config["seed"] = int(seed)
    seed = int(config.get("seed", 0))
    config["seed"] = seed
    h = config_hash(command, config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".omar-", dir=out))
    try:
        names = HANDLERS[command](config, seed, stage, h)
        manifest = {"command": command, "config": config, "config_hash": h, "seed": seed,
                    "versions": _versions(), "outputs": {n: _sha256(stage / n) for n in names}}
        (stage / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
        names.append("manifest.json")
        written = []
        for n in names:
            os.replace(stage / n, out / n)
            written.append(out / n)
        return written
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omar", description="Optimal minimal allocation rules for clustered data.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=HANDLERS[name].__doc__.splitlines()[0] if HANDLERS[name].__doc__ else None)
        s.add_argument("--config", help="JSON config file (a run manifest also works)")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--threads", type=int, default=None, help="threads for compiled kernels")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            set_threads(args.threads)
        cfg = load_config(args.config, args.command)
        run(args.command, cfg, args.out, args.seed)
        return 0
    except (ConfigError, DataError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        code = 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error document
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command,
               "trace": traceback.format_exc(limit=5)}
        code = 1
    sys.stderr.write(json.dumps(err) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
