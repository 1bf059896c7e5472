"""Optimal minimal allocation rules (OMAR) for clustered data under partial interference.

The smallest cluster-level treated fraction that lifts the expected outcome
above a target, estimated either by plugging a fitted outcome regression into
a grid search (indirect rule) or by minimizing a tailored nonconvex risk with
a kernel machine (direct rule).
"""

__version__ = "0.1.0"

from .data import ClusterData, DataError, read_csv, write_csv
from .estimands import OV, SO, indirect_rule, outcome_surface
from .pipeline import CrossFitPlan, LossConfig, NuisanceConfig, fit_direct_rule, fit_direct_rules, fit_indirect_rule
from .simulation import SimConfig, simulate, true_omars

__all__ = [
    "ClusterData", "DataError", "read_csv", "write_csv", "OV", "SO", "indirect_rule", "outcome_surface",
    "CrossFitPlan", "LossConfig", "NuisanceConfig", "fit_direct_rule", "fit_direct_rules", "fit_indirect_rule",
    "SimConfig", "simulate", "true_omars", "__version__",
]
