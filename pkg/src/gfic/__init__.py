"""GFIC: focused model and moment selection for GMM, with a dynamic panel toolkit."""

from .engine import (
    BiasEstimate,
    GficScore,
    LimitObjects,
    SpecId,
    TargetFunction,
    bias_correct_B,
    compute_K,
    compute_M,
    compute_Psi,
    estimate_bias_params,
    gfic_score,
    select,
)
from .panel import DiffPanel, PanelDataset, first_difference, load_panel, project_out_controls, save_panel

__all__ = [
    "BiasEstimate",
    "DiffPanel",
    "GficScore",
    "LimitObjects",
    "PanelDataset",
    "SpecId",
    "TargetFunction",
    "bias_correct_B",
    "compute_K",
    "compute_M",
    "compute_Psi",
    "estimate_bias_params",
    "first_difference",
    "gfic_score",
    "load_panel",
    "project_out_controls",
    "save_panel",
    "select",
]
__version__ = "0.1.0"
