"""Balancing weights with residualized (Lin-style) HC0 inference."""

from .balance import Provenance, WeightSet, check_balance, solve_entropy
from .data import Dataset, EstimandSpec, FeatureMap, Scope, Target, center_features, load_dataset
from .diagnostics import diagnose, smd, weight_quantiles, weighted_r2
from .inference import (
    EffectEstimate,
    Specification,
    estimate,
    hc0_variance,
    superpop_correction,
    wls_fit,
)
from .propensity import GlmFit, Link, fit_glm, ipw_weights

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EstimandSpec", "FeatureMap", "Scope", "Target", "center_features",
    "load_dataset", "Provenance", "WeightSet", "check_balance", "solve_entropy", "GlmFit",
    "Link", "fit_glm", "ipw_weights", "EffectEstimate", "Specification", "estimate",
    "hc0_variance", "superpop_correction", "wls_fit", "diagnose", "smd", "weight_quantiles",
    "weighted_r2",
]
