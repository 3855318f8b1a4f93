"""Hidden semi-Markov vector autoregressions with covariate-dependent dwell hazards."""

__version__ = "0.1.0"

from .data import Dataset
from .em import FitResult, GridSelection, ModelParams, fit, grid_select, lambda_grid
from .emission import VarParams, stability_check, weighted_lasso_fit
from .errors import DegenerateStateError, HSMMVarError, InputError, NonConvergenceError, NumericalError
from .hidden import HazardParams, dwell_pmf, filtering_weights, forward_backward, viterbi_map
from .risk import DistressConfig, PredictiveMixture, ShapleyMatrix, predictive_mixture, risk_series, shapley
from .simboot import SimConfig, parametric_bootstrap, simulate

__all__ = [
    "Dataset", "FitResult", "GridSelection", "ModelParams", "fit", "grid_select", "lambda_grid",
    "VarParams", "stability_check", "weighted_lasso_fit",
    "DegenerateStateError", "HSMMVarError", "InputError", "NonConvergenceError", "NumericalError",
    "HazardParams", "dwell_pmf", "filtering_weights", "forward_backward", "viterbi_map",
    "DistressConfig", "PredictiveMixture", "ShapleyMatrix", "predictive_mixture", "risk_series", "shapley",
    "SimConfig", "parametric_bootstrap", "simulate",
]
