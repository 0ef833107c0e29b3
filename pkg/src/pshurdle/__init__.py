"""Preferential-sampling hurdle models on SPDE lattices.

Simulation, Laplace-approximated maximum likelihood and prediction for
zero-inflated biomass observed by a uniform survey and by a preferentially
sampled fishery.
"""

__version__ = "0.1.0"

from .data import Dataset, load_dataset_csv, write_dataset_csv
from .estimator import PreferentialHurdleModel
from .exceptions import InnerDivergenceError, InvalidArgumentError, NumericalError
from .grid import (
    GridSpec,
    MaternConfig,
    build_grid,
    build_precision,
    matern_correlation,
    projection_matrix,
    reparam_internal_to_interpretable,
    reparam_interpretable_to_internal,
)
from .laplace import FitConfig, FitResult, fit, inner_mode, laplace_objective, std_errors
from .likelihood import (
    HyperParams,
    LatentFields,
    NllBreakdown,
    apply_catchability,
    joint_nll,
    nll_bernoulli,
    nll_gamma,
    nll_gmrf,
    nll_ipp,
)
from .metrics import PredictionFields, hellinger, metric_report, predict_fields, rmse_mae, summarize_replicas
from .simulate import (
    SCENARIOS,
    ScenarioConfig,
    SyntheticTruth,
    link_fields,
    make_scenario,
    sample_gmrf,
    sample_hpp,
    sample_hurdle,
    sample_ipp,
)

__all__ = [name for name in dir() if not name.startswith("_")]
