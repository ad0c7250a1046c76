from .analysis import (
    BinnedScatter,
    analysis_frame,
    arrests_per_hour,
    arsinh_elasticity_factor,
    binned_scatter,
    build_relative_shares,
    city_validation_suite,
    composition_regressions,
    elasticity_arsinh,
    extreme_quantile_comparison,
    pearson,
    shift_hour_disparities,
    variance_decomposition,
)
from .models import ModelSpec, RegressionResult, design_matrix, fit_ols, table1_specs, table2_specs
from .ols import OLS, RankDeficientError, demean_within, significance_stars

__all__ = [
    "BinnedScatter",
    "ModelSpec",
    "OLS",
    "RankDeficientError",
    "RegressionResult",
    "analysis_frame",
    "arrests_per_hour",
    "arsinh_elasticity_factor",
    "binned_scatter",
    "build_relative_shares",
    "city_validation_suite",
    "composition_regressions",
    "demean_within",
    "design_matrix",
    "elasticity_arsinh",
    "extreme_quantile_comparison",
    "fit_ols",
    "pearson",
    "shift_hour_disparities",
    "significance_stars",
    "table1_specs",
    "table2_specs",
    "variance_decomposition",
]
