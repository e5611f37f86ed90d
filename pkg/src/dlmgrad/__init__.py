"""Bayesian graduation of mortality tables with dynamic linear models.

The package smooths raw death rates across age for one or several
populations at once, reconstructs missing cells, and extrapolates the
graduated curves to advanced ages. Smoothness is controlled locally by
age-varying discount factors instead of a single global penalty, and all
uncertainty is carried through a Gibbs sampler, so every output comes
with credible bands.
"""

from .data import (
    MISSING_SCENARIOS,
    MortalityTable,
    RateSurface,
    central_rates,
    death_probabilities,
    load_table,
    mask_ages,
    select_populations,
)
from .distributions import (
    RngStream,
    chol_psd,
    mvn_sample,
    rng_stream,
    wishart_mean,
    wishart_sample,
)
from .errors import DomainError, GraduationError, NumericalError, ParseError
from .forecast import (
    ForecastConfig,
    PredictiveSummary,
    blend_convergence,
    extrapolate,
    first_crossing_age,
    summarize_predictive,
)
from .inference import FilterPass, backward_sample, forward_filter, smooth_moments
from .metrics import (
    ComparisonReport,
    ComparisonRow,
    cells_from_mask,
    compare,
    mape,
    mean_interval_width,
    mspe,
)
from .model import (
    DiscountSchedule,
    DiscountSegment,
    DlmSpec,
    WishartPrior,
    build_common_term,
    build_local_linear,
    default_schedule,
    discount_at,
    initial_prior,
    wishart_prior,
)
from .sampler import (
    FitSummary,
    GibbsConfig,
    PosteriorDraws,
    effective_sample_size,
    impute_missing,
    initialize_missing,
    predictive_log_rate_draws,
    run_gibbs,
    sample_phi,
    split_rhat,
    summarize,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "GraduationError",
    "ParseError",
    "DomainError",
    "NumericalError",
    "MortalityTable",
    "RateSurface",
    "load_table",
    "central_rates",
    "death_probabilities",
    "mask_ages",
    "select_populations",
    "MISSING_SCENARIOS",
    "RngStream",
    "rng_stream",
    "chol_psd",
    "mvn_sample",
    "wishart_sample",
    "wishart_mean",
    "DiscountSchedule",
    "DiscountSegment",
    "DlmSpec",
    "WishartPrior",
    "discount_at",
    "default_schedule",
    "initial_prior",
    "wishart_prior",
    "build_local_linear",
    "build_common_term",
    "FilterPass",
    "forward_filter",
    "backward_sample",
    "smooth_moments",
    "GibbsConfig",
    "PosteriorDraws",
    "FitSummary",
    "run_gibbs",
    "initialize_missing",
    "sample_phi",
    "impute_missing",
    "summarize",
    "predictive_log_rate_draws",
    "split_rhat",
    "effective_sample_size",
    "ForecastConfig",
    "PredictiveSummary",
    "extrapolate",
    "blend_convergence",
    "first_crossing_age",
    "summarize_predictive",
    "mspe",
    "mape",
    "mean_interval_width",
    "cells_from_mask",
    "compare",
    "ComparisonRow",
    "ComparisonReport",
]
