"""Pooled testing prevalence estimation with a complementary log-log model."""

from pooltest.diagnostics import (
    AnovaRow,
    PppPlotData,
    WaldTest,
    anova_nested,
    chi2_sf,
    diagnostic_table,
    fit_saturated,
    ppp_plot_data,
    sequential_anova,
    wald_test_lambda,
)
from pooltest.distribution import (
    INTERCEPT,
    ModelParams,
    Parameterization,
    PooledDataset,
    aggregate,
    cll,
    effective_size,
    icll,
    pool_probabilities,
    poolbin_log_mass,
    ppp,
    ppp_eta,
    sample,
)
from pooltest.errors import (
    ArgumentError,
    DomainError,
    PoolTestError,
    RankDeficientError,
    UnavailableError,
    UnidentifiableError,
)
from pooltest.estimation import (
    EXCESS_INTENSITY,
    BoundaryFlag,
    FitResult,
    coefficient_table,
    fit,
    fit_glm,
    predict_prevalence,
    standard_errors,
    theta_standard_error,
)
from pooltest.information import (
    DesignTable,
    InfoMatrix,
    fisher_information,
    ipuc,
    optimal_pool_size,
    prevalence_cutoffs,
    unit_information,
)
from pooltest.io import ModelSpec, load_csv, write_csv
from pooltest.likelihood import hessian, loglik, score
from pooltest.simulation import (
    PoolSizeLaw,
    SimConfig,
    coverage_study,
    information_study,
    lambda_null_calibration,
    simulate_dataset,
)

__all__ = [
    "aggregate",
    "anova_nested",
    "AnovaRow",
    "ArgumentError",
    "BoundaryFlag",
    "chi2_sf",
    "cll",
    "coefficient_table",
    "coverage_study",
    "DesignTable",
    "diagnostic_table",
    "DomainError",
    "effective_size",
    "EXCESS_INTENSITY",
    "fisher_information",
    "fit",
    "fit_glm",
    "fit_saturated",
    "FitResult",
    "hessian",
    "icll",
    "InfoMatrix",
    "information_study",
    "INTERCEPT",
    "ipuc",
    "lambda_null_calibration",
    "load_csv",
    "loglik",
    "ModelParams",
    "ModelSpec",
    "optimal_pool_size",
    "Parameterization",
    "pool_probabilities",
    "poolbin_log_mass",
    "PooledDataset",
    "PoolSizeLaw",
    "PoolTestError",
    "ppp",
    "ppp_eta",
    "ppp_plot_data",
    "PppPlotData",
    "predict_prevalence",
    "prevalence_cutoffs",
    "RankDeficientError",
    "sample",
    "score",
    "sequential_anova",
    "SimConfig",
    "simulate_dataset",
    "standard_errors",
    "theta_standard_error",
    "UnavailableError",
    "UnidentifiableError",
    "unit_information",
    "wald_test_lambda",
    "WaldTest",
    "write_csv",
]

__version__ = "0.1.0"
