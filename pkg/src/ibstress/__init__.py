"""Simulation and analytics toolkit for a minimal stochastic model of stress
propagation on an interbank network.

The package simulates the coupled bank-state / recent-variation dynamics,
measures the cross-sectional stress observable, and checks the closed-form
short-time expansions (interaction correction, random-matrix expectation,
ensemble variance law, stochastic-volatility correction) by Monte Carlo and
numerical quadrature.
"""

__version__ = "0.1.0"

from .analytic import (
    CorrelationMatrices,
    ExpansionBreakdown,
    correction_variance,
    correlation_quadrature,
    expansion_correlations,
    market_uncertainty,
    random_matrix_stress,
    sign_opposition_check,
    stochvol_correction,
    stress_expectation,
    stress_from_correlations,
)
from .errors import DimensionError, DivergenceError, ToleranceError
from .experiments import (
    SweepResult,
    fig2_gamma_sweep,
    fig3_nonlinearity_sweep,
    figA1_eigen_correlation,
    variance_law_check,
)
from .linalg import EigenSummary, eigen_summary, expm, is_stationary
from .model import (
    CapitalConstraint,
    ConstraintKind,
    ModelParams,
    NonlinearSpec,
    build_drift_matrix,
    gamma_for_constraint,
    nonlinear_factor,
    sample_gaussian_matrix,
    symmetrize,
    zero_diagonal,
)
from .simulate import (
    MonteCarloEstimate,
    Observable,
    SimConfig,
    StateVector,
    default_dt,
    derive_seed,
    estimate_observable,
    euler_step,
    market_level_sq,
    matrix_generator,
    paired_stochvol_delta,
    simulate_endpoints,
    simulate_path,
    stress,
    trial_generator,
)

__all__ = [
    "CapitalConstraint",
    "ConstraintKind",
    "CorrelationMatrices",
    "DimensionError",
    "DivergenceError",
    "EigenSummary",
    "ExpansionBreakdown",
    "ModelParams",
    "MonteCarloEstimate",
    "NonlinearSpec",
    "Observable",
    "SimConfig",
    "StateVector",
    "SweepResult",
    "ToleranceError",
    "build_drift_matrix",
    "correction_variance",
    "correlation_quadrature",
    "default_dt",
    "derive_seed",
    "eigen_summary",
    "estimate_observable",
    "euler_step",
    "expansion_correlations",
    "expm",
    "fig2_gamma_sweep",
    "fig3_nonlinearity_sweep",
    "figA1_eigen_correlation",
    "gamma_for_constraint",
    "is_stationary",
    "market_level_sq",
    "market_uncertainty",
    "matrix_generator",
    "nonlinear_factor",
    "paired_stochvol_delta",
    "random_matrix_stress",
    "sample_gaussian_matrix",
    "sign_opposition_check",
    "simulate_endpoints",
    "simulate_path",
    "stochvol_correction",
    "stress",
    "stress_expectation",
    "stress_from_correlations",
    "symmetrize",
    "trial_generator",
    "variance_law_check",
    "zero_diagonal",
]
