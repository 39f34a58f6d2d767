"""Desk-scale experiment sweeps: interaction-correction scaling, exposure
nonlinearities, eigenvalue correlations, and the ensemble variance law."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace, field

import numpy as np

from .analytic import (
    _contractions,
    correction_variance,
    random_matrix_stress,
    stress_expectation,
)
from .errors import DivergenceError
from .linalg import eigen_summary
from .model import ModelParams, NonlinearSpec, sample_gaussian_matrix
from .simulate import (
    MAX_DIVERGED_FRACTION,
    Observable,
    SimConfig,
    _integrate,
    _map_tasks,
    _trial_noise,
    derive_seed,
    estimate_observable,
    matrix_generator,
    resolve_steps,
)


@dataclass
class SweepResult:
    """One sweep: per-axis-point Monte Carlo and theory columns plus run metadata.

    Theory columns are pure closed-form outputs; Monte Carlo columns never
    feed into them.  Every list has one entry per axis point.
    """

    axis: list[float]
    mc_mean: list[float]
    mc_stderr: list[float]
    theory: list[float]
    n_diverged: list[int]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {
            len(self.axis), len(self.mc_mean), len(self.mc_stderr),
            len(self.theory), len(self.n_diverged),
        }
        if len(lengths) != 1:
            raise ValueError("all sweep columns must have the same length")
        if any(se < 0 for se in self.mc_stderr if not math.isnan(se)):
            raise ValueError("standard errors must be >= 0")


def _sim_metadata(params: ModelParams, cfg: SimConfig) -> dict:
    n_steps, dt = resolve_steps(cfg, params)
    meta = {
        "n_banks": params.n_banks,
        "sigma": params.sigma,
        "beta": params.beta,
        "gamma": params.gamma,
        "volvol": params.volvol,
        "horizon": cfg.horizon,
        "dt": dt,
        "n_steps": n_steps,
        "n_trials": cfg.n_trials,
        "seed": cfg.seed,
        "use_stochastic_vol": cfg.use_stochastic_vol,
        "antithetic": cfg.antithetic,
    }
    if cfg.nonlinear is not None:
        meta["nonlinear"] = {
            "sensitivity": cfg.nonlinear.sensitivity,
            "cap": cfg.nonlinear.cap,
            "maturity": cfg.nonlinear.maturity,
        }
    return meta


def _fig2_matrix_task(params_base, gammas, cfg, k, n_steps, dt):
    """Corrections for one sampled matrix at every gamma, reusing its noise block."""
    n = params_base.n_banks
    m = sample_gaussian_matrix(n, matrix_generator(cfg.seed, k))
    dW, _ = _trial_noise(
        derive_seed(cfg.seed, k), range(cfg.n_trials), n_steps, n,
        cfg.antithetic, False,
    )
    x_free = params_base.sigma * math.sqrt(dt) * dW.sum(axis=1)
    y_free = x_free.var(axis=1, ddof=1)
    corrections = np.empty(len(gammas))
    diverged = np.empty(len(gammas), dtype=int)
    for gi, gamma in enumerate(gammas):
        x, _, _ = _integrate(
            dW, None, m, n_steps, dt, params_base.sigma, params_base.beta,
            gamma, 0.0, cfg.nonlinear,
        )
        with np.errstate(over="ignore", invalid="ignore"):
            values = x.var(axis=1, ddof=1) - y_free
        bad = ~np.isfinite(values)
        diverged[gi] = int(bad.sum())
        corrections[gi] = values[~bad].mean() if (~bad).any() else np.nan
    return corrections, diverged


def fig2_gamma_sweep(
    params_base: ModelParams,
    gammas: list[float],
    t: float,
    cfg: SimConfig,
    n_matrices: int,
    threads: int = 1,
) -> SweepResult:
    """Interaction correction versus interaction strength over a Gaussian
    matrix ensemble, against the closed-form cubic term.

    The correction at each gamma is estimated as the common-random-numbers
    difference mean[y(gamma) - y(0)] per (matrix, trial); the gamma=0 leg is
    an exact Brownian endpoint with expectation sigma^2*t, so the estimator
    is unbiased for mean[y(gamma)] - sigma^2*t with far smaller variance.
    The same matrices and trial noise are reused across gamma points.
    """
    if not gammas:
        raise ValueError("gammas must be non-empty")
    if n_matrices < 2:
        raise ValueError("n_matrices must be >= 2")
    cfg = replace(cfg, horizon=t)
    n_steps, dt = resolve_steps(cfg, params_base)
    results = _map_tasks(
        _fig2_matrix_task,
        [(params_base, tuple(gammas), cfg, k, n_steps, dt) for k in range(n_matrices)],
        threads,
    )
    corrections = np.stack([r[0] for r in results], axis=1)
    diverged = np.stack([r[1] for r in results], axis=1)

    mc_mean, mc_stderr, theory, n_div = [], [], [], []
    for gi, gamma in enumerate(gammas):
        total_bad = int(diverged[gi].sum())
        if total_bad > MAX_DIVERGED_FRACTION * n_matrices * cfg.n_trials:
            raise DivergenceError(
                f"gamma={gamma}: {total_bad} of {n_matrices * cfg.n_trials} trials diverged"
            )
        vals = corrections[gi][np.isfinite(corrections[gi])]
        mc_mean.append(float(vals.mean()))
        mc_stderr.append(float(vals.std(ddof=1) / math.sqrt(vals.size)))
        theory.append(random_matrix_stress(replace(params_base, gamma=gamma), t)
                      - params_base.sigma**2 * t)
        n_div.append(total_bad)

    meta = _sim_metadata(replace(params_base, gamma=0.0), cfg)
    del meta["gamma"]
    meta.update({"experiment": "fig2", "gammas": list(map(float, gammas)),
                 "t": t, "n_matrices": n_matrices})
    return SweepResult(list(map(float, gammas)), mc_mean, mc_stderr, theory, n_div, meta)


def fig3_nonlinearity_sweep(
    params_base: ModelParams,
    specs: list[NonlinearSpec],
    cfg: SimConfig,
    matrix: np.ndarray | None = None,
    threads: int = 1,
) -> SweepResult:
    """Interaction correction for each exposure nonlinearity versus the linear
    baseline, under common random numbers (identical trial streams per cell).

    Runs on a single interaction matrix: the one supplied, or a Gaussian
    matrix sampled from the config seed.  The first row is the linear
    baseline; the theory column repeats the linear closed-form correction.
    """
    if not specs:
        raise ValueError("specs must be non-empty")
    sampled = matrix is None
    if sampled:
        matrix = sample_gaussian_matrix(params_base.n_banks, matrix_generator(cfg.seed, 0))
    t = cfg.horizon
    base_correction = params_base.sigma**2 * t
    linear_theory = stress_expectation(params_base, matrix, t).total - base_correction

    cells: list[NonlinearSpec | None] = [None, *specs]
    axis, mc_mean, mc_stderr, n_div = [], [], [], []
    for spec in cells:
        est = estimate_observable(
            params_base, matrix, replace(cfg, nonlinear=spec),
            Observable.STRESS, threads=threads,
        )
        axis.append(0.0 if spec is None else spec.sensitivity)
        mc_mean.append(est.mean - base_correction)
        mc_stderr.append(est.std_error)
        n_div.append(est.n_diverged)

    meta = _sim_metadata(params_base, cfg)
    meta.update({
        "experiment": "fig3",
        "cells": [
            {"sensitivity": 0.0, "cap": 1.0, "label": "linear"},
            *({"sensitivity": s.sensitivity, "cap": s.cap, "maturity": s.maturity}
              for s in specs),
        ],
        "matrix_sampled": sampled,
    })
    return SweepResult(axis, mc_mean, mc_stderr, [linear_theory] * len(cells), n_div, meta)


def figA1_eigen_correlation(n: int, n_matrices: int, cfg: SimConfig) -> SweepResult:
    """Pearson correlation of the eigenvalue mean/variance with the first and
    second interaction contractions, over a Gaussian matrix ensemble.

    Rows: axis=1 pairs the mean eigenvalue with the first-order contraction
    (analytic correlation sqrt((N-1)/N)); axis=2 pairs the trace-identity
    eigenvalue variance with the second-order contraction (no closed form).
    The paired per-matrix lists are carried in the metadata for plotting.
    """
    if n_matrices < 100:
        raise ValueError("n_matrices must be >= 100 for a stable correlation estimate")
    lam_mean = np.empty(n_matrices)
    lam_var = np.empty(n_matrices)
    first = np.empty(n_matrices)
    second = np.empty(n_matrices)
    for k in range(n_matrices):
        m = sample_gaussian_matrix(n, matrix_generator(cfg.seed, k))
        summary = eigen_summary(m)
        lam_mean[k] = summary.mean_eigenvalue
        lam_var[k] = summary.eigenvalue_variance
        first[k], second[k] = _contractions(m)
    r1 = float(np.corrcoef(lam_mean, first)[0, 1])
    r2 = float(np.corrcoef(lam_var, second)[0, 1])
    se = lambda r: (1.0 - r * r) / math.sqrt(max(n_matrices - 3, 1))
    meta = {
        "experiment": "figA1",
        "n_banks": n,
        "n_matrices": n_matrices,
        "seed": cfg.seed,
        "lambda_mean": lam_mean.tolist(),
        "lambda_variance": lam_var.tolist(),
        "term_gamma": first.tolist(),
        "term_gamma2": second.tolist(),
    }
    return SweepResult(
        axis=[1.0, 2.0],
        mc_mean=[r1, r2],
        mc_stderr=[se(r1), se(r2)],
        theory=[math.sqrt((n - 1) / n), math.nan],
        n_diverged=[0, 0],
        metadata=meta,
    )


def variance_law_check(
    params: ModelParams,
    t: float,
    n_matrices: int,
    cfg: SimConfig,
    mc_route: bool = False,
    threads: int = 1,
) -> SweepResult:
    """Sample variance of the expected stress across the matrix ensemble
    against the closed-form t^4 law, in the leading-order regime beta*t <= 0.01.

    The fast route evaluates the closed-form stress expectation per matrix;
    the optional slow route re-estimates it by simulation (the mean squared
    Monte Carlo standard error is subtracted to de-bias the across-matrix
    variance).  One row per route.
    """
    if params.beta * t > 0.01 + 1e-12:
        raise ValueError("variance law requires the leading-order regime beta*t <= 0.01")
    if n_matrices < 2:
        raise ValueError("n_matrices must be >= 2")
    matrices = [
        sample_gaussian_matrix(params.n_banks, matrix_generator(cfg.seed, k))
        for k in range(n_matrices)
    ]
    theory = correction_variance(params, t)

    def variance_row(values: np.ndarray, extra_var: float = 0.0) -> tuple[float, float]:
        sample_var = float(values.var(ddof=1)) - extra_var
        stderr = abs(sample_var) * math.sqrt(2.0 / (n_matrices - 1))
        return sample_var, stderr

    analytic_vals = np.array([stress_expectation(params, m, t).total for m in matrices])
    rows = [("analytic", *variance_row(analytic_vals), 0)]

    if mc_route:
        cfg_run = replace(cfg, horizon=t)
        means = np.empty(n_matrices)
        errs = np.empty(n_matrices)
        divs = 0
        for k, m in enumerate(matrices):
            est = estimate_observable(
                params, m, replace(cfg_run, seed=derive_seed(cfg.seed, k)),
                Observable.STRESS, threads=threads,
            )
            means[k], errs[k] = est.mean, est.std_error
            divs += est.n_diverged
        rows.append(("monte-carlo", *variance_row(means, float(np.mean(errs**2))), divs))

    meta = _sim_metadata(params, replace(cfg, horizon=t))
    meta.update({
        "experiment": "variance-check",
        "t": t,
        "n_matrices": n_matrices,
        "routes": [r[0] for r in rows],
    })
    return SweepResult(
        axis=[t] * len(rows),
        mc_mean=[r[1] for r in rows],
        mc_stderr=[r[2] for r in rows],
        theory=[theory] * len(rows),
        n_diverged=[r[3] for r in rows],
        metadata=meta,
    )
