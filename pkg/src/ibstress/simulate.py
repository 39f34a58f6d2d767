"""Stochastic integration of the coupled (x, h, sigma) system and Monte Carlo estimators.

Reproducibility contract
------------------------
Every trial owns a counter-based Philox stream keyed by (seed, trial index)
through ``numpy.random.SeedSequence`` spawn keys.  Within a trial the stream
is consumed in a fixed order: one (step, component) block of unit normals
for the state noise dW, then one (step,) block for the volatility noise dB.
Noise values therefore depend only on (seed, trial index, step, component),
never on batching or on the worker count; estimator aggregation walks trials
in index order, so results are bitwise reproducible for a fixed config.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, DivergenceError
from .linalg import as_square_matrix
from .model import ModelParams, NonlinearSpec, nonlinear_factor

# Spawn-key namespaces so trial streams, matrix streams and derived run
# seeds can never collide for the same root seed.
_TRIAL_SPACE = 0
_MATRIX_SPACE = 1
_RUN_SPACE = 2

# A run aborts when more than this fraction of trials produces non-finite
# endpoints; silent NaN contamination would invalidate the estimate.
MAX_DIVERGED_FRACTION = 0.01

_STEPS_PER_HORIZON = 500
_MAX_BETA_DT = 0.05
_BATCH_SCALE = 4_000_000  # noise doubles per batch; keep blocks ~tens of MB


def trial_generator(seed: int, trial_index: int) -> np.random.Generator:
    """Philox stream for one Monte Carlo trial."""
    ss = np.random.SeedSequence(seed, spawn_key=(_TRIAL_SPACE, trial_index))
    return np.random.Generator(np.random.Philox(ss))


def matrix_generator(seed: int, matrix_index: int) -> np.random.Generator:
    """Philox stream for sampling one interaction matrix of an ensemble."""
    ss = np.random.SeedSequence(seed, spawn_key=(_MATRIX_SPACE, matrix_index))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """A 64-bit child seed for a named sub-experiment of ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=(_RUN_SPACE, *path))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SimConfig:
    """Discretization, horizon, trial count, and scheme flags for one run.

    ``dt=None`` selects the default step min(horizon/500, 0.05/beta), which
    resolves both the reporting horizon and the recent-variation memory.
    """

    horizon: float
    n_trials: int
    seed: int
    dt: float | None = None
    use_stochastic_vol: bool = False
    nonlinear: NonlinearSpec | None = None
    antithetic: bool = False

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if self.dt is not None:
            if not self.dt > 0:
                raise ValueError(f"dt must be > 0, got {self.dt}")
            if self.dt > self.horizon:
                raise ValueError(f"dt={self.dt} exceeds horizon={self.horizon}")
        if self.n_trials < 2:
            raise ValueError(f"n_trials must be >= 2, got {self.n_trials}")
        if self.antithetic and self.n_trials % 2:
            raise ValueError("antithetic runs need an even n_trials")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def default_dt(horizon: float, beta: float) -> float:
    return min(horizon / _STEPS_PER_HORIZON, _MAX_BETA_DT / beta)


def resolve_steps(cfg: SimConfig, params: ModelParams) -> tuple[int, float]:
    """Number of steps and the effective step size covering the horizon exactly."""
    dt = cfg.dt if cfg.dt is not None else default_dt(cfg.horizon, params.beta)
    if dt * params.beta > _MAX_BETA_DT * (1 + 1e-12):
        raise ValueError(
            f"dt={dt} does not resolve the memory timescale: dt*beta must be <= {_MAX_BETA_DT}"
        )
    n_steps = max(1, int(round(cfg.horizon / dt)))
    return n_steps, cfg.horizon / n_steps


@dataclass
class StateVector:
    """Joint state of one trial: bank states, recent variations, current volatility."""

    x: np.ndarray
    h: np.ndarray
    sigma_t: float
    time: float


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    std_error: float
    n_trials: int
    n_diverged: int


class Observable(Enum):
    STRESS = "stress"
    MARKET_SQ = "market-sq"


def stress(x) -> float:
    """Cross-sectional stress: Bessel-corrected sample variance of the bank states."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise DimensionError("stress needs a vector of at least 2 bank states")
    return float(x.var(ddof=1))


def market_level_sq(x) -> float:
    """Squared market level (cross-sectional mean), the single-path integrand of z(t)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise DimensionError("market_level_sq needs a vector of at least 2 bank states")
    return float(x.mean() ** 2)


def euler_step(
    state: StateVector,
    dW,
    dB: float,
    params: ModelParams,
    m,
    cfg: SimConfig,
) -> StateVector:
    """One explicit Euler-Maruyama step of the joint system.

    ``dW`` must be N independent Normal(0, dt) increments and ``dB`` a
    Normal(0, dt) increment independent of dW.  The state increment is
    dx = sigma(t)*dW + gamma*M_eff@h*dt with M_eff the nonlinearly scaled
    matrix when configured, and dh = -beta*h*dt + sqrt(beta)*dx with the
    substituted dx; both use the pre-step h.  The volatility is advanced by
    its exact lognormal step when stochastic volatility is enabled.
    """
    m = as_square_matrix(m)
    dW = np.asarray(dW, dtype=float)
    if dW.shape != state.x.shape or m.shape[0] != state.x.shape[0]:
        raise DimensionError("state, noise, and matrix dimensions disagree")
    dt = cfg.dt if cfg.dt is not None else default_dt(cfg.horizon, params.beta)
    m_eff = nonlinear_factor(m, state.x, cfg.nonlinear) if cfg.nonlinear is not None else m
    dx = state.sigma_t * dW + params.gamma * (m_eff @ state.h) * dt
    h = state.h + (-params.beta * state.h * dt + math.sqrt(params.beta) * dx)
    if cfg.use_stochastic_vol and params.volvol > 0:
        nu = params.volvol
        sigma_next = state.sigma_t * math.exp(nu * dB - 0.5 * nu * nu * dt)
    else:
        sigma_next = state.sigma_t
    return StateVector(state.x + dx, h, sigma_next, state.time + dt)


# ---------------------------------------------------------------------------
# batched engine


def _trial_noise(seed, trials, n_steps, n, antithetic, with_db):
    """Unit-normal noise blocks for the given trial indices.

    With antithetic pairing, trials 2k and 2k+1 share stream k with the odd
    member's noise negated (negation is exact, so pairs are exact mirrors).
    """
    dW = np.empty((len(trials), n_steps, n))
    dB = np.empty((len(trials), n_steps)) if with_db else None
    for row, trial in enumerate(trials):
        stream = trial // 2 if antithetic else trial
        sign = -1.0 if (antithetic and trial % 2) else 1.0
        g = trial_generator(seed, stream)
        dW[row] = g.standard_normal((n_steps, n))
        if with_db:
            dB[row] = g.standard_normal(n_steps)
        if sign < 0:
            dW[row] *= sign
            if with_db:
                dB[row] *= sign
    return dW, dB


def _integrate(dW, dB, m, n_steps, dt, sigma0, beta, gamma, volvol, nonlinear):
    """Integrate a batch of trials from the zero state to the horizon.

    ``dW``/``dB`` are raw unit normals; the sqrt(dt) scaling happens here.
    Returns endpoint arrays (x, h, sigma_t) of shapes (B, N), (B, N), (B,).
    """
    n_batch, _, n = dW.shape
    x = np.zeros((n_batch, n))
    h = np.zeros((n_batch, n))
    sig = np.full(n_batch, float(sigma0))
    mt = np.ascontiguousarray(m.T)
    sqdt = math.sqrt(dt)
    sqb = math.sqrt(beta)
    gdt = gamma * dt
    bdt = beta * dt
    use_vol = volvol > 0 and dB is not None
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for s in range(n_steps):
            if nonlinear is None:
                coupling = h @ mt
            else:
                factors = np.minimum(np.exp(-nonlinear.sensitivity * x), nonlinear.cap)
                coupling = (h * factors) @ mt
            if use_vol:
                dx = sig[:, np.newaxis] * (sqdt * dW[:, s]) + gdt * coupling
            else:
                dx = (sigma0 * sqdt) * dW[:, s] + gdt * coupling
            h += sqb * dx - bdt * h
            x += dx
            if use_vol:
                sig *= np.exp(volvol * sqdt * dB[:, s] - 0.5 * volvol * volvol * dt)
    return x, h, sig


def _batch_size(n_steps: int, n: int) -> int:
    """Trials per noise block; depends only on the config, never on threads."""
    return max(1, min(256, _BATCH_SCALE // max(1, n_steps * n)))


def _batch_ranges(n_trials: int, batch: int):
    return [(lo, min(lo + batch, n_trials)) for lo in range(0, n_trials, batch)]


def _map_tasks(fn, tasks: list[tuple], threads: int) -> list:
    """Run ``fn(*task)`` for every task, in task order.

    The integration loop is Python-step-heavy, so worker parallelism uses
    processes, not threads.  Every task's arithmetic is identical either way,
    and results are collected in submission order, so the outcome does not
    depend on the worker count.
    """
    if threads <= 1 or len(tasks) <= 1:
        return [fn(*task) for task in tasks]
    with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
        futures = [pool.submit(fn, *task) for task in tasks]
        return [future.result() for future in futures]


def _endpoints_task(params, m, cfg, lo, hi, n_steps, dt, with_db):
    dW, dB = _trial_noise(cfg.seed, range(lo, hi), n_steps, params.n_banks,
                          cfg.antithetic, with_db)
    return _integrate(
        dW, dB, m, n_steps, dt, params.sigma, params.beta, params.gamma,
        params.volvol if with_db else 0.0, cfg.nonlinear,
    )


def simulate_endpoints(
    params: ModelParams, m, cfg: SimConfig, threads: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Endpoint states for all trials, in trial order.

    Returns (x, h, sigma_t, diverged): arrays of shapes (n_trials, N),
    (n_trials, N), (n_trials,), and a boolean mask of trials whose endpoint
    contains non-finite values.
    """
    m = as_square_matrix(m)
    if m.shape[0] != params.n_banks:
        raise DimensionError(
            f"matrix is {m.shape[0]}x{m.shape[0]} but n_banks={params.n_banks}"
        )
    n_steps, dt = resolve_steps(cfg, params)
    with_db = cfg.use_stochastic_vol and params.volvol > 0
    ranges = _batch_ranges(cfg.n_trials, _batch_size(n_steps, params.n_banks))
    results = _map_tasks(
        _endpoints_task,
        [(params, m, cfg, lo, hi, n_steps, dt, with_db) for lo, hi in ranges],
        threads,
    )
    x = np.concatenate([r[0] for r in results])
    h = np.concatenate([r[1] for r in results])
    sig = np.concatenate([r[2] for r in results])
    diverged = ~(
        np.isfinite(x).all(axis=1) & np.isfinite(h).all(axis=1) & np.isfinite(sig)
    )
    return x, h, sig, diverged


def simulate_path(params: ModelParams, m, cfg: SimConfig, trial_index: int) -> StateVector:
    """Endpoint state of a single trial, using that trial's own noise stream."""
    if not 0 <= trial_index < cfg.n_trials:
        raise ValueError(f"trial_index {trial_index} outside [0, {cfg.n_trials})")
    m = as_square_matrix(m)
    n_steps, dt = resolve_steps(cfg, params)
    with_db = cfg.use_stochastic_vol and params.volvol > 0
    dW, dB = _trial_noise(
        cfg.seed, [trial_index], n_steps, params.n_banks, cfg.antithetic, with_db
    )
    x, h, sig = _integrate(
        dW, dB, m, n_steps, dt, params.sigma, params.beta, params.gamma,
        params.volvol if with_db else 0.0, cfg.nonlinear,
    )
    return StateVector(x[0], h[0], float(sig[0]), cfg.horizon)


def _aggregate(values: np.ndarray, diverged: np.ndarray, cfg: SimConfig) -> MonteCarloEstimate:
    """Mean and standard error over valid trials, in trial order.

    Antithetic runs are aggregated over pair means, because pair members are
    anticorrelated by construction and must not be counted as independent.
    A pair with either member diverged is dropped entirely.
    """
    n_trials = cfg.n_trials
    n_diverged = int(diverged.sum())
    if n_diverged == n_trials:
        raise DivergenceError("all trials diverged; no estimate possible")
    if n_diverged > MAX_DIVERGED_FRACTION * n_trials:
        raise DivergenceError(
            f"{n_diverged} of {n_trials} trials diverged "
            f"(> {MAX_DIVERGED_FRACTION:.0%}); aborting estimate"
        )
    if cfg.antithetic:
        keep = ~(diverged[0::2] | diverged[1::2])
        samples = 0.5 * (values[0::2] + values[1::2])[keep]
    else:
        samples = values[~diverged]
    mean = float(samples.mean())
    std_error = (
        float(samples.std(ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else 0.0
    )
    return MonteCarloEstimate(mean, std_error, n_trials, n_diverged)


def _observable_values(x: np.ndarray, observable: Observable) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        if observable is Observable.STRESS:
            return x.var(axis=1, ddof=1)
        if observable is Observable.MARKET_SQ:
            return x.mean(axis=1) ** 2
    raise ValueError(f"unknown observable {observable!r}")


def estimate_observable(
    params: ModelParams,
    m,
    cfg: SimConfig,
    observable: Observable = Observable.STRESS,
    threads: int = 1,
) -> MonteCarloEstimate:
    """Monte Carlo estimate of an endpoint observable over cfg.n_trials paths."""
    x, _, _, diverged = simulate_endpoints(params, m, cfg, threads=threads)
    values = _observable_values(x, observable)
    # endpoints can be finite yet large enough to overflow the observable
    diverged = diverged | ~np.isfinite(values)
    return _aggregate(values, diverged, cfg)


def _paired_task(params, m, cfg, lo, hi, n_steps, dt):
    dW, dB = _trial_noise(cfg.seed, range(lo, hi), n_steps, params.n_banks,
                          cfg.antithetic, True)
    common = (m, n_steps, dt, params.sigma, params.beta, params.gamma)
    x_vol, _, _ = _integrate(dW, dB, *common, params.volvol, cfg.nonlinear)
    x_flat, _, _ = _integrate(dW, dB, *common, 0.0, cfg.nonlinear)
    with np.errstate(over="ignore", invalid="ignore"):
        return x_vol.var(axis=1, ddof=1) - x_flat.var(axis=1, ddof=1)


def paired_stochvol_delta(
    params: ModelParams, m, cfg: SimConfig, threads: int = 1
) -> MonteCarloEstimate:
    """Mean stress difference between the stochastic-vol path and the
    constant-vol path driven by the identical dW stream (common random
    numbers).  With volvol=0 the two legs are the same computation and the
    estimate is exactly zero.
    """
    m = as_square_matrix(m)
    if m.shape[0] != params.n_banks:
        raise DimensionError(
            f"matrix is {m.shape[0]}x{m.shape[0]} but n_banks={params.n_banks}"
        )
    n_steps, dt = resolve_steps(cfg, params)
    ranges = _batch_ranges(cfg.n_trials, _batch_size(n_steps, params.n_banks))
    results = _map_tasks(
        _paired_task,
        [(params, m, cfg, lo, hi, n_steps, dt) for lo, hi in ranges],
        threads,
    )
    deltas = np.concatenate(results)
    return _aggregate(deltas, ~np.isfinite(deltas), cfg)
