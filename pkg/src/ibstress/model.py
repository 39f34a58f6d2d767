"""Model parameters, interaction-matrix construction, and exposure scalings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError
from .linalg import as_square_matrix


@dataclass(frozen=True)
class ModelParams:
    """Scalar constants of the interbank dynamics.

    n_banks: network size N (>= 2)
    sigma:   per-bank volatility, units state/sqrt(time)
    beta:    inverse memory timescale of the recent-variation process, 1/time
    gamma:   interaction strength, dimensionless
    volvol:  volatility of volatility for the lognormal sigma(t) process, 1/sqrt(time)
    """

    n_banks: int
    sigma: float
    beta: float
    gamma: float
    volvol: float = 0.0

    def __post_init__(self):
        if self.n_banks < 2:
            raise ValueError(f"n_banks must be >= 2, got {self.n_banks}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.volvol < 0:
            raise ValueError(f"volvol must be >= 0, got {self.volvol}")
        for name in ("sigma", "beta", "gamma", "volvol"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class NonlinearSpec:
    """Bond-style exposure nonlinearity: column j of M is scaled by
    min(exp(-sensitivity * x_j), cap) at every step.

    ``maturity`` is the bond time-to-maturity the sensitivity was derived
    from; it is carried along for labeling only and does not enter the
    dynamics.
    """

    sensitivity: float
    cap: float = 1.0
    maturity: float = 0.1

    def __post_init__(self):
        if self.sensitivity < 0:
            raise ValueError(f"sensitivity must be >= 0, got {self.sensitivity}")
        if self.cap < 1:
            raise ValueError(f"cap must be >= 1, got {self.cap}")
        if not self.maturity > 0:
            raise ValueError(f"maturity must be > 0, got {self.maturity}")


class ConstraintKind(Enum):
    QUADRATIC_MEAN = "quadratic-mean"
    ABSOLUTE_MEAN = "absolute-mean"


@dataclass(frozen=True)
class CapitalConstraint:
    """Statistical cap on a bank's total exposure, with budget k independent of N."""

    budget: float
    kind: ConstraintKind

    def __post_init__(self):
        if not self.budget > 0:
            raise ValueError(f"budget must be > 0, got {self.budget}")


def build_drift_matrix(params: ModelParams, m) -> np.ndarray:
    """Drift matrix of the recent-variation dynamics: beta*I - sqrt(beta)*gamma*M."""
    m = as_square_matrix(m)
    if m.shape[0] != params.n_banks:
        raise DimensionError(
            f"matrix is {m.shape[0]}x{m.shape[0]} but n_banks={params.n_banks}"
        )
    return params.beta * np.eye(params.n_banks) - math.sqrt(params.beta) * params.gamma * m


def sample_gaussian_matrix(n: int, rng: np.random.Generator) -> np.ndarray:
    """n x n matrix of i.i.d. standard normal entries drawn from ``rng``."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    return rng.standard_normal((n, n))


def zero_diagonal(m) -> np.ndarray:
    """Copy of ``m`` with the self-interaction diagonal set to zero."""
    out = as_square_matrix(m).copy()
    np.fill_diagonal(out, 0.0)
    return out


def symmetrize(m) -> np.ndarray:
    """Element-wise symmetrization M + M^T (no factor 1/2)."""
    m = as_square_matrix(m)
    return m + m.T


def gamma_for_constraint(n: int, c: CapitalConstraint) -> float:
    """Interaction strength implied by a per-bank exposure budget.

    QUADRATIC_MEAN caps the expected squared row exposure at budget^2 and
    gives k/sqrt(N); ABSOLUTE_MEAN caps the expected absolute row exposure
    at budget and gives sqrt(pi/2)*k/N.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if c.kind is ConstraintKind.QUADRATIC_MEAN:
        return c.budget / math.sqrt(n)
    return math.sqrt(math.pi / 2.0) * c.budget / n


def nonlinear_factor(m, x, spec: NonlinearSpec) -> np.ndarray:
    """Apply the exposure nonlinearity to ``m`` for the current state ``x``.

    Column j is multiplied by min(exp(-k * x_j), cap); overflow of the
    exponential is harmless because any value above ``cap`` is clamped.
    Returns a new matrix; ``m`` is left unmodified.
    """
    m = as_square_matrix(m)
    x = np.asarray(x, dtype=float)
    if x.shape != (m.shape[1],):
        raise DimensionError(f"state has shape {x.shape}, expected ({m.shape[1]},)")
    with np.errstate(over="ignore"):
        factors = np.minimum(np.exp(-spec.sensitivity * x), spec.cap)
    return m * factors[np.newaxis, :]
