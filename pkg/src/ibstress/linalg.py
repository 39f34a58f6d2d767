"""Dense real-matrix primitives: decay exponentials, eigenvalue summaries, stability checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, DivergenceError


def as_square_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and return ``m`` as a square float array with finite entries."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class EigenSummary:
    """Eigenvalue statistics of a square matrix.

    ``mean_eigenvalue`` and ``eigenvalue_variance`` come from the trace
    identities trace(M)/N and trace(M @ M)/N - mean^2, which are exact and
    real.  For non-normal matrices with complex spectra the variance can be
    negative (the identity sums lambda_i^2, not |lambda_i|^2); that
    convention is used consistently throughout the package.
    """

    mean_eigenvalue: float
    eigenvalue_variance: float
    max_real_part: float


def expm(a, tau: float) -> np.ndarray:
    """Return the decay propagator exp(-a * tau).

    Backed by scipy's scaling-and-squaring Pade implementation; accuracy is
    gated in the test suite by the doubling identity
    expm(a, 2*tau) == expm(a, tau) @ expm(a, tau).
    """
    a = as_square_matrix(a)
    tau = float(tau)
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    with np.errstate(over="ignore", invalid="ignore"):
        out = scipy.linalg.expm((-tau) * a)
    if not np.isfinite(out).all():
        raise DivergenceError("matrix exponential overflowed the representable range")
    return out


def eigen_summary(m) -> EigenSummary:
    """Summarize the spectrum of ``m`` via trace identities plus an eigenvalue solve.

    The mean is the diagonal sum divided by N (fixed summation order), the
    variance is trace(M @ M)/N - mean^2.  ``max_real_part`` uses a full
    eigenvalue solve; if that fails to converge, the Gershgorin row bound
    max_i(M_ii + sum_{j != i} |M_ij|) is returned instead.
    """
    m = as_square_matrix(m)
    n = m.shape[0]
    mean = float(np.diagonal(m).sum()) / n
    variance = float(np.einsum("ij,ji->", m, m)) / n - mean * mean
    try:
        eig = np.linalg.eigvals(m)
        max_real = float(eig.real.max())
    except np.linalg.LinAlgError:
        rowsum = np.abs(m).sum(axis=1) - np.abs(np.diagonal(m))
        max_real = float((np.diagonal(m) + rowsum).max())
    return EigenSummary(mean, variance, max_real)


def is_stationary(a) -> bool:
    """True iff every eigenvalue of the drift matrix has positive real part.

    The recent-variation process relaxes under exp(-a * t); it is stationary
    exactly when -a is stable, i.e. min Re(lambda(a)) > 0.
    """
    a = as_square_matrix(a)
    return bool(np.linalg.eigvals(a).real.min() > 0.0)
