"""Sample covariance estimation and spectral normalization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError

POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000
_START_SEED = 20221017


@dataclass(frozen=True)
class CovarianceModel:
    matrix: np.ndarray
    mean: np.ndarray
    spectral_norm: float | None = None
    normalized: bool = False

    def __post_init__(self):
        for name in ("matrix", "mean"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise DataError(f"covariance must be square, got shape {self.matrix.shape}")
        if self.mean.shape != (self.matrix.shape[0],):
            raise DataError("mean vector length must match covariance dimension")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def sample_covariance(X: np.ndarray) -> CovarianceModel:
    """Covariance with the 1/n divisor of a data matrix (rows = subjects).

    Accepts either an ``(n, m)`` array or anything exposing ``.X`` (a Cohort).
    """
    X = np.asarray(getattr(X, "X", X), dtype=float)
    if X.ndim != 2:
        raise DataError(f"expected a 2-D data matrix, got shape {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise DataError(f"sample covariance needs n >= 2 subjects, got {n}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature value in covariance input")
    mean = X.mean(axis=0)
    D = X - mean
    C = (D.T @ D) / n
    # exact symmetry regardless of BLAS summation order
    C = 0.5 * (C + C.T)
    return CovarianceModel(C, mean)


def _gershgorin_shift(A: np.ndarray) -> float:
    radii = np.abs(A).sum(axis=1) - np.abs(np.diag(A))
    lower = float(np.min(np.diag(A) - radii))
    return max(0.0, -lower)


def largest_eigenvalue(A: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> float:
    """Algebraically largest eigenvalue of a symmetric matrix by shifted power iteration.

    The matrix is shifted by a Gershgorin lower bound so the iteration runs on a
    positive semidefinite matrix whose dominant eigenvalue is the top of the
    original spectrum.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DataError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-10 * scale):
        raise DataError("matrix is not symmetric")
    m = A.shape[0]
    shift = _gershgorin_shift(A)
    B = A + shift * np.eye(m)

    rng = np.random.default_rng(_START_SEED)
    v = rng.uniform(0.5, 1.5, size=m)
    v /= np.linalg.norm(v)
    restarted = False
    mu_prev = np.inf
    polish_left = None
    for _ in range(max_iter):
        w = B @ v
        w_norm = np.linalg.norm(w)
        if w_norm == 0.0:
            if not np.any(B):
                return -shift
            if restarted:
                raise NumericalError("power iteration stagnated twice")
            restarted = True
            v = rng.uniform(-1.0, 1.0, size=m)
            v /= np.linalg.norm(v)
            continue
        mu = float(v @ w)
        resid = np.linalg.norm(w - mu * v)
        v = w / w_norm
        change = abs(mu - mu_prev)
        mu_prev = mu
        if polish_left is not None:
            # converged already; iterate on until the quotient is fixed at rounding level
            polish_left -= 1
            if change <= 8 * np.finfo(float).eps * abs(mu) or polish_left == 0:
                return mu - shift
        elif change <= tol * abs(mu) and resid <= 1e-5 * abs(mu):
            polish_left = 64
    if polish_left is not None:
        return mu_prev - shift
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")


def normalize_spectral(cm: CovarianceModel) -> CovarianceModel:
    """Rescale so the largest eigenvalue is 1; the old top eigenvalue is kept as ``spectral_norm``."""
    if not np.any(cm.matrix):
        raise NumericalError("cannot normalize a zero covariance matrix")
    lam = largest_eigenvalue(cm.matrix)
    if not lam > 0:
        raise NumericalError(f"largest eigenvalue {lam} is not positive")
    scaled = cm.matrix / lam
    return CovarianceModel(0.5 * (scaled + scaled.T), cm.mean, lam, True)


def covariance_of(X: np.ndarray) -> CovarianceModel:
    """Normalized sample covariance, the form every VNN evaluation expects."""
    return normalize_spectral(sample_covariance(X))


def permute(cm: CovarianceModel, perm: np.ndarray) -> CovarianceModel:
    """P C P^T with the mean permuted consistently; ``perm[i]`` is the source index of new row i."""
    perm = np.asarray(perm)
    return CovarianceModel(cm.matrix[np.ix_(perm, perm)], cm.mean[perm], cm.spectral_norm, cm.normalized)


def save_matrix_csv(matrix: np.ndarray, path: str | Path) -> None:
    """Dense row-major CSV without a header."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix, dtype=float):
            writer.writerow([repr(float(v)) for v in row])


def load_matrix_csv(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])
