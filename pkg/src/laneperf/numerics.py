from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg
from sklearn.linear_model import LinearRegression

from .errors import CalibrationError, DataError, DimensionError, NumericalError
from .log import get_logger

logger = get_logger(__name__)

SYMMETRY_TOL = 1e-9
NEG_EIG_TOL = 1e-8
SHRINKAGE = 1e-6
DEGENERATE_VAR = 1e-12


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


class LinearFit(NamedTuple):
    slope: float
    intercept: float

    def predict(self, x: float) -> float:
        return self.slope * x + self.intercept


def gaussian_stats(features: Sequence[Sequence[float]] | np.ndarray, ddof: int = 0) -> GaussianStats:
    """Mean and covariance (1/(n - ddof) normalization) of row vectors."""
    try:
        X = np.asarray(features, dtype=np.float64)
    except ValueError as e:
        raise DimensionError("ragged feature vectors") from e
    if X.ndim != 2:
        if X.ndim == 1 and X.size == 0:
            raise DataError("no feature vectors")
        raise DimensionError(f"expected a 2-D feature array, got shape {X.shape}")
    n = X.shape[0]
    if n == 0:
        raise DataError("no feature vectors")
    mu = X.mean(axis=0)
    centered = X - mu
    S = centered.T @ centered / max(n - ddof, 1)
    return GaussianStats(mu=mu, sigma=(S + S.T) / 2.0, n=n)


def _check_symmetric(m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NumericalError(f"expected a square matrix, got shape {m.shape}")
    scale = 1.0 + float(np.max(np.abs(m))) if m.size else 1.0
    if m.size and float(np.max(np.abs(m - m.T))) > SYMMETRY_TOL * scale:
        raise NumericalError("matrix is not symmetric")


def sym_sqrt(m: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix; negative eigenvalues clamp to 0."""
    m = np.asarray(m, dtype=np.float64)
    _check_symmetric(m)
    m = (m + m.T) / 2.0
    try:
        w, V = linalg.eigh(m)
    except linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition did not converge: {e}") from e
    if w.size and w.min() < -NEG_EIG_TOL * (1.0 + float(np.abs(w).max())):
        logger.warning("clamping eigenvalue %.3g of a matrix expected to be PSD", w.min())
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return (root + root.T) / 2.0


def _rank_deficient(sigma: np.ndarray) -> bool:
    w = linalg.eigvalsh(sigma)
    return bool(w.min() <= 1e-10 * max(1.0, float(np.abs(w).max())))


def frechet_distance(a: GaussianStats, b: GaussianStats, shrink: Optional[bool] = None) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(Sa) + Tr(Sb) - 2 Tr((Sa^1/2 Sb Sa^1/2)^1/2), clamped at 0.
    When either covariance is rank deficient (or shrink=True) both receive the same
    ridge eps*I, eps = 1e-6 * mean diagonal, before anything is computed.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    sa, sb = a.sigma, b.sigma
    if shrink is None:
        shrink = _rank_deficient(sa) or _rank_deficient(sb)
    if shrink:
        diag_mean = float(np.mean(np.concatenate([np.diag(sa), np.diag(sb)])))
        eps = SHRINKAGE * (diag_mean if diag_mean > 0 else 1.0)
        eye = np.eye(sa.shape[0])
        sa, sb = sa + eps * eye, sb + eps * eye

    diff = a.mu - b.mu
    root_a = sym_sqrt(sa)
    inner = root_a @ sb @ root_a
    tr_covmean = float(np.trace(sym_sqrt((inner + inner.T) / 2.0)))
    dist = float(diff @ diff) + float(np.trace(sa)) + float(np.trace(sb)) - 2.0 * tr_covmean
    return max(dist, 0.0)


def fit_linear_regression(xs: Sequence[float], ys: Sequence[float]) -> LinearFit:
    """Least-squares line; a (near) constant x collapses to the mean of y."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape:
        raise CalibrationError(f"regression needs equal lengths, got {x.size} and {y.size}")
    if x.size < 2:
        raise CalibrationError("regression needs at least 2 points")
    if float(np.var(x)) < DEGENERATE_VAR:
        return LinearFit(0.0, float(y.mean()))
    reg = LinearRegression().fit(x.reshape(-1, 1), y)
    return LinearFit(float(reg.coef_[0]), float(reg.intercept_))
