"""Training-data preprocessing: variance filter, standardization, SMOTE.

The three steps run in exactly this order at fit time; the kept-feature
mask and the per-feature mean/std are frozen and reapplied to test rows.
SMOTE operates on the standardized matrix.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ModelError

logger = logging.getLogger(__name__)

VARIANCE_THRESHOLD = 1e-7
SMOTE_NEIGHBORS = 5


def variance_filter(X: np.ndarray, threshold: float = VARIANCE_THRESHOLD) -> np.ndarray:
    """Boolean mask of features whose std exceeds the threshold."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ModelError("variance_filter needs a non-empty 2-D matrix")
    mask = X.std(axis=0) > threshold
    if not mask.any():
        raise ModelError("variance filter removed every feature")
    return mask


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean unit-std columns (population std). Returns (Xs, mean, std)."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    if np.any(sigma <= 0):
        raise ModelError("zero-std feature reached standardize; filter first")
    return (X - mu) / sigma, mu, sigma


def apply_standardize(X: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - mu) / sigma


def smote(
    X: np.ndarray,
    y: np.ndarray,
    k: int = SMOTE_NEIGHBORS,
    seed: int | np.random.Generator = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Balance classes by synthesizing minority samples.

    Each synthetic point is x + u * (x_nn - x) with u ~ Uniform(0, 1) and
    x_nn one of the k nearest minority neighbours of x (Euclidean). Output
    is the input rows followed by the synthetic rows; class counts end up
    equal. Already-balanced input is returned unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = np.bincount(y, minlength=2)
    if len(np.unique(y)) != 2:
        raise ModelError("SMOTE needs exactly two classes")
    if counts[0] == counts[1]:
        return X.copy(), y.copy()
    minority = int(np.argmin(counts))
    n_needed = int(abs(counts[0] - counts[1]))
    idx_min = np.flatnonzero(y == minority)
    if idx_min.size < 2:
        raise ModelError(f"minority class has {idx_min.size} sample(s); SMOTE needs >= 2")
    k_eff = min(k, idx_min.size - 1)
    if k_eff < k:
        logger.warning("SMOTE neighbours reduced from %d to %d", k, k_eff)

    Xm = X[idx_min]
    d2 = ((Xm[:, None, :] - Xm[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    neighbours = np.argsort(d2, axis=1)[:, :k_eff]

    base = rng.integers(0, idx_min.size, size=n_needed)
    pick = rng.integers(0, k_eff, size=n_needed)
    u = rng.uniform(0.0, 1.0, size=n_needed)
    anchor = Xm[base]
    target = Xm[neighbours[base, pick]]
    synthetic = anchor + u[:, None] * (target - anchor)

    X_out = np.vstack([X, synthetic])
    y_out = np.concatenate([y, np.full(n_needed, minority, dtype=np.int64)])
    return X_out, y_out


def prepare_training(
    X: np.ndarray,
    y: np.ndarray,
    seed: int | np.random.Generator = 0,
    smote_k: int = SMOTE_NEIGHBORS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Run filter -> standardize -> SMOTE on a training set.

    Returns (X_train, y_train, mask, mu, sigma) where the statistics are
    computed on the filtered matrix before balancing.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite values in the feature matrix")
    if X.shape[0] != y.shape[0]:
        raise ModelError("feature rows and labels disagree in length")
    if len(np.unique(y)) < 2:
        raise ModelError("training labels contain a single class")
    mask = variance_filter(X)
    Xs, mu, sigma = standardize(X[:, mask])
    X_bal, y_bal = smote(Xs, y, k=smote_k, seed=seed)
    return X_bal, y_bal, mask, mu, sigma
