"""SMOTE oversampling for latent vectors."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_X_y


@dataclass(frozen=True)
class SmoteConfig:
    """Oversampling settings; the balance target is always the largest class."""

    k_neighbors: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


def nearest_neighbors(X: np.ndarray, k: int) -> np.ndarray:
    """Indices of each row's ``k`` nearest other rows (Euclidean), nearest
    first; equal distances resolve to the lower index."""
    sq = np.einsum("ij,ij->i", X, X)
    d = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def smote_balance(X, y, k_neighbors: int = 5, seed=0, classes=None):
    """Oversample every class up to the largest class count.

    Returns ``(X_out, y_out, synthetic_mask)``.  Original rows come first,
    unchanged and in order; each synthetic row is ``x + d * (x' - x)`` with
    ``x`` a random member of its class, ``x'`` one of the ``k_neighbors``
    nearest same-class members and ``d ~ U[0, 1]``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    classes = np.unique(y) if classes is None else np.asarray(classes)
    counts = {c: int(np.sum(y == c)) for c in classes.tolist()}
    empty = [c for c, n in counts.items() if n == 0]
    if empty:
        raise ValueError(f"class(es) {empty} have no samples to oversample from")
    target = max(counts.values())
    rng = np.random.default_rng(seed)
    new_X, new_y = [], []
    for c in classes.tolist():
        need = target - counts[c]
        if need == 0:
            continue
        members = X[y == c]
        m = len(members)
        if m == 1:
            warnings.warn(f"class {c} has a single sample; duplicating it", RuntimeWarning, stacklevel=2)
            new_X.append(np.repeat(members, need, axis=0))
            new_y.append(np.full(need, c, dtype=y.dtype))
            continue
        k = min(k_neighbors, m - 1)
        nbrs = nearest_neighbors(members, k)
        base = rng.integers(0, m, size=need)
        pick = nbrs[base, rng.integers(0, k, size=need)]
        delta = rng.random(need)[:, None]
        new_X.append(members[base] + delta * (members[pick] - members[base]))
        new_y.append(np.full(need, c, dtype=y.dtype))
    if not new_X:
        return X.copy(), y.copy(), np.zeros(len(y), dtype=bool)
    X_out = np.concatenate([X] + new_X)
    y_out = np.concatenate([y] + new_y)
    mask = np.zeros(len(y_out), dtype=bool)
    mask[len(y):] = True
    return X_out, y_out, mask


def on_segment_residual(point, members) -> float:
    """Smallest max-coordinate residual of ``point`` against every segment
    between two rows of ``members`` (exhaustive pair search)."""
    p = np.asarray(point, dtype=np.float64)
    M = np.asarray(members, dtype=np.float64)
    best = np.inf
    for i in range(len(M)):
        a = M[i]
        best = min(best, float(np.max(np.abs(p - a))))
        for j in range(len(M)):
            if i == j:
                continue
            d = M[j] - a
            dd = float(d @ d)
            if dd == 0.0:
                continue
            t = min(1.0, max(0.0, float((p - a) @ d) / dd))
            best = min(best, float(np.max(np.abs(p - (a + t * d)))))
    return best


class LatentSMOTE(BaseEstimator):
    """Resampler in the imbalanced-learn style: ``fit_resample(X, y)``.

    Parameters
    ----------
    k_neighbors : int, default=5
        Same-class neighbours considered for interpolation.
    random_state : int, default=0
        Seed for the choice of base points, neighbours and offsets.
    """

    def __init__(self, k_neighbors=5, random_state=0):
        self.k_neighbors = k_neighbors
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, counts = np.unique(y, return_counts=True)
        self.n_features_in_ = X.shape[1]
        self.target_count_ = int(counts.max())
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        X = check_array(X, dtype=np.float64)
        X_out, y_out, self.synthetic_mask_ = smote_balance(X, np.asarray(y), self.k_neighbors,
                                                           self.random_state)
        return X_out, y_out
