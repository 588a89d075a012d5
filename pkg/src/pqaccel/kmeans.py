"""k-means with k-means++ seeding, and the one-hot VQ codebook built on it.

Data matrices are column-major in the mathematical sense: ``X`` is d x n and
each column is one sub-vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError

# Upper bound on the d*n*chunk temporaries used for exact distance evaluation.
_CHUNK_ELEMENTS = 1 << 22


def _as_data(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"{name} must be a d x n matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{name} contains non-finite entries")
    return X


def squared_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Exact (n, K) matrix of squared Euclidean distances between columns.

    Differences are formed explicitly rather than through the |x|^2 - 2x.c + |c|^2
    expansion so that exact ties stay ties.
    """
    d, n = X.shape
    k = C.shape[1]
    out = np.empty((n, k))
    step = max(1, _CHUNK_ELEMENTS // max(1, d * n))
    for lo in range(0, k, step):
        diff = X[:, :, None] - C[:, None, lo:lo + step]
        out[:, lo:lo + step] = np.einsum("dnk,dnk->nk", diff, diff)
    return out


def assign_nearest(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codeword per column (ties to the lowest index) and its squared distance."""
    dist = squared_distances(X, C)
    idx = np.argmin(dist, axis=1)
    return idx, dist[np.arange(dist.shape[0]), idx]


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns d x k initial centroids drawn from the columns of X."""
    n = X.shape[1]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(X, X[:, chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            nxt = int(rng.choice(n, p=probs))
        else:
            # every column already coincides with a centroid
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        closest = np.minimum(closest, squared_distances(X, X[:, [nxt]]).ravel())
    return X[:, chosen].copy()


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_history: list[float]
    iterations: int

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


def _update_centroids(X, labels, C, errors):
    d, k = C.shape
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, d))
    np.add.at(sums, labels, X.T)
    new = C.copy()
    nonempty = counts > 0
    new[:, nonempty] = (sums[nonempty] / counts[nonempty, None]).T
    empty = np.flatnonzero(~nonempty)
    if empty.size:
        # re-seed from the worst-quantized columns, one distinct column per empty cluster
        errors = errors.copy()
        for j in empty:
            worst = int(np.argmax(errors))
            new[:, j] = X[:, worst]
            errors[worst] = -1.0
    return new


def kmeans(X, K: int, seed: int = 0, max_iter: int = 100, tol: float | None = None,
           init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd's algorithm on the columns of ``X``.

    ``tol`` is an absolute threshold on objective improvement; the default is
    ``1e-6`` times the objective after seeding. The objective history is
    non-increasing by construction: an iteration that would increase it through
    rounding is discarded and the run stops.
    """
    X = _as_data(X)
    n = X.shape[1]
    if n < 1:
        raise ParameterError("kmeans needs at least one column")
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if K > n:
        raise ParameterError(f"K={K} exceeds the number of columns n={n}")
    if tol is not None and tol < 0:
        raise ParameterError("tol must be >= 0")

    if init is None:
        C = kmeans_plusplus(X, K, np.random.default_rng(seed))
    else:
        C = _as_data(init, "init").copy()
        if C.shape != (X.shape[0], K):
            raise ParameterError(f"init has shape {C.shape}, expected {(X.shape[0], K)}")

    labels, err = assign_nearest(X, C)
    history = [float(err.sum())]
    if tol is None:
        tol = 1e-6 * history[0]

    it = 0
    for it in range(1, max_iter + 1):
        C_new = _update_centroids(X, labels, C, err)
        labels_new, err_new = assign_nearest(X, C_new)
        obj = float(err_new.sum())
        if obj > history[-1]:
            it -= 1
            break
        converged = np.array_equal(labels_new, labels)
        C, labels, err = C_new, labels_new, err_new
        history.append(obj)
        if history[-2] - obj < tol or obj == 0.0 or converged:
            break
    return KMeansResult(C, labels, history, it)


@dataclass
class VqCodebook:
    """Codewords ``C`` (d x K) and assignments encoding the one-hot matrix Gamma."""

    codewords: np.ndarray
    assignments: np.ndarray

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.assignments.size and (self.assignments.min() < 0 or self.assignments.max() >= self.size):
            raise ParameterError("VQ assignment index out of range")

    @property
    def size(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[0]

    def gamma(self) -> np.ndarray:
        """Dense one-hot K x n assignment matrix."""
        g = np.zeros((self.size, self.assignments.size))
        g[self.assignments, np.arange(self.assignments.size)] = 1.0
        return g

    def reconstruct(self) -> np.ndarray:
        return self.codewords[:, self.assignments]


def vq_quantize(W, K_vq: int, seed: int = 0, max_iter: int = 100, tol: float | None = None) -> VqCodebook:
    """Approximate the columns of ``W`` by ``K_vq`` k-means centroids."""
    res = kmeans(W, K_vq, seed=seed, max_iter=max_iter, tol=tol)
    return VqCodebook(res.centroids, res.assignments)
