"""Structured codebooks W ~ D Lambda Gamma.

``D`` is a dictionary of unit-norm atoms, each codeword is a ``rho``-sparse
combination of atoms (a column of ``Lambda``), and ``Gamma`` assigns every
sub-vector to one codeword. Lambda is stored in sparse form: a (K, rho) array
of atom indices and a (K, rho) array of coefficients.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError
from .kmeans import _as_data, assign_nearest, kmeans

# relative magnitude below which a residual or correlation counts as zero
_ZERO = 1e-12
# codeword refresh also tries every support when there are at most this many
EXHAUSTIVE_SUPPORTS = 64


@dataclass
class OmpResult:
    coefficients: np.ndarray
    support: list[int]
    residual: np.ndarray
    rank_deficient: bool = False
    early_exit: bool = False

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.coefficients))


def omp(D, x, rho: int) -> OmpResult:
    """Orthogonal matching pursuit with at most ``rho`` atoms.

    Atom selection maximizes |D^T r| with ties to the lowest index. Stops early
    (flagging ``early_exit``) only when the residual is numerically zero or
    orthogonal to every unselected atom.
    """
    D = np.asarray(D, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    d, L = D.shape
    if x.shape[0] != d:
        raise DataError(f"signal length {x.shape[0]} != atom length {d}")
    if not 1 <= rho <= min(d, L):
        raise ParameterError(f"rho={rho} out of range [1, {min(d, L)}]")

    scale = max(float(np.linalg.norm(x)), 1.0)
    support: list[int] = []
    coef = np.zeros(0)
    residual = x.copy()
    rank_deficient = False
    early = False
    for _ in range(rho):
        if np.linalg.norm(residual) <= _ZERO * scale:
            early = True
            break
        corr = np.abs(D.T @ residual)
        corr[support] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= _ZERO * scale:
            early = True
            break
        support.append(j)
        sub = D[:, support]
        coef, _, rank, _ = np.linalg.lstsq(sub, x, rcond=None)
        if rank < len(support):
            rank_deficient = True
        residual = x - sub @ coef

    full = np.zeros(L)
    if support:
        full[support] = coef
    return OmpResult(full, support, residual, rank_deficient, early)


@dataclass
class DlCodebook:
    dictionary: np.ndarray      # d x L, unit-norm columns
    support: np.ndarray         # K x rho atom indices
    coefs: np.ndarray           # K x rho coefficients
    assignments: np.ndarray     # length n, indices < K
    short_columns: np.ndarray = field(default=None)  # K bools: codeword uses < rho atoms
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64)
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.short_columns is None:
            self.short_columns = np.zeros(self.size, dtype=bool)
        if self.support.shape != self.coefs.shape:
            raise ParameterError("support and coefficient arrays must have the same shape")
        if self.assignments.size and (self.assignments.min() < 0 or self.assignments.max() >= self.size):
            raise ParameterError("DL assignment index out of range")

    @property
    def dim(self) -> int:
        return self.dictionary.shape[0]

    @property
    def atoms(self) -> int:
        return self.dictionary.shape[1]

    @property
    def size(self) -> int:
        return self.support.shape[0]

    @property
    def rho(self) -> int:
        return self.support.shape[1]

    def lambda_matrix(self) -> np.ndarray:
        """Dense L x K coefficient matrix."""
        lam = np.zeros((self.atoms, self.size))
        cols = np.repeat(np.arange(self.size), self.rho)
        np.add.at(lam, (self.support.ravel(), cols), self.coefs.ravel())
        return lam

    def codewords(self) -> np.ndarray:
        """The d x K codebook D Lambda."""
        return self.dictionary @ self.lambda_matrix()

    def reconstruct(self) -> np.ndarray:
        return reconstruction(self)


def reconstruction(cb: DlCodebook) -> np.ndarray:
    """Explicit product D Lambda Gamma (d x n)."""
    return cb.codewords()[:, cb.assignments]


def _objective(W, codewords, labels) -> float:
    diff = W - codewords[:, labels]
    return float(np.sqrt(np.einsum("ij,ij->", diff, diff)))


@dataclass
class BatchOmpResult:
    support: np.ndarray         # n x rho, padded with unused atoms where fewer were selected
    coefs: np.ndarray           # n x rho, zero on padding
    selected: np.ndarray        # n, number of atoms actually selected
    rank_deficient: np.ndarray  # n bools


def omp_batch(D, X, rho: int) -> BatchOmpResult:
    """Column-wise :func:`omp` on every column of ``X`` at once.

    Gives the same supports as running :func:`omp` per column; least squares on
    the support is solved through batched pseudo-inverses.
    """
    D = np.asarray(D, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    d, L = D.shape
    if X.shape[0] != d:
        raise DataError(f"signal length {X.shape[0]} != atom length {d}")
    if not 1 <= rho <= min(d, L):
        raise ParameterError(f"rho={rho} out of range [1, {min(d, L)}]")
    n = X.shape[1]
    support = np.zeros((n, rho), dtype=np.int64)
    coefs = np.zeros((n, rho))
    selected = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    scale = np.maximum(np.linalg.norm(X, axis=0), 1.0)
    R = X.copy()
    rows = np.arange(n)
    for t in range(rho):
        corr = np.abs(D.T @ R).T
        for u in range(t):
            corr[rows, support[:, u]] = -1.0
        j = np.argmax(corr, axis=1)
        active &= (np.linalg.norm(R, axis=0) > _ZERO * scale) & (corr[rows, j] > _ZERO * scale)
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        support[idx, t] = j[idx]
        selected[idx] = t + 1
        sub = D[:, support[idx, :t + 1]].transpose(1, 0, 2)       # m x d x (t+1)
        c = np.einsum("mtd,dm->mt", np.linalg.pinv(sub), X[:, idx])
        coefs[idx, :t + 1] = c
        R[:, idx] = X[:, idx] - np.einsum("mdt,mt->dm", sub, c)

    rank_def = np.zeros(n, dtype=bool)
    for t in range(1, rho + 1):
        idx = np.flatnonzero(selected == t)
        if idx.size and t > 1:
            sub = D[:, support[idx, :t]].transpose(1, 0, 2)
            rank_def[idx] = np.linalg.matrix_rank(sub) < t
    for i in np.flatnonzero(selected < rho):
        used = set(support[i, :selected[i]].tolist())
        pad = [a for a in range(L) if a not in used][:rho - selected[i]]
        support[i, selected[i]:] = pad
        coefs[i, selected[i]:] = 0.0
    return BatchOmpResult(support, coefs, selected, rank_def)


def _fit_errors(D, support, coefs, targets):
    approx = np.einsum("dkr,kr->dk", D[:, support], coefs)
    return np.linalg.norm(targets - approx, axis=0)


def _exhaustive_fit(D, targets, rho):
    """Best least-squares fit of every column over all C(L, rho) supports."""
    combos = np.array(list(itertools.combinations(range(D.shape[1]), rho)), dtype=np.int64)
    pinv = np.linalg.pinv(D[:, combos].transpose(1, 0, 2))                  # C x rho x d
    coefs = np.einsum("ctd,dm->cmt", pinv, targets)                          # C x m x rho
    approx = np.einsum("dct,cmt->cdm", D[:, combos], coefs)
    err = np.linalg.norm(targets[None] - approx, axis=1)                     # C x m
    best = np.argmin(err, axis=0)
    cols = np.arange(targets.shape[1])
    return combos[best], coefs[best, cols]


def _sparse_fit(D, targets, rho, old_support=None, old_coefs=None):
    """Refresh codewords (columns of ``targets``) by OMP.

    Each column keeps whichever is best of: the OMP fit, the best support found
    by exhaustive search when there are at most ``EXHAUSTIVE_SUPPORTS`` of them,
    and (given an incumbent) a least-squares refit on the incumbent support and
    the incumbent itself.
    """
    res = omp_batch(D, targets, rho)
    sup, coef = res.support, res.coefs
    short = res.selected < rho
    candidates = []
    if math.comb(D.shape[1], rho) <= EXHAUSTIVE_SUPPORTS:
        candidates.append(_exhaustive_fit(D, targets, rho))
    if old_support is not None:
        sub = D[:, old_support].transpose(1, 0, 2)
        refit = np.einsum("mtd,dm->mt", np.linalg.pinv(sub), targets)
        candidates += [(old_support, old_coefs), (old_support, refit)]
    if not candidates:
        return sup, coef, short
    err = _fit_errors(D, sup, coef, targets)
    for cand_sup, cand in candidates:
        cand_err = _fit_errors(D, cand_sup, cand, targets)
        better = cand_err < err
        sup = np.where(better[:, None], cand_sup, sup)
        coef = np.where(better[:, None], cand, coef)
        short = np.where(better, np.any(cand == 0.0, axis=1), short)
        err = np.minimum(err, cand_err)
    return sup, coef, short


def _codewords(D, support, coefs):
    return np.einsum("dkr,kr->dk", D[:, support], coefs)


def _normalize_atoms(D, support, coefs, W, codewords, labels, rng):
    norms = np.linalg.norm(D, axis=0)
    dead = norms <= _ZERO
    if np.any(dead):
        # unused atoms: point them at the worst-reconstructed columns
        err = np.linalg.norm(W - codewords[:, labels], axis=0)
        order = np.argsort(-err, kind="stable")
        for k, j in enumerate(np.flatnonzero(dead)):
            v = W[:, order[k % len(order)]] - codewords[:, labels[order[k % len(order)]]]
            if np.linalg.norm(v) <= _ZERO:
                v = rng.standard_normal(D.shape[0])
            D[:, j] = v / np.linalg.norm(v)
            # the zero atom contributed nothing; drop its coefficients so D Lambda is unchanged
            coefs[support == j] = 0.0
        norms = np.linalg.norm(D, axis=0)
    D /= norms
    coefs *= norms[support]
    return D, coefs


def dl_learn(W, L_dl: int, K_dl: int, rho: int, iters: int = 30, seed: int = 0,
             init_dictionary: np.ndarray | None = None, rel_tol: float = 1e-6,
             check_monotone: bool = False) -> DlCodebook:
    """Learn a structured codebook for the columns of ``W``.

    Alternates (1) nearest-codeword assignment, (2) per-codeword sparse refit of
    the assigned columns' mean onto D, and (3) a least-squares dictionary update
    followed by atom re-normalization. Each step is a descent step on
    ||W - D Lambda Gamma||_F.

    Initialization: D from k-means with ``L_dl`` clusters (normalized) unless
    ``init_dictionary`` is given; codewords from k-means with ``K_dl`` clusters
    sparse-coded onto D.
    """
    W = _as_data(W, "W")
    d, n = W.shape
    if not 1 <= L_dl < K_dl:
        raise ParameterError(f"need 1 <= L_dl < K_dl, got L_dl={L_dl}, K_dl={K_dl}")
    if K_dl > n:
        raise ParameterError(f"K_dl={K_dl} exceeds the number of columns n={n}")
    if not 1 <= rho <= min(d, L_dl):
        raise ParameterError(f"rho={rho} out of range [1, {min(d, L_dl)}]")
    if iters < 0:
        raise ParameterError("iters must be >= 0")
    rng = np.random.default_rng(seed)

    if init_dictionary is not None:
        D = np.array(init_dictionary, dtype=np.float64)
        if D.shape != (d, L_dl):
            raise ParameterError(f"init_dictionary has shape {D.shape}, expected {(d, L_dl)}")
    else:
        if L_dl <= n:
            D = kmeans(W, L_dl, seed=seed).centroids
        else:
            D = rng.standard_normal((d, L_dl))
    norms = np.linalg.norm(D, axis=0)
    for j in np.flatnonzero(norms <= _ZERO):
        D[:, j] = rng.standard_normal(d)
    D = D / np.linalg.norm(D, axis=0)

    init_cw = kmeans(W, K_dl, seed=seed).centroids
    support, coefs, short = _sparse_fit(D, init_cw, rho)

    cw = _codewords(D, support, coefs)
    labels, _ = assign_nearest(W, cw)
    history = [_objective(W, cw, labels)]
    slack = 1e-9 * max(1.0, history[0])

    def _check(stage, value, before):
        if check_monotone and value > before + slack:
            raise AssertionError(f"{stage} increased objective {before!r} -> {value!r}")

    for _ in range(iters):
        before = history[-1]
        # (2) codeword refresh from the mean of the assigned columns
        counts = np.bincount(labels, minlength=K_dl)
        sums = np.zeros((K_dl, d))
        np.add.at(sums, labels, W.T)
        used = np.flatnonzero(counts > 0)
        means = (sums[used] / counts[used, None]).T
        s_, c_, sh_ = _sparse_fit(D, means, rho, support[used], coefs[used])
        support[used], coefs[used], short[used] = s_, c_, sh_
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # re-seed empty codewords from the worst-reconstructed columns
            err = np.linalg.norm(W - cw[:, labels], axis=0)
            worst = np.argsort(-err, kind="stable")[:empty.size]
            worst = np.resize(worst, empty.size)
            s_, c_, sh_ = _sparse_fit(D, W[:, worst], rho)
            support[empty], coefs[empty], short[empty] = s_, c_, sh_
        cw = _codewords(D, support, coefs)
        _check("codeword update", _objective(W, cw, labels), before)

        # (3) dictionary update: min_D ||W - D A||, A = Lambda Gamma
        lam = np.zeros((L_dl, K_dl))
        np.add.at(lam, (support.ravel(), np.repeat(np.arange(K_dl), rho)), coefs.ravel())
        A = lam[:, labels]
        obj_pre = _objective(W, cw, labels)
        sol, *_ = np.linalg.lstsq(A.T, W.T, rcond=None)
        D_new = sol.T.copy()
        cw_new = _codewords(D_new, support, coefs)
        if _objective(W, cw_new, labels) <= obj_pre:
            D_new, coefs = _normalize_atoms(D_new, support, coefs.copy(), W, cw_new, labels, rng)
            D = D_new
            short |= np.any(coefs == 0.0, axis=1)
            cw = _codewords(D, support, coefs)
        _check("dictionary update", _objective(W, cw, labels), obj_pre)

        # (1) assignment
        labels, _ = assign_nearest(W, cw)
        obj = _objective(W, cw, labels)
        _check("assignment", obj, before)
        history.append(obj)
        if before - obj <= rel_tol * max(before, _ZERO):
            break

    return DlCodebook(D, support, coefs, labels, short, history)
