"""Non-learning decoders: LSQR, OMP, count-min and count-sketch point queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator
from scipy.sparse.linalg import lsqr as _scipy_lsqr

from .core import HashFamily


@dataclass
class RecoveryResult:
    x_hat: np.ndarray
    iterations: int
    residual_l2: float
    converged: bool


def _as_operator(A):
    if hasattr(A, "apply") and hasattr(A, "apply_transpose"):
        return LinearOperator(A.shape, matvec=lambda v: A.apply(v).astype(np.float64),
                              rmatvec=lambda v: A.apply_transpose(v).astype(np.float64),
                              dtype=np.float64), A.apply
    mat = np.asarray(A, dtype=np.float64)
    return mat, lambda v: mat @ v


def _residual(apply, x, y) -> float:
    return float(np.linalg.norm(apply(x) - y))


def lsqr(A, y, max_iters: int | None = None, atol: float = 1e-12, clamp: bool = True) -> RecoveryResult:
    """Least squares by LSQR, started from zero (minimum-norm for consistent systems)."""
    op, apply = _as_operator(A)
    y = np.asarray(y, dtype=np.float64)
    out = _scipy_lsqr(op, y, atol=atol, btol=atol, iter_lim=max_iters)
    x, istop, itn = out[0], out[1], out[2]
    if clamp:
        x = np.maximum(x, 0.0)
    res = _residual(apply, x, y)
    converged = istop in (1, 2, 4, 5) or res <= atol * max(np.linalg.norm(y), 1.0)
    return RecoveryResult(x, int(itn), res, bool(converged))


def omp(A, y, max_sparsity: int | None = None, residual_tol: float = 1e-9,
        clamp: bool = True) -> RecoveryResult:
    """Orthogonal matching pursuit with an incrementally orthogonalised support.

    Columns whose component orthogonal to the current support vanishes are
    dropped rather than added, which keeps every least-squares refit
    well-posed.
    """
    if hasattr(A, "csr"):
        mat = A.csr().astype(np.float64).tocsc()
        cols = lambda j: mat[:, [j]].toarray().ravel()
        corr = lambda r: mat.T @ r
        m, n = A.shape
    else:
        mat = np.asarray(A, dtype=np.float64)
        cols = lambda j: mat[:, j]
        corr = lambda r: mat.T @ r
        m, n = mat.shape
    y = np.asarray(y, dtype=np.float64)
    ynorm = np.linalg.norm(y)
    col_norms = np.sqrt(np.asarray(abs(mat).power(2).sum(axis=0) if hasattr(mat, "power")
                                   else (mat**2).sum(axis=0)).ravel())
    col_norms[col_norms == 0] = np.inf
    if max_sparsity is None:
        max_sparsity = int(min(np.count_nonzero(np.abs(corr(y)) > 0), m))
    max_sparsity = min(max_sparsity, n)

    Q = np.zeros((m, 0))
    R = np.zeros((0, 0))
    support: list[int] = []
    excluded = np.zeros(n, dtype=bool)
    r = y.copy()
    qty = np.zeros(0)
    its = 0
    stop_at = residual_tol * max(ynorm, 1.0)
    while len(support) < max_sparsity and np.linalg.norm(r) > stop_at:
        c = np.abs(corr(r)) / col_norms
        c[excluded] = -1.0
        j = int(np.argmax(c))
        if c[j] <= 0:
            break
        its += 1
        a = cols(j)
        coef = Q.T @ a
        v = a - Q @ coef
        coef2 = Q.T @ v  # second Gram-Schmidt pass
        v -= Q @ coef2
        coef += coef2
        nv = np.linalg.norm(v)
        excluded[j] = True
        if nv <= 1e-10 * np.linalg.norm(a):
            continue
        q = v / nv
        Q = np.column_stack([Q, q])
        k = R.shape[0]
        R2 = np.zeros((k + 1, k + 1))
        R2[:k, :k] = R
        R2[:k, k] = coef
        R2[k, k] = nv
        R = R2
        qty = np.append(qty, q @ y)
        support.append(j)
        r = y - Q @ qty
    x = np.zeros(n)
    if support:
        from scipy.linalg import solve_triangular

        x[support] = solve_triangular(R, qty)
    if clamp:
        x = np.maximum(x, 0.0)
    if hasattr(A, "apply"):
        res = _residual(lambda v: A.apply(v), x, y)
    else:
        res = _residual(lambda v: mat @ v, x, y)
    return RecoveryResult(x, its, res, bool(res <= stop_at or len(support) >= max_sparsity))


def _positions(counters: np.ndarray, key: bytes, rows: HashFamily) -> np.ndarray:
    w = counters.shape[1]
    return np.array([rows.hash(j, key, w) for j in range(counters.shape[0])])


def cm_point_query(counters: np.ndarray, key: bytes, rows: HashFamily) -> int:
    cols = _positions(counters, key, rows)
    return int(counters[np.arange(counters.shape[0]), cols].min())


def median_toward_zero(vals: np.ndarray) -> np.ndarray:
    """Row median along the last axis; even counts average the middle pair, truncated."""
    vals = np.sort(np.asarray(vals, dtype=np.int64), axis=-1)
    d = vals.shape[-1]
    if d % 2:
        return vals[..., d // 2]
    s = vals[..., d // 2 - 1] + vals[..., d // 2]
    return np.sign(s) * (np.abs(s) // 2)


def cs_point_query(counters: np.ndarray, key: bytes, rows: HashFamily, signs: HashFamily) -> int:
    cols = _positions(counters, key, rows)
    sg = np.array([1 - 2 * signs.hash(j, key, 2) for j in range(counters.shape[0])])
    return int(median_toward_zero(sg * counters[np.arange(counters.shape[0]), cols]))


def cm_query_many(counters: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Vectorised count-min query from an (n, d) table of flat positions."""
    return counters.ravel()[positions].min(axis=1)


def cs_query_many(counters: np.ndarray, positions: np.ndarray, signs: np.ndarray) -> np.ndarray:
    return median_toward_zero(signs.astype(np.int64) * counters.ravel()[positions])
