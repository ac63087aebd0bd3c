"""The implicit sensing operator behind the sketch, plus analytic diagnostics.

Column ``i`` of the operator belongs to the i-th registered key and holds one
nonzero per sketch row, at ``j*w + H_j(key)``. The operator is stored as that
(n, d) position table; a scipy CSR view is built lazily for batched products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import NS_ROWS, NS_SIGNS, HashFamily, as_key_array, hash_rows


class SizeGuardError(ValueError):
    pass


class InvalidPriorError(ValueError):
    pass


@dataclass(frozen=True)
class MapPrior:
    mu: float
    sigma2: float
    l1: float
    l2sq: float


@dataclass(frozen=True, eq=False)
class SketchOperator:
    positions: np.ndarray  # (n, d) flat row index j*w + col
    signs: np.ndarray | None  # (n, d) of +-1, or None for the unsigned operator
    depth: int
    width: int
    version: int = 0
    _csr: list = field(default_factory=list, repr=False)

    @classmethod
    def from_keys(cls, keys, depth: int, width: int, seed: int, key_len: int,
                  signed: bool = False, version: int = 0) -> "SketchOperator":
        arr = as_key_array(keys, key_len)
        rows = HashFamily.derive(seed, NS_ROWS, depth)
        pos = np.empty((len(arr), depth), dtype=np.int64)
        for j in range(depth):
            pos[:, j] = j * width + hash_rows(arr, np.uint64(rows.seeds[j]), np.uint64(width))
        signs = None
        if signed:
            fam = HashFamily.derive(seed, NS_SIGNS, depth)
            signs = np.empty((len(arr), depth), dtype=np.int8)
            for j in range(depth):
                bit = hash_rows(arr, np.uint64(fam.seeds[j]), np.uint64(2))
                signs[:, j] = 1 - 2 * bit
        pos.setflags(write=False)
        if signs is not None:
            signs.setflags(write=False)
        return cls(pos, signs, depth, width, version)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def m(self) -> int:
        return self.depth * self.width

    @property
    def shape(self) -> tuple[int, int]:
        return self.m, self.n

    def _entries(self) -> np.ndarray:
        if self.signs is None:
            return np.ones(self.positions.size, dtype=np.int64)
        return self.signs.astype(np.int64).ravel()

    def csr(self) -> sp.csr_matrix:
        """Sparse (m, n) view; never a dense matrix."""
        if not self._csr:
            cols = np.repeat(np.arange(self.n), self.depth)
            mat = sp.csr_matrix((self._entries(), (self.positions.ravel(), cols)), shape=self.shape)
            self._csr.append(mat)
        return self._csr[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] != self.n:
            raise ValueError(f"x has length {x.shape[0]}, operator has {self.n} columns")
        return self.csr() @ x

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        if y.shape[0] != self.m:
            raise ValueError(f"y has length {y.shape[0]}, operator has {self.m} rows")
        return self.csr().T @ y

    def materialize(self, max_n: int = 2000, max_m: int = 2000, max_entries: int = 4_000_000) -> np.ndarray:
        if self.n > max_n or self.m > max_m or self.n * self.m > max_entries:
            raise SizeGuardError(f"refusing to materialize a {self.m}x{self.n} matrix")
        return self.csr().toarray()

    def to_csv(self, path, **guard) -> None:
        np.savetxt(path, self.materialize(**guard), fmt="%d", delimiter=",")

    def select(self, idx) -> "SketchOperator":
        """Operator restricted to a subset of columns."""
        signs = None if self.signs is None else self.signs[idx]
        return SketchOperator(self.positions[idx], signs, self.depth, self.width, self.version)


def numerical_rank(mat: np.ndarray, rel_tol: float = 1e-9) -> int:
    """Rank by Gaussian elimination with full pivoting."""
    a = np.array(mat, dtype=np.float64)
    if a.size == 0:
        return 0
    tol = rel_tol * max(np.abs(a).max(), 1e-300) * max(a.shape)
    rank = 0
    rows, cols = a.shape
    for r in range(min(rows, cols)):
        sub = np.abs(a[r:, r:])
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        if sub[i, j] <= tol:
            break
        i += r
        j += r
        a[[r, i]] = a[[i, r]]
        a[:, [r, j]] = a[:, [j, r]]
        a[r + 1:, r:] -= np.outer(a[r + 1:, r] / a[r, r], a[r, r:])
        rank += 1
    return rank


def stack_transforms(A: np.ndarray, transforms) -> np.ndarray:
    return np.vstack([A] + [A @ T for T in transforms])


def rank_diagnostic(A: SketchOperator | np.ndarray, transforms=(), max_entries: int = 4_000_000):
    """Rank of [A; A T_1; ...; A T_P] and whether it reaches the column count."""
    dense = A.materialize() if isinstance(A, SketchOperator) else np.asarray(A, dtype=np.float64)
    n = dense.shape[1]
    if dense.shape[0] * (len(transforms) + 1) * n > max_entries:
        raise SizeGuardError("stacked matrix exceeds the size guard")
    r = numerical_rank(stack_transforms(dense, list(transforms)))
    return r, r == n


def map_estimate(key_positions, y, prior: MapPrior, d: int, w: int) -> float:
    """Closed-form posterior estimate of one key's frequency from its d counters."""
    if prior.sigma2 < 0:
        raise InvalidPriorError("sigma2 must be >= 0")
    if prior.l2sq <= 0 and prior.sigma2 == 0:
        raise InvalidPriorError("l2sq must be > 0")
    denom = prior.l2sq + prior.sigma2 * d * (w - 1)
    if denom == 0:
        raise InvalidPriorError("zero denominator")
    total = float(np.sum(np.asarray(y)[np.asarray(key_positions)]))
    return (prior.mu * prior.l2sq + prior.sigma2 * (w * total - d * prior.l1)) / denom


def map_objective(a, counters, prior: MapPrior, w: int) -> float:
    """Unapproximated log-posterior of x(i) = a given the key's d counters."""
    counters = np.asarray(counters, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)[..., None]
    var = (w - 1) / w**2 * (prior.l2sq - a**2)
    mean = a + (prior.l1 - a) / w
    ll = -0.5 * np.log(var) - (counters - mean) ** 2 / (2 * var)
    return ll.sum(axis=-1) - (a[..., 0] - prior.mu) ** 2 / (2 * prior.sigma2)
