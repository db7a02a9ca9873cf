"""CSR storage, products, norm estimates and damped SPD block solves."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

# With the "auto" inner solver, components up to this dimension are factorized
# densely and larger ones go through PCG.
DENSE_CHOLESKY_MAX_DIM = 4096
PCG_TOL = 1e-10


class SpdFactorizationError(np.linalg.LinAlgError):
    """Cholesky breakdown on a (numerically) indefinite block."""

    def __init__(self, block: int | None, pivot_index: int, pivot: float):
        self.block = block
        self.pivot_index = pivot_index
        self.pivot = pivot
        super().__init__(
            f"factorization breakdown in block {block} at pivot {pivot_index} (value {pivot!r})"
        )


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed sparse row matrix.

    Arrays are owned by the instance and must not be mutated after construction.
    A scipy view sharing the same buffers is available as :attr:`csr`.
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.row_offsets) != self.n_rows + 1:
            raise ValueError("row_offsets must have n_rows + 1 entries")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != len(self.values):
            raise ValueError("row_offsets must start at 0 and end at nnz")
        if len(self.col_indices) != len(self.values):
            raise ValueError("col_indices and values differ in length")

    @classmethod
    def from_scipy(cls, a) -> SparseMatrix:
        """Compact any scipy sparse matrix: sum duplicates, sort, drop exact zeros."""
        a = sp.csr_matrix(a, dtype=np.float64, copy=True)
        a.sum_duplicates()
        a.eliminate_zeros()
        a.sort_indices()
        return cls(
            a.shape[0],
            a.shape[1],
            a.indptr.astype(np.int64),
            a.indices.astype(np.int64),
            a.data,
        )

    @classmethod
    def from_dense(cls, a) -> SparseMatrix:
        return cls.from_scipy(sp.csr_matrix(np.atleast_2d(np.asarray(a, dtype=np.float64))))

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> SparseMatrix:
        return cls.from_scipy(sp.coo_matrix((vals, (rows, cols)), shape=shape))

    @classmethod
    def identity(cls, n: int) -> SparseMatrix:
        return cls.from_scipy(sp.identity(n, format="csr"))

    @classmethod
    def zeros(cls, n_rows: int, n_cols: int) -> SparseMatrix:
        return cls.from_scipy(sp.csr_matrix((n_rows, n_cols)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape, copy=False
        )

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def check_invariants(self) -> None:
        offs = self.row_offsets
        if np.any(np.diff(offs) < 0):
            raise AssertionError("row_offsets decreasing")
        for i in range(self.n_rows):
            cols = self.col_indices[offs[i] : offs[i + 1]]
            if len(cols) and (np.any(np.diff(cols) <= 0) or cols[-1] >= self.n_cols or cols[0] < 0):
                raise AssertionError(f"row {i}: column indices not strictly increasing in range")
        if np.any(self.values == 0.0):
            raise AssertionError("explicit zero stored")


def spmv(a: SparseMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.n_cols,):
        raise ValueError(f"spmv: expected vector of length {a.n_cols}, got shape {x.shape}")
    return a.csr @ x


def spmv_transpose(a: SparseMatrix, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (a.n_rows,):
        raise ValueError(f"spmv_transpose: expected vector of length {a.n_rows}, got shape {y.shape}")
    return a.csr.T @ y


def frobenius_norm(a: SparseMatrix) -> float:
    return float(np.sqrt(np.dot(a.values, a.values)))


def spectral_norm_est(a, iters: int = 50, tol: float = 1e-6) -> float:
    """Largest |eigenvalue| of a symmetric matrix by power iteration.

    ``a`` may be a :class:`SparseMatrix` or anything supporting ``a @ x``
    with a square ``shape`` (e.g. a scipy LinearOperator). The start vector is
    the normalized all-ones vector so the estimate is deterministic; it never
    exceeds the true norm. Iteration stops after ``iters`` products or once
    the unit iterate moves by less than ``tol``.
    """
    if isinstance(a, SparseMatrix):
        op = a.csr
    else:
        op = a
    n, n2 = op.shape
    if n != n2:
        raise ValueError(f"spectral_norm_est needs a square matrix, got {op.shape}")
    if n == 0:
        return 0.0
    x = np.full(n, 1.0 / np.sqrt(n))
    est = 0.0
    for _ in range(iters):
        y = op @ x
        est = float(np.linalg.norm(y))
        if est == 0.0:
            # all-ones start in the null space; no cheap information left
            return 0.0
        y /= est
        # the iterate converges at half the rate of the estimate; stopping on it
        # leaves the eigenvalue error near tol**2
        step = min(np.linalg.norm(y - x), np.linalg.norm(y + x))
        x = y
        if step <= tol:
            break
    return max(est, 0.0)


@dataclass(frozen=True, eq=False)
class SpdAnalysis:
    """Structure-only part of a factorization, reusable while the pattern is fixed.

    Holds the connected-component split of ``H + mu*I`` and, per component
    larger than 1x1, its index set in factorization order, the CSC structure
    of the reordered component and the positions of its entries in the CSR
    data of the full matrix.
    """

    indptr: np.ndarray
    indices: np.ndarray
    method: str
    dense_max_dim: int
    singles: np.ndarray
    components: tuple

    def matches(self, a: sp.csr_matrix, method: str, dense_max_dim: int) -> bool:
        return (method == self.method and dense_max_dim == self.dense_max_dim
                and np.array_equal(a.indptr, self.indptr) and np.array_equal(a.indices, self.indices))


@dataclass(frozen=True, eq=False)
class SpdFactor:
    """Reusable solver for ``(H + mu*I) d = rhs``.

    ``payload`` holds the inverse diagonal of all 1x1 components and one
    ``(indices, kind, data)`` entry per larger component.
    """

    dimension: int
    mu: float
    method: str
    payload: tuple = field(repr=False)
    block: int | None = None
    analysis: SpdAnalysis | None = field(default=None, repr=False)

    @property
    def n_components(self) -> int:
        return len(self.payload[1]) + len(self.payload[2])


INNER_METHODS = ("sparse", "auto", "dense", "pcg")

_SPLU_OPTIONS = dict(diag_pivot_thresh=0.0, options={"SymmetricMode": True})


def _component_kind(method: str, dim: int, dense_max_dim: int) -> str:
    if method == "auto":
        return "cholesky" if dim <= dense_max_dim else "pcg"
    return {"sparse": "splu", "dense": "cholesky", "pcg": "pcg"}[method]


def _analyze(a: sp.csr_matrix, method: str, dense_max_dim: int) -> SpdAnalysis:
    n = a.shape[0]
    n_comp, labels = connected_components(a, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_comp + 1))
    # entry positions, carried through slicing as exact float values
    pos = sp.csr_matrix((np.arange(1, a.nnz + 1, dtype=np.float64), a.indices, a.indptr), shape=a.shape)
    singles, comps = [], []
    for c in range(n_comp):
        idx = order[bounds[c] : bounds[c + 1]]
        if len(idx) == 1:
            singles.append(idx[0])
            continue
        kind = _component_kind(method, len(idx), dense_max_dim)
        if kind == "splu":
            # symmetric fill-reducing order from the structure; later
            # factorizations run in this order without reordering
            sub = a[idx][:, idx].tocsc()
            lu = spla.splu(sub, permc_spec="MMD_AT_PLUS_A", **_SPLU_OPTIONS)
            idx = idx[np.argsort(lu.perm_c)]
        sub = pos[idx][:, idx].tocsc()
        sub.sort_indices()
        gather = sub.data.astype(np.int64) - 1
        comps.append((idx, kind, gather, sub.indices.copy(), sub.indptr.copy()))
    return SpdAnalysis(a.indptr.copy(), a.indices.copy(), method, dense_max_dim,
                       np.asarray(singles, dtype=np.int64), tuple(comps))


def _factor_component(sub: sp.csc_matrix, idx: np.ndarray, kind: str, block):
    if kind == "cholesky":
        c, info = scipy.linalg.lapack.dpotrf(sub.toarray(), lower=1, clean=1, overwrite_a=1)
        if info > 0:
            raise SpdFactorizationError(block, int(idx[info - 1]), float(c[info - 1, info - 1]))
        if info < 0:
            raise ValueError(f"dpotrf: illegal argument {-info}")
        return c
    if kind == "splu":
        # SPD and already ordered: no pivoting, no further column permutation
        lu = spla.splu(sub, permc_spec="NATURAL", **_SPLU_OPTIONS)
        piv = lu.U.diagonal()
        bad = np.flatnonzero(~(piv > 0))
        if len(bad):
            j = int(np.argsort(lu.perm_c)[bad[0]])
            raise SpdFactorizationError(block, int(idx[j]), float(piv[bad[0]]))
        return lu
    a = sub.tocsr()
    return a, 1.0 / a.diagonal()


def spd_factorize(h: SparseMatrix, mu: float, block: int | None = None,
                  dense_max_dim: int = DENSE_CHOLESKY_MAX_DIM, method: str = "sparse",
                  analysis: SpdAnalysis | None = None) -> SpdFactor:
    """Factorize ``H + mu*I`` component by component.

    ``method`` picks the solver for components larger than 1x1: ``"sparse"``
    (supernodal LU without pivoting, equivalent to a sparse Cholesky),
    ``"dense"`` (LAPACK Cholesky), ``"pcg"`` (Jacobi-preconditioned CG) or
    ``"auto"`` (dense up to ``dense_max_dim``, PCG beyond).

    ``analysis`` from an earlier factor (``f.analysis``) skips the component
    split and ordering when the sparsity pattern is unchanged. The result is
    the same either way.
    """
    if h.n_rows != h.n_cols:
        raise ValueError("spd_factorize needs a square matrix")
    if not mu > 0:
        raise ValueError(f"damping must be positive, got {mu}")
    if method not in INNER_METHODS:
        raise ValueError(f"unknown inner solver {method!r}")
    n = h.n_rows
    a = (h.csr + mu * sp.identity(n, format="csr")).tocsr()
    a.sort_indices()
    diag = a.diagonal()
    if np.any(~(diag > 0)):
        i = int(np.flatnonzero(~(diag > 0))[0])
        raise SpdFactorizationError(block, i, float(diag[i]))
    if analysis is None or not analysis.matches(a, method, dense_max_dim):
        analysis = _analyze(a, method, dense_max_dim)
    comps = []
    for idx, kind, gather, indices, indptr in analysis.components:
        sub = sp.csc_matrix((a.data[gather], indices, indptr), shape=(len(idx), len(idx)))
        comps.append((idx, kind, _factor_component(sub, idx, kind, block)))
    singles = analysis.singles
    inv_single = np.zeros(n)
    inv_single[singles] = 1.0 / diag[singles]
    return SpdFactor(n, mu, method, (inv_single, singles, tuple(comps)), block, analysis)


def _pcg(a, inv_diag, b, tol: float, max_iter: int) -> np.ndarray:
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    for _ in range(max_iter):
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= target:
            # recursive residual drifts; confirm against the true one
            r = b - a @ x
            if np.linalg.norm(r) <= target:
                return x
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise np.linalg.LinAlgError(
        f"PCG did not reach relative residual {tol} in {max_iter} iterations "
        f"(reached {np.linalg.norm(b - a @ x) / bnorm:.3e})"
    )


def spd_solve(f: SpdFactor, rhs) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (f.dimension,):
        raise ValueError(f"spd_solve: expected rhs of length {f.dimension}, got shape {rhs.shape}")
    inv_single, singles, comps = f.payload
    out = np.empty(f.dimension)
    out[singles] = rhs[singles] * inv_single[singles]
    for idx, kind, data in comps:
        r = rhs[idx]
        if kind == "cholesky":
            out[idx] = scipy.linalg.cho_solve((data, True), r, check_finite=False)
        elif kind == "splu":
            out[idx] = data.solve(r)
        else:
            # 1e-10 relative residual contract, tightened slightly for the final-residual check
            out[idx] = _pcg(data[0], data[1], r, PCG_TOL * 0.5, max(10 * len(idx), 50))
    return out
