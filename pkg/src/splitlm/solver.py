"""Levenberg-Marquardt with block splitting and right-hand-side correction.

Each iteration solves ``(H + mu I) d = (beta B - I) g`` where ``H`` is the
block diagonal of ``J^T J`` induced by a variable partition and ``B`` the
remaining off-diagonal coupling. With ``K = 1`` (or a separable partition)
``B`` vanishes and the iteration is classical damped Gauss-Newton with an
Armijo line search.
"""

from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import network
from .partition import Partition, classify_residuals
from .sparse import (
    DENSE_CHOLESKY_MAX_DIM,
    INNER_METHODS,
    SparseMatrix,
    SpdFactor,
    frobenius_norm,
    spd_factorize,
    spd_solve,
    spectral_norm_est,
)

LOG_HEADER = "iter,F,grad_norm,mu,beta,gamma,t,ell,rho,backtracks,wall_ms"
DEGENERATE_BETA_DENOM = 1e-300


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    LINE_SEARCH_FAILURE = "LineSearchFailure"
    NUMERICAL_ERROR = "NumericalError"


class LineSearchFailure(RuntimeError):
    def __init__(self, t, f_trial, f0):
        self.t = t
        self.f_trial = f_trial
        self.f0 = f0
        super().__init__(f"no sufficient decrease down to t={t:.3e} (F trial {f_trial!r}, F0 {f0!r})")


@dataclass
class SolverConfig:
    K: int = 1
    b: float = 0.8
    c: float = 1e-4
    eta: float = 0.25
    ell0: float = 1.0
    ell_min: float = 0.1
    max_iters: int = 200
    max_backtracks: int = 60
    seed: int = 0
    # "residual": mu = 1 + (1+b)^2/(1-b) * ell * ||R||; "algebraic": the four-coefficient rule
    damping: str = "residual"
    beta_zero: bool = False
    diagnostics: bool = False
    # block solver: "sparse" direct, "dense" Cholesky, "pcg", or "auto" (dense up to dense_max_dim)
    inner_solver: str = "sparse"
    dense_max_dim: int = DENSE_CHOLESKY_MAX_DIM

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0 < self.b < 1:
            raise ValueError("b must lie in (0, 1)")
        if not 0 < self.c < 1:
            raise ValueError("c must lie in (0, 1)")
        if not 0 <= self.eta < 1:
            raise ValueError("eta must lie in [0, 1)")
        if not 0 < self.ell_min < self.ell0:
            raise ValueError("need 0 < ell_min < ell0")
        if self.damping not in ("residual", "algebraic"):
            raise ValueError(f"unknown damping rule {self.damping!r}")
        if self.inner_solver not in INNER_METHODS:
            raise ValueError(f"unknown inner solver {self.inner_solver!r}")


@dataclass
class IterationRecord:
    iter: int
    F: float
    grad_norm: float
    mu: float
    beta: float
    gamma: float
    step: float
    ell: float
    rho: float
    backtracks: int
    wall_ms: float
    # extra diagnostics, not part of the CSV log
    F_new: float = math.nan
    g_dot_d: float = math.nan
    d_norm: float = math.nan
    norm_H: float = math.nan
    norm_J: float = math.nan
    norm_B_fro: float = 0.0
    beta_star: float = 0.0
    actual_reduction: float = math.nan
    predicted_reduction: float = math.nan
    x: np.ndarray | None = field(default=None, repr=False)
    d: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SolveReport:
    records: list[IterationRecord]
    status: Status
    final_x: np.ndarray
    residual_percentiles: tuple[float, float, float]
    message: str = ""
    wall_s: float = 0.0
    final_F: float = math.nan

    @property
    def iterations(self) -> int:
        return len(self.records)

    def write_log(self, path) -> None:
        write_iteration_log(self.records, path)


def write_iteration_log(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER.split(","))
        for r in records:
            w.writerow([
                r.iter, repr(r.F), repr(r.grad_norm), repr(r.mu), repr(r.beta), repr(r.gamma),
                repr(r.step), repr(r.ell), repr(r.rho), r.backtracks, repr(r.wall_ms),
            ])


# --------------------------------------------------------------------------
# block system


@dataclass(eq=False)
class BlockSystem:
    """Split of ``J^T J`` and ``g`` along a variable partition.

    All vectors live in the *permuted* variable order (subset blocks
    contiguous); ``perm[i]`` is the original index of permuted entry ``i``.
    """

    H_blocks: list[SparseMatrix]
    B: SparseMatrix
    g_blocks: list[np.ndarray]
    perm: np.ndarray
    offsets: np.ndarray
    factors: list[SpdFactor] | None = None
    mu: float | None = None
    plan: AssemblyPlan | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.H_blocks)

    @property
    def g(self) -> np.ndarray:
        return np.concatenate(self.g_blocks) if self.g_blocks else np.zeros(0)

    def factorize(self, mu: float, dense_max_dim: int = DENSE_CHOLESKY_MAX_DIM,
                  method: str = "sparse", analyses=None) -> None:
        """Factor every ``H_s + mu I``; ``analyses`` may carry structure from a previous call."""
        analyses = analyses or [None] * self.K
        self.factors = [spd_factorize(h, mu, block=s, dense_max_dim=dense_max_dim, method=method,
                                      analysis=an)
                        for s, (h, an) in enumerate(zip(self.H_blocks, analyses))]
        self.mu = mu

    @property
    def analyses(self) -> list | None:
        return None if self.factors is None else [f.analysis for f in self.factors]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``(H + mu I)^{-1}`` block by block."""
        if self.factors is None:
            raise RuntimeError("block system not factorized")
        o = self.offsets
        out = np.empty_like(rhs)
        for s, f in enumerate(self.factors):
            out[o[s] : o[s + 1]] = spd_solve(f, rhs[o[s] : o[s + 1]])
        return out

    def to_original(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        out[self.perm] = v
        return out

    def block_diagonal(self) -> SparseMatrix:
        return SparseMatrix.from_scipy(sp.block_diag([h.csr for h in self.H_blocks], format="csr"))


@dataclass(frozen=True, eq=False)
class AssemblyPlan:
    """Where each stored entry of ``J^T J`` lands in the blocks ``H_s`` and in ``B``.

    Valid for one partition and one sparsity pattern of ``J^T J``; each target
    is ``(indptr, indices, gather)`` with ``gather`` indexing ``(J^T J).data``.
    """

    partition: Partition
    indptr: np.ndarray
    indices: np.ndarray
    h_parts: tuple
    b_part: tuple

    def matches(self, partition: Partition, jtj) -> bool:
        return (partition is self.partition and np.array_equal(jtj.indptr, self.indptr)
                and np.array_equal(jtj.indices, self.indices))


def _make_plan(jtj, partition: Partition) -> AssemblyPlan:
    perm = partition.var_perm
    offsets = partition.block_offsets
    n = len(perm)
    blk = np.repeat(np.arange(partition.K), np.diff(offsets))
    # carry entry positions through the permutation and split as exact floats
    pos = sp.csr_matrix((np.arange(1, jtj.nnz + 1, dtype=np.float64), jtj.indices, jtj.indptr),
                        shape=jtj.shape)
    ap = pos[perm][:, perm].tocoo()
    off = blk[ap.row] != blk[ap.col]

    def part(m):
        return (m.row_offsets, m.col_indices, m.values.astype(np.int64) - 1)

    b = SparseMatrix.from_coo(ap.row[off], ap.col[off], ap.data[off], (n, n))
    apc = ap.tocsr()
    h = [SparseMatrix.from_scipy(apc[offsets[s] : offsets[s + 1], offsets[s] : offsets[s + 1]])
         for s in range(partition.K)]
    return AssemblyPlan(partition, jtj.indptr.copy(), jtj.indices.copy(),
                        tuple(part(m) for m in h), part(b))


def assemble_blocks(J: SparseMatrix, R, partition: Partition, row_order=None,
                    plan: AssemblyPlan | None = None) -> BlockSystem:
    """Build ``H_s``, ``B`` and ``g_s`` from the Jacobian and residual.

    ``row_order[i]`` names the observation in row ``i`` of ``J`` (identity
    when None). Rows whose columns span several subsets must be coupling
    residuals of the partition. A ``plan`` from an earlier call
    (``BlockSystem.plan``) is reused while the pattern of ``J^T J`` is unchanged.
    """
    R = np.asarray(R, dtype=np.float64)
    jc = J.csr
    m, n = jc.shape
    if R.shape != (m,):
        raise ValueError("R and J disagree in the number of rows")
    perm = partition.var_perm
    offsets = partition.block_offsets
    if len(perm) != n:
        raise ValueError(f"partition covers {len(perm)} variables, Jacobian has {n}")
    K = partition.K

    # structural consistency: a row touching two subsets must be a coupling residual
    lens = np.diff(jc.indptr)
    nonempty = lens > 0
    if K > 1 and jc.nnz:
        var_block = np.empty(n, dtype=np.int64)
        var_block[perm] = np.repeat(np.arange(K), np.diff(offsets))
        cb = var_block[jc.indices]
        starts = jc.indptr[:-1][nonempty]
        bmin = np.minimum.reduceat(cb, starts)
        bmax = np.maximum.reduceat(cb, starts)
        rows = np.flatnonzero(nonempty)[bmin != bmax]
        obs = rows if row_order is None else np.asarray(row_order)[rows]
        is_coupling = np.zeros(max(m, 1), dtype=bool)
        is_coupling[partition.coupling_residuals] = True
        if not np.all(is_coupling[obs]):
            bad = int(obs[~is_coupling[obs]][0])
            raise ValueError(f"residual {bad} spans several subsets but is not a coupling residual")

    g = jc.T @ R
    jtj = (jc.T @ jc).tocsr()
    jtj.sort_indices()
    if plan is None or not plan.matches(partition, jtj):
        plan = _make_plan(jtj, partition)
    data = jtj.data
    H_blocks = [SparseMatrix(offsets[s + 1] - offsets[s], offsets[s + 1] - offsets[s], ip, ix, data[gi])
                for s, (ip, ix, gi) in enumerate(plan.h_parts)]
    ip, ix, gi = plan.b_part
    B = SparseMatrix(n, n, ip, ix, data[gi])
    gp = g[perm]
    g_blocks = [gp[offsets[s] : offsets[s + 1]].copy() for s in range(K)]
    return BlockSystem(H_blocks, B, g_blocks, perm, offsets, plan=plan)


# --------------------------------------------------------------------------
# scalar rules


def algebraic_coefficients(ell, normH, normJ, normR):
    q = ell * ell / 4.0
    j2 = normJ * normJ
    return (
        q * normH * normJ * normR,
        q * normJ * normR + ell * normH * j2 * normR,
        normH * j2 + ell * normH * normR + ell * j2 * normR,
        j2 + ell * normR,
    )


def compute_mu(ell: float, normH: float, normJ: float, normR: float, b: float) -> float:
    """Damping from the four norm-product coefficients; always >= 1."""
    if not b < 1:
        raise ValueError(f"b must be < 1, got {b}")
    if ell <= 0 or min(normH, normJ, normR) < 0:
        raise ValueError("ell must be positive and norms non-negative")
    return 1.0 + (1.0 + b) ** 2 / (1.0 - b) * max(algebraic_coefficients(ell, normH, normJ, normR))


def residual_mu(ell: float, normR: float, b: float) -> float:
    """Damping proportional to ``ell * ||R||``, with the same (1+b)^2/(1-b) factor and floor 1."""
    if not b < 1:
        raise ValueError(f"b must be < 1, got {b}")
    return 1.0 + (1.0 + b) ** 2 / (1.0 - b) * ell * normR


@dataclass
class BetaResult:
    beta: float
    gamma: float
    w_hat: np.ndarray | None
    u: np.ndarray
    beta_star: float
    beta_max: float


def compute_beta(bs: BlockSystem, mu: float, b: float, normH: float, normB_ub: float) -> BetaResult:
    """Residual-minimizing correction coefficient, clamped to the descent box.

    With ``A = H + mu I`` the split residual against the full system is
    ``beta (u + v) - w`` for ``u = B g``, ``v = B A^{-1} u``, ``w = B A^{-1} g``.
    """
    if bs.mu != mu:
        raise ValueError(f"factors were built for mu={bs.mu}, asked for mu={mu}")
    g = bs.g
    if bs.B.nnz == 0 or normB_ub == 0.0:
        return BetaResult(0.0, 1.0, None, np.zeros_like(g), 0.0, math.inf)
    Bc = bs.B.csr
    u = Bc @ g
    w_hat = bs.solve(g)
    w = Bc @ w_hat
    v = Bc @ bs.solve(u)
    upv = u + v
    denom = float(upv @ upv)
    beta_star = float(upv @ w) / denom if denom > DEGENERATE_BETA_DENOM else 0.0
    beta_max = b * mu / ((normH + mu) * normB_ub)
    beta = min(max(beta_star, -beta_max), beta_max)
    gamma = 1.0 + abs(beta) * normB_ub
    return BetaResult(beta, gamma, w_hat, u, beta_star, beta_max)


def compute_direction(bs: BlockSystem, beta: float, mu: float, u=None) -> np.ndarray:
    """Solve the K independent systems ``(H_s + mu I) d_s = beta (B g)_s - g_s``."""
    if bs.mu != mu:
        raise ValueError(f"factors were built for mu={bs.mu}, asked for mu={mu}")
    g = bs.g
    if beta == 0.0:
        rhs = -g
    else:
        if u is None:
            u = bs.B.csr @ g
        rhs = beta * u - g
    return bs.solve(rhs)


def linear_residual_rho(J: SparseMatrix, R, d, mu: float) -> float:
    """``||g + (J^T J + mu I) d|| / ||g||`` with ``g = J^T R``."""
    jc = J.csr
    g = jc.T @ R
    gn = float(np.linalg.norm(g))
    if gn == 0.0:
        return 0.0
    res = jc.T @ (jc @ d) + mu * d + g
    return float(np.linalg.norm(res)) / gn


def predicted_reduction(R, J: SparseMatrix, d, mu: float) -> float:
    lin = R + J.csr @ d
    return 0.5 * float(R @ R) - 0.5 * float(lin @ lin) - 0.5 * mu * float(d @ d)


def line_search(fun, x, d, g, gamma: float, c: float, max_backtracks: int, f0: float | None = None):
    """Halving backtracking from ``min(1, 1/gamma)`` until the Armijo test holds.

    Returns ``(t, F_new, x_new, backtracks)``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if f0 is None:
        f0 = fun(x)
    slope = float(np.dot(d, g))
    t = min(1.0, 1.0 / gamma)
    f_trial = math.nan
    for k in range(max_backtracks + 1):
        x_new = x + t * d
        f_trial = fun(x_new)
        if f_trial <= f0 + c * t * slope:
            return t, f_trial, x_new, k
        if k < max_backtracks:
            t *= 0.5
    raise LineSearchFailure(t, f_trial, f0)


def update_ell(ell, t, t_max, A_red, P, eta, ell_min) -> float:
    if t < t_max:
        return 2.0 * ell
    if A_red > eta * P:
        return max(ell_min, ell / 2.0)
    return ell


def residual_fractions(R) -> tuple[float, float, float]:
    a = np.abs(np.asarray(R))
    if a.size == 0:
        return (1.0, 1.0, 1.0)
    return tuple(float(np.count_nonzero(a < k)) / a.size for k in (1, 2, 3))


def stopping_met(R) -> bool:
    """68/95/99.5 envelope on the weighted residuals."""
    f1, f2, f3 = residual_fractions(R)
    return f1 >= 0.68 and f2 >= 0.95 and f3 >= 0.995


# --------------------------------------------------------------------------
# driver


def block_norm(bs: BlockSystem) -> float:
    return max((spectral_norm_est(h) for h in bs.H_blocks), default=0.0)


def solve(problem: network.Problem, partition: Partition | None = None,
          cfg: SolverConfig | None = None, x0=None, callback=None) -> SolveReport:
    """Run the split LM iteration from ``problem.initial_guess`` (or ``x0``)."""
    cfg = cfg or SolverConfig()
    if partition is None:
        if cfg.K != 1:
            raise ValueError("a partition is required for K > 1")
        partition = classify_residuals(problem, np.zeros(problem.n_points, dtype=np.int64))
    if partition.K != cfg.K:
        raise ValueError(f"partition has K={partition.K}, config asks for K={cfg.K}")

    fun = lambda z: network.objective(problem, z)  # noqa: E731
    x = np.array(problem.initial_guess if x0 is None else x0, dtype=np.float64)
    ell = cfg.ell0
    records: list[IterationRecord] = []
    status = Status.MAX_ITERS
    message = ""
    start = time.perf_counter()
    try:
        R, J = network.evaluate(problem, x)
    except ValueError as exc:
        return SolveReport([], Status.NUMERICAL_ERROR, x, residual_fractions([]), str(exc))
    F = 0.5 * float(R @ R)
    analyses = plan = None

    for k in range(cfg.max_iters):
        if stopping_met(R):
            status = Status.CONVERGED
            break
        t_iter = time.perf_counter()
        try:
            bs = assemble_blocks(J, R, partition, plan=plan)
            plan = bs.plan
            normR = float(np.linalg.norm(R))
            algebraic = cfg.damping == "algebraic"
            # ||H|| feeds the beta box and the algebraic damping only
            need_h = algebraic or cfg.diagnostics or (bs.B.nnz > 0 and not cfg.beta_zero)
            normH = block_norm(bs) if need_h else math.nan
            if cfg.K == 1:
                normJ = math.sqrt(normH)
            else:
                normJ = (math.sqrt(spectral_norm_est(J.csr.T @ J.csr))
                         if algebraic or cfg.diagnostics else math.nan)
            normB = frobenius_norm(bs.B)
            if cfg.damping == "algebraic":
                mu = compute_mu(ell, normH, normJ, normR, cfg.b)
            else:
                mu = residual_mu(ell, normR, cfg.b)
            bs.factorize(mu, cfg.dense_max_dim, cfg.inner_solver, analyses)
            analyses = bs.analyses
            if cfg.beta_zero:
                br = BetaResult(0.0, 1.0, None, None, 0.0, math.inf)
            else:
                br = compute_beta(bs, mu, cfg.b, normH, normB)
            d_perm = compute_direction(bs, br.beta, mu, br.u)
        except (np.linalg.LinAlgError, ValueError) as exc:
            status, message = Status.NUMERICAL_ERROR, str(exc)
            break
        d = bs.to_original(d_perm)
        g = bs.to_original(bs.g)
        gnorm = float(np.linalg.norm(g))
        gtd = float(g @ d)
        if not gtd < 0.0:
            status = Status.NUMERICAL_ERROR
            message = "zero gradient" if gnorm == 0.0 else f"not a descent direction (g.d = {gtd!r})"
            break
        t_max = min(1.0, 1.0 / br.gamma)
        try:
            t, F_new, x_new, nback = line_search(fun, x, d, g, br.gamma, cfg.c, cfg.max_backtracks, F)
        except LineSearchFailure as exc:
            status, message = Status.LINE_SEARCH_FAILURE, str(exc)
            break
        A_red = F - F_new
        P = predicted_reduction(R, J, d, mu)
        rho = linear_residual_rho(J, R, d, mu)
        new_ell = update_ell(ell, t, t_max, A_red, P, cfg.eta, cfg.ell_min)
        rec = IterationRecord(
            iter=k, F=F, grad_norm=gnorm, mu=mu, beta=br.beta, gamma=br.gamma, step=t, ell=ell,
            rho=rho, backtracks=nback, wall_ms=0.0, F_new=F_new, g_dot_d=gtd,
            d_norm=float(np.linalg.norm(d)), norm_H=normH, norm_J=normJ, norm_B_fro=normB,
            beta_star=br.beta_star, actual_reduction=A_red, predicted_reduction=P,
        )
        if cfg.diagnostics:
            rec.x, rec.d = x.copy(), d.copy()
        ell = new_ell
        x = x_new
        try:
            R, J = network.evaluate(problem, x)
        except ValueError as exc:
            status, message = Status.NUMERICAL_ERROR, str(exc)
            records.append(rec)
            break
        F = 0.5 * float(R @ R)
        rec.wall_ms = (time.perf_counter() - t_iter) * 1e3
        records.append(rec)
        if callback is not None:
            callback(rec)
    else:
        if stopping_met(R):
            status = Status.CONVERGED

    return SolveReport(records, status, x, residual_fractions(R), message,
                       time.perf_counter() - start, F)
