"""2-D least-squares network adjustment: observations, residuals, Jacobians,
a synthetic problem generator and a plain-text problem format.

Point ``i`` owns variables ``2*i`` (x) and ``2*i + 1`` (y).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .sparse import SparseMatrix

DEGENERATE_TOL = 1e-12


class Kind(str, enum.Enum):
    POINT_DISTANCE = "PointDistance"
    ANGLE = "Angle"
    POINT_LINE = "PointLine"
    COORD_X = "CoordX"
    COORD_Y = "CoordY"

    @property
    def arity(self) -> int:
        return _ARITY[self]


_ARITY = {
    Kind.POINT_DISTANCE: 2,
    Kind.ANGLE: 3,
    Kind.POINT_LINE: 3,
    Kind.COORD_X: 1,
    Kind.COORD_Y: 1,
}
_KIND_CODE = {k: i for i, k in enumerate(Kind)}


class DegenerateGeometryError(ValueError):
    def __init__(self, index, obs, what):
        self.index = index
        self.observation = obs
        super().__init__(f"observation {index if index is not None else '?'} ({obs}): {what}")


@dataclass(frozen=True)
class Observation:
    kind: Kind
    point_ids: tuple[int, ...]
    value: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "point_ids", tuple(int(p) for p in self.point_ids))
        if len(self.point_ids) != self.kind.arity:
            raise ValueError(f"{self.kind.value} needs {self.kind.arity} points, got {self.point_ids}")
        if len(set(self.point_ids)) != len(self.point_ids):
            raise ValueError(f"repeated point id in {self.point_ids}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.kind is Kind.ANGLE and not -math.pi < self.value <= math.pi:
            raise ValueError(f"angle value {self.value} outside (-pi, pi]")


@dataclass(eq=False)
class Problem:
    n_points: int
    observations: list[Observation]
    initial_guess: np.ndarray
    true_coords: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        self.initial_guess = np.asarray(self.initial_guess, dtype=np.float64)
        if self.initial_guess.shape != (self.n_vars,):
            raise ValueError("initial_guess must have length 2*n_points")
        if self.true_coords is not None:
            self.true_coords = np.asarray(self.true_coords, dtype=np.float64)
            if self.true_coords.shape != (self.n_vars,):
                raise ValueError("true_coords must have length 2*n_points")
        for j, obs in enumerate(self.observations):
            if max(obs.point_ids) >= self.n_points or min(obs.point_ids) < 0:
                raise ValueError(f"observation {j} references an unknown point")

    @property
    def n_vars(self) -> int:
        return 2 * self.n_points

    @property
    def n_obs(self) -> int:
        return len(self.observations)

    @cached_property
    def table(self) -> ObservationTable:
        return ObservationTable.from_observations(self.observations)

    def __eq__(self, other):
        if not isinstance(other, Problem):
            return NotImplemented
        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(a, b)
        return (
            self.n_points == other.n_points
            and self.seed == other.seed
            and self.observations == other.observations
            and same(self.initial_guess, other.initial_guess)
            and same(self.true_coords, other.true_coords)
        )


# --------------------------------------------------------------------------
# scalar, per-observation reference implementation


def _pt(x, i):
    return np.array([x[2 * i], x[2 * i + 1]], dtype=np.float64)


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return math.pi - np.mod(math.pi - a, 2 * math.pi)


def raw_residual(obs: Observation, x, index: int | None = None) -> float:
    p = obs.point_ids
    if obs.kind is Kind.POINT_DISTANCE:
        return float(np.linalg.norm(_pt(x, p[1]) - _pt(x, p[0])) - obs.value)
    if obs.kind is Kind.ANGLE:
        u = _pt(x, p[0]) - _pt(x, p[1])
        v = _pt(x, p[2]) - _pt(x, p[1])
        if np.hypot(*u) < DEGENERATE_TOL or np.hypot(*v) < DEGENERATE_TOL:
            raise DegenerateGeometryError(index, obs, "angle leg of zero length")
        theta = math.atan2(_cross(u, v), float(u @ v))
        return float(wrap_angle(theta - obs.value))
    if obs.kind is Kind.POINT_LINE:
        q1 = _pt(x, p[1])
        e = _pt(x, p[2]) - q1
        length = float(np.hypot(*e))
        if length < DEGENERATE_TOL:
            raise DegenerateGeometryError(index, obs, "line through coincident points")
        return float(_cross(e, _pt(x, p[0]) - q1) / length - obs.value)
    if obs.kind is Kind.COORD_X:
        return float(x[2 * p[0]] - obs.value)
    return float(x[2 * p[0] + 1] - obs.value)


def weighted_residual(obs: Observation, x, index: int | None = None) -> float:
    return raw_residual(obs, x, index) / obs.sigma


def jacobian_row(obs: Observation, x, index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the weighted residual.

    Returns ``(columns, values)`` for the involved coordinates only, columns
    in increasing order (at most 6 entries).
    """
    p = obs.point_ids
    if obs.kind is Kind.POINT_DISTANCE:
        diff = _pt(x, p[1]) - _pt(x, p[0])
        dist = float(np.hypot(*diff))
        if dist < DEGENERATE_TOL:
            raise DegenerateGeometryError(index, obs, "coincident points in distance")
        unit = diff / dist
        grads = {p[0]: -unit, p[1]: unit}
    elif obs.kind is Kind.ANGLE:
        u = _pt(x, p[0]) - _pt(x, p[1])
        v = _pt(x, p[2]) - _pt(x, p[1])
        uu, vv = float(u @ u), float(v @ v)
        if uu < DEGENERATE_TOL**2 or vv < DEGENERATE_TOL**2:
            raise DegenerateGeometryError(index, obs, "angle leg of zero length")
        da = np.array([u[1], -u[0]]) / uu
        dc = np.array([-v[1], v[0]]) / vv
        grads = {p[0]: da, p[1]: -(da + dc), p[2]: dc}
    elif obs.kind is Kind.POINT_LINE:
        q1 = _pt(x, p[1])
        e = _pt(x, p[2]) - q1
        q = _pt(x, p[0]) - q1
        length = float(np.hypot(*e))
        if length < DEGENERATE_TOL:
            raise DegenerateGeometryError(index, obs, "line through coincident points")
        c = _cross(e, q)
        dq = np.array([-e[1], e[0]]) / length
        de = np.array([q[1], -q[0]]) / length - c * e / length**3
        grads = {p[0]: dq, p[1]: -(dq + de), p[2]: de}
    elif obs.kind is Kind.COORD_X:
        grads = {p[0]: np.array([1.0, 0.0])}
    else:
        grads = {p[0]: np.array([0.0, 1.0])}
    cols, vals = [], []
    for pid in sorted(grads):
        g = grads[pid] / obs.sigma
        for k in (0, 1):
            if obs.kind is Kind.COORD_X and k == 1 or obs.kind is Kind.COORD_Y and k == 0:
                continue
            cols.append(2 * pid + k)
            vals.append(float(g[k]))
    return np.array(cols, dtype=np.int64), np.array(vals)


# --------------------------------------------------------------------------
# vectorized evaluation


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Column-oriented copy of an observation list (points padded with -1)."""

    kinds: np.ndarray   # int codes, order of ``Kind``
    points: np.ndarray  # (m, 3)
    values: np.ndarray
    sigmas: np.ndarray

    @classmethod
    def from_observations(cls, observations) -> ObservationTable:
        m = len(observations)
        kinds = np.empty(m, dtype=np.int64)
        points = np.full((m, 3), -1, dtype=np.int64)
        values = np.empty(m)
        sigmas = np.empty(m)
        for j, obs in enumerate(observations):
            kinds[j] = _KIND_CODE[obs.kind]
            points[j, : len(obs.point_ids)] = obs.point_ids
            values[j] = obs.value
            sigmas[j] = obs.sigma
        return cls(kinds, points, values, sigmas)

    def __len__(self):
        return len(self.kinds)

    def rows_of(self, kind: Kind) -> np.ndarray:
        return np.flatnonzero(self.kinds == _KIND_CODE[kind])


def _first_bad(mask, rows, observations):
    j = int(rows[np.argmax(mask)])
    return j, observations[j] if observations is not None else None


def evaluate(problem: Problem, x, row_order=None) -> tuple[np.ndarray, SparseMatrix]:
    """Weighted residual vector and sparse Jacobian at ``x``.

    Row ``i`` of the output corresponds to observation ``row_order[i]``
    (identity order when ``row_order`` is None).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.n_vars,):
        raise ValueError(f"x must have length {problem.n_vars}")
    t = problem.table
    m = len(t)
    xy = x.reshape(-1, 2)
    raw = np.empty(m)
    # six derivative slots per row: (x, y) of up to three points
    jv = np.zeros((m, 6))

    rows = t.rows_of(Kind.POINT_DISTANCE)
    if len(rows):
        p0, p1 = t.points[rows, 0], t.points[rows, 1]
        diff = xy[p1] - xy[p0]
        dist = np.hypot(diff[:, 0], diff[:, 1])
        bad = dist < DEGENERATE_TOL
        if bad.any():
            raise DegenerateGeometryError(*_first_bad(bad, rows, problem.observations), "coincident points in distance")
        raw[rows] = dist - t.values[rows]
        unit = diff / dist[:, None]
        jv[rows, 0:2] = -unit
        jv[rows, 2:4] = unit

    rows = t.rows_of(Kind.ANGLE)
    if len(rows):
        a, b, c = (t.points[rows, k] for k in range(3))
        u = xy[a] - xy[b]
        v = xy[c] - xy[b]
        uu = np.einsum("ij,ij->i", u, u)
        vv = np.einsum("ij,ij->i", v, v)
        bad = (uu < DEGENERATE_TOL**2) | (vv < DEGENERATE_TOL**2)
        if bad.any():
            raise DegenerateGeometryError(*_first_bad(bad, rows, problem.observations), "angle leg of zero length")
        theta = np.arctan2(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0], np.einsum("ij,ij->i", u, v))
        raw[rows] = wrap_angle(theta - t.values[rows])
        da = np.column_stack([u[:, 1], -u[:, 0]]) / uu[:, None]
        dc = np.column_stack([-v[:, 1], v[:, 0]]) / vv[:, None]
        jv[rows, 0:2] = da
        jv[rows, 2:4] = -(da + dc)
        jv[rows, 4:6] = dc

    rows = t.rows_of(Kind.POINT_LINE)
    if len(rows):
        pp, q1i, q2i = (t.points[rows, k] for k in range(3))
        q1 = xy[q1i]
        e = xy[q2i] - q1
        q = xy[pp] - q1
        length = np.hypot(e[:, 0], e[:, 1])
        bad = length < DEGENERATE_TOL
        if bad.any():
            raise DegenerateGeometryError(*_first_bad(bad, rows, problem.observations), "line through coincident points")
        cr = e[:, 0] * q[:, 1] - e[:, 1] * q[:, 0]
        raw[rows] = cr / length - t.values[rows]
        dq = np.column_stack([-e[:, 1], e[:, 0]]) / length[:, None]
        de = (np.column_stack([q[:, 1], -q[:, 0]]) / length[:, None]
              - (cr / length**3)[:, None] * e)
        jv[rows, 0:2] = dq
        jv[rows, 2:4] = -(dq + de)
        jv[rows, 4:6] = de

    rows = t.rows_of(Kind.COORD_X)
    if len(rows):
        raw[rows] = xy[t.points[rows, 0], 0] - t.values[rows]
        jv[rows, 0] = 1.0
    rows = t.rows_of(Kind.COORD_Y)
    if len(rows):
        raw[rows] = xy[t.points[rows, 0], 1] - t.values[rows]
        jv[rows, 1] = 1.0

    inv_sigma = 1.0 / t.sigmas
    r = raw * inv_sigma
    jv *= inv_sigma[:, None]

    pts = t.points
    cols = np.empty((m, 6), dtype=np.int64)
    cols[:, 0::2] = 2 * pts
    cols[:, 1::2] = 2 * pts + 1
    if row_order is not None:
        row_order = np.asarray(row_order, dtype=np.int64)
        if sorted(row_order.tolist()) != list(range(m)):
            raise ValueError("row_order must be a permutation of the observation indices")
        r, jv, cols = r[row_order], jv[row_order], cols[row_order]
    keep = (cols >= 0) & (jv != 0.0)
    row_idx = np.broadcast_to(np.arange(m)[:, None], (m, 6))
    jac = SparseMatrix.from_coo(row_idx[keep], cols[keep], jv[keep], (m, problem.n_vars))
    return r, jac


def residuals(problem: Problem, x) -> np.ndarray:
    """Weighted residuals only (no Jacobian), observation order."""
    x = np.asarray(x, dtype=np.float64)
    t = problem.table
    xy = x.reshape(-1, 2)
    raw = np.empty(len(t))
    rows = t.rows_of(Kind.POINT_DISTANCE)
    if len(rows):
        diff = xy[t.points[rows, 1]] - xy[t.points[rows, 0]]
        raw[rows] = np.hypot(diff[:, 0], diff[:, 1]) - t.values[rows]
    rows = t.rows_of(Kind.ANGLE)
    if len(rows):
        b = xy[t.points[rows, 1]]
        u = xy[t.points[rows, 0]] - b
        v = xy[t.points[rows, 2]] - b
        theta = np.arctan2(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0], np.einsum("ij,ij->i", u, v))
        raw[rows] = wrap_angle(theta - t.values[rows])
    rows = t.rows_of(Kind.POINT_LINE)
    if len(rows):
        q1 = xy[t.points[rows, 1]]
        e = xy[t.points[rows, 2]] - q1
        q = xy[t.points[rows, 0]] - q1
        raw[rows] = (e[:, 0] * q[:, 1] - e[:, 1] * q[:, 0]) / np.hypot(e[:, 0], e[:, 1]) - t.values[rows]
    rows = t.rows_of(Kind.COORD_X)
    raw[rows] = xy[t.points[rows, 0], 0] - t.values[rows]
    rows = t.rows_of(Kind.COORD_Y)
    raw[rows] = xy[t.points[rows, 0], 1] - t.values[rows]
    return raw / t.sigmas


def objective(problem: Problem, x) -> float:
    r = residuals(problem, x)
    return 0.5 * float(r @ r)


# --------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    target_degree: float = 6.0
    locality_radius: float = 3.0
    grid_spacing: float = 10.0
    distance_sigma: float = 0.01
    angle_sigma: float = math.pi / 180.0
    point_line_sigma: float = 0.01
    precise_fraction: float = 0.01
    precise_sigma: float = 0.01
    coarse_sigma: float = 1.0
    kinds: tuple[Kind, ...] = field(default=(Kind.POINT_DISTANCE, Kind.ANGLE, Kind.POINT_LINE))


class GeneratorError(RuntimeError):
    pass


def grid_side(n_points: int) -> int:
    return math.ceil(2 * math.sqrt(n_points))


def _true_value(kind, coords, ids):
    pts = [coords[i] for i in ids]
    if kind is Kind.POINT_DISTANCE:
        return float(np.hypot(*(pts[1] - pts[0])))
    if kind is Kind.ANGLE:
        u, v = pts[0] - pts[1], pts[2] - pts[1]
        return math.atan2(_cross(u, v), float(u @ v))
    e = pts[2] - pts[1]
    return float(_cross(e, pts[0] - pts[1]) / np.hypot(*e))


def generate_problem(n_points: int, seed: int, cfg: GeneratorConfig | None = None) -> Problem:
    """Random nearly separable adjustment network on a sparse regular grid.

    Points are a uniform 25% sample of a ``ceil(2 sqrt(n))``-sided grid.
    Geometric observations among nearby points are added until the average
    degree of the point graph reaches ``cfg.target_degree``; then every point
    gets a noisy coordinate observation pair, precise for a small fraction.
    """
    cfg = cfg or GeneratorConfig()
    if n_points < 16:
        raise ValueError(f"n_points must be at least 16, got {n_points}")
    side = grid_side(n_points)
    rng = np.random.default_rng(seed)

    nodes = np.sort(rng.choice(side * side, size=n_points, replace=False))
    coords = np.column_stack([nodes % side, nodes // side]).astype(np.float64) * cfg.grid_spacing
    tree = cKDTree(coords)
    radius = cfg.locality_radius * cfg.grid_spacing
    neighbours = [np.array(sorted(set(nb) - {i}), dtype=np.int64)
                  for i, nb in enumerate(tree.query_ball_point(coords, radius))]

    sigma_of = {
        Kind.POINT_DISTANCE: cfg.distance_sigma,
        Kind.ANGLE: cfg.angle_sigma,
        Kind.POINT_LINE: cfg.point_line_sigma,
    }
    observations: list[Observation] = []
    edges: set[tuple[int, int]] = set()
    needed_edges = cfg.target_degree * n_points / 2.0
    attempts = 0
    max_attempts = 1000 * n_points
    while len(edges) < needed_edges:
        attempts += 1
        if attempts > max_attempts:
            raise GeneratorError(
                f"average degree {2 * len(edges) / n_points:.3f} after {max_attempts} attempts; "
                f"locality radius {cfg.locality_radius} too small"
            )
        kind = cfg.kinds[rng.integers(len(cfg.kinds))]
        first = int(rng.integers(n_points))
        cand = neighbours[first]
        if len(cand) < kind.arity - 1:
            continue
        others = rng.choice(cand, size=kind.arity - 1, replace=False)
        if kind is Kind.POINT_DISTANCE:
            ids = (first, int(others[0]))
        elif kind is Kind.ANGLE:
            ids = (int(others[0]), first, int(others[1]))
        else:
            ids = (first, int(others[0]), int(others[1]))
        sigma = sigma_of[kind]
        value = _true_value(kind, coords, ids) + rng.normal(0.0, sigma)
        if kind is Kind.ANGLE:
            value = float(wrap_angle(value))
        observations.append(Observation(kind, ids, float(value), sigma))
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                edges.add((min(ids[a], ids[b]), max(ids[a], ids[b])))

    n_precise = max(1, round(cfg.precise_fraction * n_points))
    precise = np.zeros(n_points, dtype=bool)
    precise[rng.choice(n_points, size=n_precise, replace=False)] = True
    init = np.empty(2 * n_points)
    for i in range(n_points):
        sigma = cfg.precise_sigma if precise[i] else cfg.coarse_sigma
        for k, kind in ((0, Kind.COORD_X), (1, Kind.COORD_Y)):
            value = float(coords[i, k] + rng.normal(0.0, sigma))
            observations.append(Observation(kind, (i,), value, sigma))
            init[2 * i + k] = value
    return Problem(n_points, observations, init, coords.reshape(-1).copy(), seed)


def disjoint_union(a: Problem, b: Problem) -> Problem:
    """Two independent networks as one problem; ``b``'s points are renumbered after ``a``'s."""
    shift = a.n_points
    obs = list(a.observations) + [
        Observation(o.kind, tuple(p + shift for p in o.point_ids), o.value, o.sigma)
        for o in b.observations
    ]
    true = None
    if a.true_coords is not None and b.true_coords is not None:
        true = np.concatenate([a.true_coords, b.true_coords])
    x0 = np.concatenate([a.initial_guess, b.initial_guess])
    return Problem(a.n_points + b.n_points, obs, x0, true)


# --------------------------------------------------------------------------
# file format


class ProblemFormatError(ValueError):
    def __init__(self, path, line_no, msg):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")


def write_problem(problem: Problem, path) -> None:
    lines = [f"n_points {problem.n_points}"]
    if problem.seed is not None:
        lines.append(f"seed {problem.seed}")
    if problem.true_coords is not None:
        tc = problem.true_coords.tolist()
        lines += [f"point {i} {tc[2 * i]!r} {tc[2 * i + 1]!r}" for i in range(problem.n_points)]
    for obs in problem.observations:
        ids = " ".join(str(p) for p in obs.point_ids)
        lines.append(f"obs {obs.kind.value} {ids} {float(obs.value)!r} {float(obs.sigma)!r}")
    x0 = problem.initial_guess.tolist()
    lines += [f"init {i} {x0[2 * i]!r} {x0[2 * i + 1]!r}" for i in range(problem.n_points)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_problem(path) -> Problem:
    n_points = seed = None
    true_pts: dict[int, tuple[float, float]] = {}
    init_pts: dict[int, tuple[float, float]] = {}
    observations = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                head = tok[0]
                if head == "n_points":
                    n_points = int(tok[1])
                elif head == "seed":
                    seed = int(tok[1])
                elif n_points is None:
                    raise ValueError("missing 'n_points' header before data")
                elif head in ("point", "init"):
                    if len(tok) != 4:
                        raise ValueError(f"'{head}' expects 3 fields")
                    i = int(tok[1])
                    if not 0 <= i < n_points:
                        raise ValueError(f"point id {i} out of range")
                    (true_pts if head == "point" else init_pts)[i] = (float(tok[2]), float(tok[3]))
                elif head == "obs":
                    kind = Kind(tok[1])
                    if len(tok) != 4 + kind.arity:
                        raise ValueError(f"{kind.value} expects {kind.arity} point ids, value and sigma")
                    ids = tuple(int(t) for t in tok[2 : 2 + kind.arity])
                    if any(not 0 <= i < n_points for i in ids):
                        raise ValueError("point id out of range")
                    observations.append(Observation(kind, ids, float(tok[-2]), float(tok[-1])))
                else:
                    raise ValueError(f"unknown record '{head}'")
            except (ValueError, IndexError) as exc:
                raise ProblemFormatError(path, line_no, str(exc)) from None
    if n_points is None:
        raise ProblemFormatError(path, 0, "missing 'n_points' header")

    def collect(pts, what, required):
        if not pts and not required:
            return None
        missing = set(range(n_points)) - pts.keys()
        if missing:
            raise ProblemFormatError(path, 0, f"no '{what}' line for point {min(missing)}")
        return np.array([pts[i] for i in range(n_points)]).reshape(-1)

    return Problem(
        n_points,
        observations,
        collect(init_pts, "init", True),
        collect(true_pts, "point", False),
        seed,
    )
