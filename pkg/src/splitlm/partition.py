"""Point-interaction graph, balanced k-way partitioning and residual splitting.

The partitioner is recursive bisection: each cut starts from a breadth-first
level split rooted at a pseudo-peripheral node and is then improved with
boundary Fiduccia-Mattheyses passes under a hard balance window.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .network import Problem, objective, residuals

MAX_REFINE_SWEEPS = 10
# relative slack of one bisection; compounded over log2(K) levels it stays well inside 1.10
BISECTION_SLACK = 0.01
# stop an FM pass after this many moves without a new best cut
FM_PATIENCE = 64
# subset sizes stay within this factor of n/K (or ceil(n/K) when that is larger)
BALANCE_FACTOR = 1.10


@dataclass(frozen=True, eq=False)
class VariableGraph:
    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def edge_count(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    @property
    def adjacency(self) -> list[np.ndarray]:
        return [self.neighbors(i) for i in range(self.n_nodes)]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def average_degree(self) -> float:
        return 2.0 * self.edge_count / self.n_nodes

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices), dtype=np.int8)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes))

    def cut_size(self, assignment) -> int:
        a = np.asarray(assignment)
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        return int(np.count_nonzero(a[rows] != a[self.indices])) // 2


def graph_from_edges(n_nodes: int, edges) -> VariableGraph:
    edges = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.vstack([edges, edges[:, ::-1]])
    m = sp.csr_matrix((np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n_nodes, n_nodes))
    m.sum_duplicates()
    m.sort_indices()
    return VariableGraph(n_nodes, m.indptr.astype(np.int64), m.indices.astype(np.int64))


def build_variable_graph(problem: Problem) -> VariableGraph:
    """One node per point; an edge for every pair of points sharing an observation."""
    pts = problem.table.points
    pairs = []
    for a in range(3):
        for b in range(a + 1, 3):
            sel = (pts[:, a] >= 0) & (pts[:, b] >= 0)
            pairs.append(pts[sel][:, [a, b]])
    edges = np.vstack(pairs) if pairs else np.empty((0, 2), dtype=np.int64)
    return graph_from_edges(problem.n_points, edges)


# --------------------------------------------------------------------------
# bisection


def _bfs_order(adj, nodes_mask, start):
    """Breadth-first order and levels over the nodes where ``nodes_mask`` is set."""
    order = [start]
    level = {start: 0}
    q = deque([start])
    while q:
        v = q.popleft()
        for w in adj[v]:
            if nodes_mask[w] and w not in level:
                level[w] = level[v] + 1
                order.append(w)
                q.append(w)
    return order, level


def _pseudo_peripheral(adj, nodes_mask, start, max_rounds=8):
    node = start
    ecc = -1
    for _ in range(max_rounds):
        order, level = _bfs_order(adj, nodes_mask, node)
        far = order[-1]
        if level[far] <= ecc:
            break
        ecc = level[far]
        # among the farthest level prefer the lowest degree node
        last = [v for v in order if level[v] == ecc]
        node = min(last, key=lambda v: (len(adj[v]), v))
    return node


def _initial_split(adj, sub_nodes, target_a, rng):
    """BFS level split; components are consumed whole, largest first."""
    mask = np.zeros(len(adj), dtype=bool)
    mask[sub_nodes] = True
    remaining = set(int(v) for v in sub_nodes)
    comps = []
    for v in sub_nodes:
        v = int(v)
        if v in remaining:
            order, _ = _bfs_order(adj, mask, v)
            remaining.difference_update(order)
            comps.append(order)
    comps.sort(key=lambda c: (-len(c), c[0]))
    order = []
    for comp in comps:
        start = comp[int(rng.integers(len(comp)))]
        root = _pseudo_peripheral(adj, mask, start)
        comp_order, _ = _bfs_order(adj, mask, root)
        order.extend(comp_order)
    side = {}
    for i, v in enumerate(order):
        side[v] = 0 if i < target_a else 1
    return side


def _fm_pass(adj, side, target_a, lo, hi):
    """One boundary FM pass. Mutates ``side``; returns the cut improvement (>= 0)."""
    size_a = sum(1 for s in side.values() if s == 0)
    gain = {}
    boundary = []
    for v, s in side.items():
        ext = inn = 0
        for w in adj[v]:
            sw = side.get(w)
            if sw is None:
                continue
            if sw == s:
                inn += 1
            else:
                ext += 1
        gain[v] = ext - inn
        if ext:
            boundary.append(v)
    heaps = ([], [])
    for v in boundary:
        heapq.heappush(heaps[side[v]], (-gain[v], v))
    locked = set()
    moves = []
    cum = 0
    best = 0
    best_len = 0
    # FM may pass through one-node imbalance; only strictly balanced prefixes are kept
    wlo, whi = min(lo, target_a - 1), max(hi, target_a + 1)
    since_best = 0
    while since_best < FM_PATIENCE:
        cands = []
        for s in (0, 1):
            h = heaps[s]
            while h and (h[0][1] in locked or -h[0][0] != gain[h[0][1]] or side[h[0][1]] != s):
                heapq.heappop(h)
            if h:
                new_a = size_a - 1 if s == 0 else size_a + 1
                if wlo <= new_a <= whi:
                    cands.append((h[0][0], h[0][1], s))
        if not cands:
            break
        _, v, s = min(cands)
        heapq.heappop(heaps[s])
        g = gain[v]
        side[v] = 1 - s
        size_a += -1 if s == 0 else 1
        locked.add(v)
        cum += g
        moves.append(v)
        for w in adj[v]:
            if w in side and w not in locked:
                # edge v-w flipped between internal and external
                gain[w] += 2 if side[w] == s else -2
                heapq.heappush(heaps[side[w]], (-gain[w], w))
        if lo <= size_a <= hi and cum > best:
            best = cum
            best_len = len(moves)
            since_best = 0
        else:
            since_best += 1
    for v in moves[best_len:][::-1]:
        side[v] = 1 - side[v]
    return best


def _bisect(adj, sub_nodes, target_a, rng):
    n = len(sub_nodes)
    side = _initial_split(adj, sub_nodes, target_a, rng)
    slack = int(BISECTION_SLACK * n)
    lo, hi = target_a - slack, target_a + slack
    for _ in range(MAX_REFINE_SWEEPS):
        if _fm_pass(adj, side, target_a, lo, hi) <= 0:
            break
    part_a = np.array(sorted(v for v, s in side.items() if s == 0), dtype=np.int64)
    part_b = np.array(sorted(v for v, s in side.items() if s == 1), dtype=np.int64)
    return part_a, part_b


def _pack_components(g: VariableGraph, K: int) -> np.ndarray | None:
    """Zero-cut assignment grouping whole components, if one fits the balance window."""
    n_comp, labels = connected_components(g.matrix, directed=False)
    if n_comp < K:
        return None
    sizes = np.bincount(labels, minlength=n_comp)
    limit = max(math.ceil(g.n_nodes / K), BALANCE_FACTOR * g.n_nodes / K)
    if sizes.max() > limit:
        return None
    # largest component first into the currently smallest subset
    first_node = np.full(n_comp, g.n_nodes)
    np.minimum.at(first_node, labels, np.arange(g.n_nodes))
    order = sorted(range(n_comp), key=lambda c: (-sizes[c], first_node[c]))
    heap = [(0, s) for s in range(K)]
    comp_subset = np.empty(n_comp, dtype=np.int64)
    for c in order:
        load, s = heapq.heappop(heap)
        comp_subset[c] = s
        heapq.heappush(heap, (load + int(sizes[c]), s))
    loads = np.bincount(comp_subset, weights=sizes, minlength=K)
    if loads.min() == 0 or loads.max() > limit:
        return None
    # number subsets by their smallest point so the result does not depend on heap order
    subset_first = np.full(K, g.n_nodes)
    np.minimum.at(subset_first, comp_subset, first_node)
    relabel = np.empty(K, dtype=np.int64)
    relabel[np.argsort(subset_first, kind="stable")] = np.arange(K)
    return relabel[comp_subset[labels]]


def partition_kway(g: VariableGraph, K: int, seed: int = 0) -> np.ndarray:
    """Assign each node to one of ``K`` balanced subsets with a small edge cut."""
    K = int(K)
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    if K > g.n_nodes:
        raise ValueError(f"K={K} exceeds the number of nodes {g.n_nodes}")
    rng = np.random.default_rng(seed)
    assignment = np.zeros(g.n_nodes, dtype=np.int64)
    if K == 1:
        return assignment
    adj = [nb.tolist() for nb in g.adjacency]

    packed = _pack_components(g, K)
    if packed is not None:
        return packed

    def recurse(nodes, k, first):
        if k == 1:
            assignment[nodes] = first
            return
        k_a = k // 2
        target_a = round(len(nodes) * k_a / k)
        a, b = _bisect(adj, nodes, target_a, rng)
        recurse(a, k_a, first)
        recurse(b, k - k_a, first + k_a)

    recurse(np.arange(g.n_nodes, dtype=np.int64), K, 0)
    return assignment


# --------------------------------------------------------------------------
# residual classification


@dataclass(frozen=True, eq=False)
class Partition:
    K: int
    assignment: np.ndarray
    subset_sizes: np.ndarray
    internal_residuals: list[np.ndarray]
    coupling_residuals: np.ndarray

    @property
    def n_residuals(self) -> int:
        return sum(len(e) for e in self.internal_residuals) + len(self.coupling_residuals)

    @cached_property
    def row_order(self) -> np.ndarray:
        """Observation indices grouped by subset, coupling residuals last."""
        return np.concatenate([*self.internal_residuals, self.coupling_residuals]).astype(np.int64)

    @cached_property
    def var_blocks(self) -> list[np.ndarray]:
        """Sorted variable indices of every subset (both coordinates of each point)."""
        blocks = []
        for s in range(self.K):
            pts = np.flatnonzero(self.assignment == s)
            blocks.append(np.column_stack([2 * pts, 2 * pts + 1]).reshape(-1))
        return blocks

    @cached_property
    def var_perm(self) -> np.ndarray:
        return np.concatenate(self.var_blocks).astype(np.int64)

    @cached_property
    def block_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(b) for b in self.var_blocks])]).astype(np.int64)

    def cut_fraction(self) -> float:
        m = self.n_residuals
        return len(self.coupling_residuals) / m if m else 0.0


def classify_residuals(problem: Problem, assignment) -> Partition:
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (problem.n_points,):
        raise ValueError("assignment must cover every point")
    K = int(assignment.max()) + 1 if len(assignment) else 1
    pts = problem.table.points
    sub = np.where(pts >= 0, assignment[np.maximum(pts, 0)], -1)
    first = sub[:, 0]
    same = np.all((sub == first[:, None]) | (sub < 0), axis=1)
    internal = [np.flatnonzero(same & (first == s)) for s in range(K)]
    coupling = np.flatnonzero(~same)
    sizes = np.bincount(assignment, minlength=K)
    return Partition(K, assignment, sizes, internal, coupling)


def make_partition(problem: Problem, K: int, seed: int = 0) -> Partition:
    assignment = partition_kway(build_variable_graph(problem), K, seed)
    part = classify_residuals(problem, assignment)
    if part.K != K:
        # an empty trailing subset would shrink K; keep the requested count explicit
        raise RuntimeError(f"partitioner produced {part.K} subsets instead of {K}")
    return part


def partition_stats(p: Partition, problem: Problem, x) -> dict:
    """Sizes, cut fraction and the split of F into coupling and per-subset parts."""
    r = residuals(problem, x)
    f_s = [0.5 * float(r[e] @ r[e]) for e in p.internal_residuals]
    rho = r[p.coupling_residuals]
    phi = 0.5 * float(rho @ rho)
    sizes = p.subset_sizes
    ideal = problem.n_points / p.K
    return {
        "K": p.K,
        "n_points": problem.n_points,
        "m": problem.n_obs,
        "internal_counts": [len(e) for e in p.internal_residuals],
        "coupling_count": len(p.coupling_residuals),
        "cut_fraction": p.cut_fraction(),
        "subset_sizes": sizes.tolist(),
        "balance": float(sizes.max() / ideal),
        "phi": phi,
        "F_s": f_s,
        "sum_F_s": float(sum(f_s)),
        "F": objective(problem, x),
    }
