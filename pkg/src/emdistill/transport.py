"""Exact solver for the balanced/unbalanced transportation problem.

`solve` runs the transportation simplex (Vogel initial basis + MODI
pivoting) on the bipartite supply/demand problem; `emd` normalizes the
optimal work by the total flow. `oracle_solve` is a brute-force
reference that enumerates every spanning-tree basis of small instances
and is used to verify `solve` in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

_FEAS_TOL = 1e-12
_REDUCED_COST_TOL = 1e-12
_ORACLE_MAX = 4


class TransportInputError(ValueError):
    """Invalid supplies, demands or cost matrix."""


class DegenerateFlowError(ZeroDivisionError):
    """Total flow is zero; EMD is undefined."""


@dataclass(frozen=True)
class TransportProblem:
    """Supplies (length M), demands (length N) and an M x N cost matrix."""

    supplies: np.ndarray
    demands: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "supplies", np.asarray(self.supplies, np.float64))
        object.__setattr__(self, "demands", np.asarray(self.demands, np.float64))
        object.__setattr__(self, "cost", np.asarray(self.cost, np.float64))
        s, d, c = self.supplies, self.demands, self.cost
        if s.ndim != 1 or d.ndim != 1 or c.shape != (s.size, d.size):
            raise TransportInputError(
                f"shape mismatch: supplies {s.shape}, demands {d.shape}, cost {c.shape}"
            )
        for name, a in (("supplies", s), ("demands", d), ("cost", c)):
            if not np.all(np.isfinite(a)):
                raise TransportInputError(f"{name} contain non-finite values")
            if np.any(a < 0):
                raise TransportInputError(f"{name} contain negative values")
        if s.sum() <= 0 or d.sum() <= 0:
            raise TransportInputError("total supply and total demand must be positive")

    @property
    def m(self) -> int:
        return self.supplies.size

    @property
    def n(self) -> int:
        return self.demands.size


@dataclass(frozen=True)
class FlowMatrix:
    """An optimal transport plan with its objective value."""

    flow: np.ndarray
    work: float
    total_flow: float


def emd(f: FlowMatrix, p: TransportProblem) -> float:
    """Work normalized by the total flow."""
    if f.total_flow <= 0:
        raise DegenerateFlowError("total flow is zero")
    return f.work / f.total_flow


def _balanced(p: TransportProblem):
    """Pad with a zero-cost dummy source or sink so supply == demand.

    Returns (supplies, demands, cost, dummy_row, dummy_col).
    """
    a, b, c = p.supplies.copy(), p.demands.copy(), p.cost.copy()
    sa, sb = a.sum(), b.sum()
    if sa > sb:
        b = np.append(b, sa - sb)
        c = np.hstack([c, np.zeros((a.size, 1))])
        return a, b, c, False, True
    if sb > sa:
        a = np.append(a, sb - sa)
        c = np.vstack([c, np.zeros((1, b.size))])
        return a, b, c, True, False
    return a, b, c, False, False


def _vogel_basis(a, b, c):
    """Vogel's approximation: returns an initial spanning-tree basis.

    Works on already-perturbed supplies/demands so allocations are
    strictly positive and the basis comes out with m + n - 1 cells.
    """
    m, n = c.shape
    a = a.copy()
    b = b.copy()
    rows = list(range(m))
    cols = list(range(n))
    basis = []

    def penalty(costs):
        if len(costs) == 1:
            return costs[0]
        s = sorted(costs)
        return s[1] - s[0]

    while rows and cols:
        if len(rows) == 1 and len(cols) == 1:
            i, j = rows[0], cols[0]
        else:
            best = None  # (penalty, is_col, index)
            for i in rows:
                pen = penalty([c[i, j] for j in cols])
                if best is None or pen > best[0]:
                    best = (pen, 0, i)
            for j in cols:
                pen = penalty([c[i, j] for i in rows])
                if best is None or pen > best[0]:
                    best = (pen, 1, j)
            if best[1] == 0:
                i = best[2]
                j = min(cols, key=lambda jj: (c[i, jj], jj))
            else:
                j = best[2]
                i = min(rows, key=lambda ii: (c[ii, j], ii))
        q = min(a[i], b[j])
        basis.append((i, j))
        a[i] -= q
        b[j] -= q
        # remove exactly one exhausted line, keeping the tree property
        if a[i] <= b[j] and len(rows) > 1:
            rows.remove(i)
        elif len(cols) > 1:
            cols.remove(j)
        else:
            rows.remove(i)
    return basis


def _complete_basis(basis, m, n):
    """Add zero cells (lexicographic order) until the basis spans all nodes."""
    basis = list(dict.fromkeys(basis))
    parent = list(range(m + n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx == ry:
            return False
        parent[rx] = ry
        return True

    kept = []
    for i, j in basis:
        if union(i, m + j):
            kept.append((i, j))
    for i in range(m):
        if len(kept) == m + n - 1:
            break
        for j in range(n):
            if union(i, m + j):
                kept.append((i, j))
                if len(kept) == m + n - 1:
                    break
    return kept


def _tree_flows(basis, a, b, m, n):
    """Solve the flows of a spanning-tree basis by leaf elimination."""
    adj = {k: [] for k in range(m + n)}
    for idx, (i, j) in enumerate(basis):
        adj[i].append((m + j, idx))
        adj[m + j].append((i, idx))
    rem_a = a.astype(np.float64).copy()
    rem_b = b.astype(np.float64).copy()
    deg = {k: len(v) for k, v in adj.items()}
    used = [False] * len(basis)
    flows = np.zeros(len(basis))
    leaves = [k for k in range(m + n) if deg[k] == 1]
    removed = set()
    while leaves:
        k = leaves.pop()
        if k in removed:
            continue
        edge = None
        for other, idx in adj[k]:
            if not used[idx]:
                edge = (other, idx)
                break
        if edge is None:
            removed.add(k)
            continue
        other, idx = edge
        q = rem_a[k] if k < m else rem_b[k - m]
        flows[idx] = q
        used[idx] = True
        if k < m:
            rem_a[k] = 0.0
        else:
            rem_b[k - m] = 0.0
        if other < m:
            rem_a[other] -= q
        else:
            rem_b[other - m] -= q
        removed.add(k)
        deg[other] -= 1
        if deg[other] == 1:
            leaves.append(other)
    return flows


def _potentials(basis, c, m, n):
    """MODI dual variables u, v with u[0] = 0, propagated over the tree."""
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    adj = {k: [] for k in range(m + n)}
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    u[0] = 0.0
    stack = [0]
    seen = {0}
    while stack:
        k = stack.pop()
        for other in adj[k]:
            if other in seen:
                continue
            seen.add(other)
            if k < m:
                v[other - m] = c[k, other - m] - u[k]
            else:
                u[other] = c[other, k - m] - v[k - m]
            stack.append(other)
    return u, v


def _find_cycle(basis, entering, m):
    """Unique cycle created by adding `entering` to the spanning tree."""
    adj = {}
    for i, j in basis:
        adj.setdefault(i, []).append(m + j)
        adj.setdefault(m + j, []).append(i)
    start, goal = entering[0], m + entering[1]
    # path from start to goal through the tree
    parent = {start: None}
    stack = [start]
    while stack:
        k = stack.pop()
        if k == goal:
            break
        for other in adj.get(k, []):
            if other not in parent:
                parent[other] = k
                stack.append(other)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()  # start ... goal
    cycle = [entering]
    for x, y in zip(path, path[1:]):
        if x < m:
            cycle.append((x, y - m))
        else:
            cycle.append((y, x - m))
    return cycle  # alternating +,-,+,- starting at entering


def solve(p: TransportProblem) -> FlowMatrix:
    """Optimal flow for a transportation problem.

    Unbalanced instances are padded with a zero-cost dummy node, solved
    as a balanced problem, and stripped. Degeneracy is handled by
    perturbing supplies during pivoting only; the reported flow is
    reconstructed from the final basis with the exact inputs.
    """
    a0, b0, c, dummy_row, dummy_col = _balanced(p)
    m, n = c.shape
    if m == 1 or n == 1:
        # basis is forced; no pivoting needed
        if m == 1:
            flow = b0.reshape(1, n).copy()
        else:
            flow = a0.reshape(m, 1).copy()
        basis = None
    else:
        eps = 1e-12 * (np.arange(m) + 1.0)
        a = a0 + eps
        b = b0.copy()
        b[-1] += eps.sum()
        basis = _complete_basis(_vogel_basis(a, b, c), m, n)
        flows = _tree_flows(basis, a, b, m, n)
        for _ in range(10000):
            u, v = _potentials(basis, c, m, n)
            reduced = c - u[:, None] - v[None, :]
            in_basis = np.zeros((m, n), dtype=bool)
            for i, j in basis:
                in_basis[i, j] = True
            reduced[in_basis] = 0.0
            best = None
            for i in range(m):
                for j in range(n):
                    if not in_basis[i, j] and reduced[i, j] < -_REDUCED_COST_TOL:
                        if best is None or reduced[i, j] < reduced[best]:
                            best = (i, j)
            if best is None:
                break
            cycle = _find_cycle(basis, best, m)
            pos = {cell: k for k, cell in enumerate(basis)}
            minus = cycle[1::2]
            theta = min(flows[pos[cell]] for cell in minus)
            leaving = min(
                (cell for cell in minus if flows[pos[cell]] <= theta + 0.0), key=lambda c_: c_
            )
            for k, cell in enumerate(cycle):
                if cell == best:
                    continue
                flows[pos[cell]] += theta if k % 2 == 0 else -theta
            li = pos[leaving]
            basis[li] = best
            flows[li] = theta
        else:
            raise RuntimeError("transportation simplex failed to converge")
        # rebuild the basic flow from the unperturbed inputs
        exact = _tree_flows(basis, a0, b0, m, n)
        flow = np.zeros((m, n))
        for (i, j), q in zip(basis, exact):
            flow[i, j] = max(q, 0.0)
    if dummy_col:
        flow = flow[:, :-1]
    if dummy_row:
        flow = flow[:-1, :]
    work = float((flow * p.cost).sum())
    return FlowMatrix(flow=flow, work=work, total_flow=float(flow.sum()))


# ---------------------------------------------------------------------------
# brute-force oracle: enumerate every spanning-tree basis

_tree_cache: dict[tuple[int, int], tuple] = {}


def _tree_bases(m, n):
    """All spanning-tree bases of K_{m,n}, with precomputed inverse maps.

    Returns (edge_index_array [T, m+n-1], inverse tensors [T, K, K]) so an
    instance's basic flows are a single batched matmul away.
    """
    key = (m, n)
    if key in _tree_cache:
        return _tree_cache[key]
    k = m + n - 1
    edges = [(i, j) for i in range(m) for j in range(n)]
    trees = []
    for combo in combinations(range(len(edges)), k):
        parent = list(range(m + n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        ok = True
        for e in combo:
            i, j = edges[e]
            ri, rj = find(i), find(m + j)
            if ri == rj:
                ok = False
                break
            parent[ri] = rj
        if ok:
            trees.append(combo)
    t = len(trees)
    mats = np.zeros((t, k, k))
    idx = np.zeros((t, k), dtype=np.int64)
    for ti, combo in enumerate(trees):
        # rows: supply balance for every source, demand balance for all
        # sinks but the last (redundant under exact balance)
        for col, e in enumerate(combo):
            i, j = edges[e]
            mats[ti, i, col] = 1.0
            if j < n - 1:
                mats[ti, m + j, col] = 1.0
            idx[ti, col] = e
    inv = np.linalg.inv(mats)
    _tree_cache[key] = (idx, inv)
    return idx, inv


def oracle_solve(p: TransportProblem) -> FlowMatrix:
    """Reference solver: minimum-work basic feasible solution by enumeration.

    Limited to M, N <= 4; intended for tests only.
    """
    if p.m > _ORACLE_MAX or p.n > _ORACLE_MAX:
        raise ValueError(f"oracle_solve limited to {_ORACLE_MAX}x{_ORACLE_MAX} problems")
    a, b, c, dummy_row, dummy_col = _balanced(p)
    m, n = c.shape
    idx, inv = _tree_bases(m, n)
    rhs = np.concatenate([a, b[:-1]])
    flows = inv @ rhs  # [T, K]
    feasible = (flows >= -1e-9).all(axis=1)
    if not feasible.any():
        raise RuntimeError("no feasible basis found")
    costs = c.reshape(-1)[idx]  # [T, K]
    works = np.where(feasible, (flows * costs).sum(axis=1), np.inf)
    best = int(np.argmin(works))
    flow = np.zeros(m * n)
    np.add.at(flow, idx[best], np.maximum(flows[best], 0.0))
    flow = flow.reshape(m, n)
    if dummy_col:
        flow = flow[:, :-1]
    if dummy_row:
        flow = flow[:-1, :]
    work = float((flow * p.cost).sum())
    return FlowMatrix(flow=flow, work=work, total_flow=float(flow.sum()))
