"""Transportation simplex for balanced transport problems.

Vogel's approximation gives the starting basis; MODI potentials price the
non-basic cells. Pricing is most-negative reduced cost until a run of
degenerate pivots, then Bland's smallest-index rule until progress resumes.
The basis is kept as a spanning tree over row nodes 0..m-1 and column nodes
m..m+n-1.
"""
from collections import deque
from dataclasses import dataclass
from typing import List, Set, Tuple

import numpy as np

from utils.errors import NumericalError, ShapeError

SOLVER_VERSION = "transport-simplex/1"
DEGENERATE_STREAK = 25


@dataclass
class SimplexResult:
    flow: np.ndarray
    cost: float
    u: np.ndarray
    v: np.ndarray
    iterations: int

    @property
    def dual_objective(self) -> float:
        return float(self.flow.sum(axis=1) @ self.u + self.flow.sum(axis=0) @ self.v)


def _penalties(masked: np.ndarray, axis: int) -> np.ndarray:
    """Vogel penalty per line: gap between the two cheapest open cells."""
    if masked.shape[axis] >= 2:
        two = np.partition(masked, 1, axis=axis)
        first = np.take(two, 0, axis=axis)
        second = np.take(two, 1, axis=axis)
    else:
        first = np.take(masked, 0, axis=axis)
        second = np.full_like(first, np.inf)
    with np.errstate(invalid="ignore"):
        gap = np.where(np.isinf(second), first, second - first)
    return np.where(np.isinf(first), -np.inf, gap)


def vogel_initial_basis(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Basic feasible solution with exactly m + n - 1 basic cells forming a tree.

    Every allocation closes one line (row or column), the last closes both.
    """
    m, n = cost.shape
    supply = a.astype(np.float64).copy()
    demand = b.astype(np.float64).copy()
    masked = cost.astype(np.float64).copy()
    flow = np.zeros((m, n))
    basis: List[Tuple[int, int]] = []
    rows_open, cols_open = m, n

    while rows_open and cols_open:
        row_pen = _penalties(masked, axis=1)
        col_pen = _penalties(masked, axis=0)
        r_best = int(np.argmax(row_pen))
        c_best = int(np.argmax(col_pen))
        if row_pen[r_best] >= col_pen[c_best]:
            i = r_best
            j = int(np.argmin(masked[i]))
        else:
            j = c_best
            i = int(np.argmin(masked[:, j]))

        q = min(supply[i], demand[j])
        flow[i, j] = q
        basis.append((i, j))
        supply[i] -= q
        demand[j] -= q

        if rows_open == 1 and cols_open == 1:
            break
        if (supply[i] <= demand[j] and rows_open > 1) or cols_open == 1:
            masked[i, :] = np.inf
            rows_open -= 1
        else:
            masked[:, j] = np.inf
            cols_open -= 1
    return flow, basis


class _BasisTree:
    def __init__(self, m: int, n: int, cells: List[Tuple[int, int]]) -> None:
        self.m = m
        self.n = n
        self.adj: List[Set[int]] = [set() for _ in range(m + n)]
        for i, j in cells:
            self.add(i, j)

    def add(self, i: int, j: int) -> None:
        self.adj[i].add(self.m + j)
        self.adj[self.m + j].add(i)

    def remove(self, i: int, j: int) -> None:
        self.adj[i].discard(self.m + j)
        self.adj[self.m + j].discard(i)

    def potentials(self, cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pot = np.full(self.m + self.n, np.nan)
        pot[0] = 0.0
        queue = deque([0])
        while queue:
            node = queue.popleft()
            for nxt in self.adj[node]:
                if not np.isnan(pot[nxt]):
                    continue
                if node < self.m:
                    pot[nxt] = cost[node, nxt - self.m] - pot[node]
                else:
                    pot[nxt] = cost[nxt, node - self.m] - pot[node]
                queue.append(nxt)
        if np.isnan(pot).any():
            raise NumericalError("transport basis is not a spanning tree")
        return pot[: self.m], pot[self.m:]

    def path(self, start: int, goal: int) -> List[int]:
        parent = {start: -1}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            if node == goal:
                break
            for nxt in self.adj[node]:
                if nxt not in parent:
                    parent[nxt] = node
                    queue.append(nxt)
        if goal not in parent:
            raise NumericalError("no tree path between entering row and column")
        out = [goal]
        while out[-1] != start:
            out.append(parent[out[-1]])
        out.reverse()
        return out


def solve_transport(a: np.ndarray, b: np.ndarray, cost: np.ndarray,
                    max_iterations: int = 1_000_000) -> SimplexResult:
    """Exact minimum-cost plan for balanced marginals ``a`` (rows) and ``b`` (columns)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    if a.shape != (m,) or b.shape != (n,):
        raise ShapeError(f"marginals {a.shape}, {b.shape} do not match cost {cost.shape}")

    flow, cells = vogel_initial_basis(a, b, cost)
    tree = _BasisTree(m, n, cells)
    in_basis = np.zeros((m, n), dtype=bool)
    for i, j in cells:
        in_basis[i, j] = True

    tol = 1e-12 * max(1.0, float(np.abs(cost).max(initial=0.0)))
    streak = 0
    iterations = 0
    while True:
        u, v = tree.potentials(cost)
        reduced = cost - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        negative = reduced < -tol
        if not negative.any():
            break
        if iterations >= max_iterations:
            raise NumericalError(f"transport simplex hit the iteration cap ({max_iterations})")
        iterations += 1

        if streak >= DEGENERATE_STREAK:
            flat = int(np.flatnonzero(negative)[0])
        else:
            flat = int(np.argmin(reduced))
        i0, j0 = divmod(flat, n)

        nodes = tree.path(i0, m + j0)
        edges = []
        for k in range(len(nodes) - 1):
            p, q = nodes[k], nodes[k + 1]
            edges.append((p, q - m) if p < m else (q, p - m))
        minus = edges[0::2]
        plus = edges[1::2]

        theta = min(flow[e] for e in minus)
        leaving = min((e for e in minus if flow[e] == theta), key=lambda e: e[0] * n + e[1])

        flow[i0, j0] += theta
        for e in minus:
            flow[e] -= theta
        for e in plus:
            flow[e] += theta
        flow[leaving] = 0.0

        tree.remove(*leaving)
        in_basis[leaving] = False
        tree.add(i0, j0)
        in_basis[i0, j0] = True
        streak = streak + 1 if theta == 0.0 else 0

    u, v = tree.potentials(cost)
    return SimplexResult(flow=flow, cost=float(np.sum(flow * cost)), u=u, v=v, iterations=iterations)
