"""Dense two-phase primal simplex for ``max c^T x  s.t.  A x <= b, x >= 0``.

Bland's rule (lowest-index entering column, lowest-index leaving variable on
ratio ties) prevents cycling and makes the returned vertex deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from powerdp.errors import InfeasibleError

PIVOT_TOL = 1e-12


class UnboundedError(Exception):
    pass


@dataclass
class SimplexResult:
    x: np.ndarray
    objective: float
    iterations: int


def _pivot(tab: np.ndarray, row: int, col: int) -> None:
    tab[row] /= tab[row, col]
    factors = tab[:, col].copy()
    factors[row] = 0.0
    tab -= np.outer(factors, tab[row])


def _iterate(tab, cost, basis, allowed, max_iter):
    """Run pivots until no allowed column improves ``cost``; returns iteration count."""
    rhs_col = tab.shape[1] - 1
    for it in range(max_iter):
        reduced = cost[basis] @ tab[:, :rhs_col] - cost
        scale = 1.0 + np.abs(cost).max(initial=0.0)
        entering = None
        for j in allowed:
            if reduced[j] < -PIVOT_TOL * scale:
                entering = j
                break
        if entering is None:
            return it
        col = tab[:, entering]
        pos = col > PIVOT_TOL
        if not pos.any():
            raise UnboundedError("objective is unbounded above")
        ratios = np.full(col.shape, np.inf)
        ratios[pos] = tab[pos, rhs_col] / col[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + PIVOT_TOL * (1.0 + abs(best)))
        leave = min(ties, key=lambda r: basis[r])
        _pivot(tab, leave, entering)
        basis[leave] = entering
    raise RuntimeError(f"simplex did not terminate in {max_iter} pivots")


def simplex_max(c, a_ub, b_ub, max_iter: int = 10_000) -> SimplexResult:
    """Maximize ``c @ x`` subject to ``a_ub @ x <= b_ub`` and ``x >= 0``.

    Raises:
        InfeasibleError: no x >= 0 satisfies the constraints.
        UnboundedError: the objective has no finite supremum.
    """
    c = np.asarray(c, dtype=float)
    a = np.atleast_2d(np.asarray(a_ub, dtype=float)).reshape(-1, c.size)
    b = np.asarray(b_ub, dtype=float).reshape(-1)
    m, n = a.shape
    if m == 0:
        if np.any(c > 0):
            raise UnboundedError("objective is unbounded above")
        return SimplexResult(np.zeros(n), 0.0, 0)

    neg = b < 0
    n_art = int(neg.sum())
    width = n + m + n_art
    tab = np.zeros((m, width + 1))
    tab[:, :n] = a
    tab[np.arange(m), n + np.arange(m)] = 1.0
    tab[:, -1] = b
    tab[neg] *= -1.0
    basis = list(n + np.arange(m))
    art_cols = n + m + np.arange(n_art)
    for col, row in zip(art_cols, np.flatnonzero(neg)):
        tab[row, col] = 1.0
        basis[row] = int(col)

    iterations = 0
    if n_art:
        cost1 = np.zeros(width)
        cost1[art_cols] = -1.0
        iterations += _iterate(tab, cost1, basis, range(width), max_iter)
        infeas = -cost1[basis] @ tab[:, -1]
        if infeas > 1e-9 * (1.0 + np.abs(b).max()):
            raise InfeasibleError(f"constraints are infeasible (phase-1 residual {infeas:.3e})")
        # drive zero-level artificials out of the basis, dropping redundant rows
        keep = []
        for r in range(m):
            if basis[r] >= n + m:
                cand = np.flatnonzero(np.abs(tab[r, : n + m]) > PIVOT_TOL)
                if cand.size == 0:
                    continue
                _pivot(tab, r, int(cand[0]))
                basis[r] = int(cand[0])
            keep.append(r)
        tab = np.delete(tab[keep], art_cols, axis=1)
        basis = [basis[r] for r in keep]

    cost2 = np.zeros(n + m)
    cost2[:n] = c
    iterations += _iterate(tab, cost2, basis, range(n + m), max_iter)
    sol = np.zeros(n + m)
    sol[basis] = tab[:, -1]
    x = sol[:n]
    return SimplexResult(x, float(c @ x), iterations)
