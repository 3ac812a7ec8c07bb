"""Independent reference computations used by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np

from exante.solver import LinearProgram


def enumerate_vertices(lp: LinearProgram, tol: float = 1e-9) -> float | None:
    """Best objective over all basic feasible points (None if infeasible).

    Every constraint row and finite bound is a candidate hyperplane; each
    choice of ``n`` independent ones is solved directly.
    """
    n = lp.n
    planes, rhs = [], []
    for a, b in zip(lp.A, lp.rhs):
        planes.append(a)
        rhs.append(b)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        if math.isfinite(lp.lower[j]):
            planes.append(e)
            rhs.append(lp.lower[j])
        if math.isfinite(lp.upper[j]):
            planes.append(e)
            rhs.append(lp.upper[j])
    planes = np.array(planes)
    rhs = np.array(rhs)
    best = None
    for combo in itertools.combinations(range(len(planes)), n):
        M = planes[list(combo)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, rhs[list(combo)])
        if lp.max_violation(x) > tol:
            continue
        val = float(lp.objective @ x)
        if best is None or val > best:
            best = val
    return best


def exact_break_cdf(policies, probs, wands: int) -> list[np.ndarray]:
    """Distribution of the broken-wand count by forward enumeration of paths.

    ``policies[i]`` gives the open probability as a function of the realized
    count; each opened box breaks a wand with probability ``probs[i]``.
    Returns the CDF before every box.
    """
    dist = {0: 1.0}
    out = []
    for pol, p in zip(policies, probs):
        cdf = np.cumsum([dist.get(w, 0.0) for w in range(wands + 1)])
        out.append(cdf)
        nxt: dict[int, float] = {}
        for w, mass in dist.items():
            o = pol.open_prob(w)
            nxt[w + 1] = nxt.get(w + 1, 0.0) + mass * o * p
            nxt[w] = nxt.get(w, 0.0) + mass * (1 - o * p)
        dist = nxt
    out.append(np.cumsum([dist.get(w, 0.0) for w in range(wands + 1)]))
    return out


def dense_revenue_points(d, budget: float = math.inf, n: int = 20001):
    """(q, revenue) on a dense linear-plus-geometric price grid."""
    lo = max(d.lower, d.upper * 1e-6)
    prices = np.unique(np.concatenate([
        np.linspace(lo, d.upper, n),
        np.geomspace(lo, d.upper, n),
        np.array(d.atoms(), dtype=float),
    ]))
    prices = prices[prices > 0]
    sale = 1.0 - np.asarray(d.cdf_left(prices), dtype=float)
    if math.isinf(budget):
        return sale, prices * sale
    return sale * np.minimum(1.0, budget / prices), np.minimum(prices, budget) * sale


def hull_value(qs, rs, at) -> np.ndarray:
    """Least concave majorant of the points plus (0,0), (1,0), evaluated at ``at``.

    Computed with an O(n) stack over x-sorted points (separate from the
    library routine: ties resolved by a full re-sort and strict checks).
    """
    pts = sorted(set(zip(np.round(qs, 15).tolist(), rs.tolist())) | {(0.0, 0.0), (1.0, 0.0)})
    best: dict[float, float] = {}
    for x, y in pts:
        best[x] = max(best.get(x, -np.inf), y)
    xs = sorted(best)
    stack: list[tuple[float, float]] = []
    for x in xs:
        y = best[x]
        while len(stack) >= 2:
            (x1, y1), (x2, y2) = stack[-2], stack[-1]
            if (y2 - y1) * (x - x1) <= (y - y1) * (x2 - x1):
                stack.pop()
            else:
                break
        stack.append((x, y))
    hx, hy = zip(*stack)
    return np.interp(at, hx, hy)


def brute_force_fixed_price(type_table, item: int = 0) -> float:
    """Best single posted price for one item over all type values."""
    best = 0.0
    for _, v in type_table:
        p = v[item]
        rev = sum(f for f, w in type_table if w[item] >= p) * p
        best = max(best, rev)
    return best
