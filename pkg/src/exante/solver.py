"""Dense simplex LP solver and structured concave maximizers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "PiecewiseLinear",
    "upper_hull",
    "greedy_waterfill",
    "LinearProgram",
    "LpSolution",
    "LpBuilder",
    "solve_lp",
    "SolverError",
]

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-7


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class PiecewiseLinear:
    """Piecewise-linear function through ``(xs[k], ys[k])``, xs increasing."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xs", np.asarray(self.xs, dtype=float))
        object.__setattr__(self, "ys", np.asarray(self.ys, dtype=float))
        if len(self.xs) < 1 or len(self.xs) != len(self.ys):
            raise SolverError("piecewise-linear function needs matching, nonempty xs/ys")
        if np.any(np.diff(self.xs) <= 0):
            raise SolverError("breakpoints must be strictly increasing")

    def __call__(self, x):
        out = np.interp(x, self.xs, self.ys)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def slopes(self) -> np.ndarray:
        # subnormal gaps give +-inf, which keeps the concavity test meaningful
        with np.errstate(over="ignore"):
            return np.diff(self.ys) / np.diff(self.xs)

    @property
    def intercepts(self) -> np.ndarray:
        return self.ys[:-1] - self.slopes * self.xs[:-1]

    def is_concave(self, tol: float = 1e-9) -> bool:
        s = self.slopes
        return bool(np.all(np.diff(s) <= tol * np.maximum(1.0, np.abs(s[:-1]))))

    def argmax(self) -> float:
        """Leftmost maximizer."""
        top = self.ys.max()
        return float(self.xs[int(np.argmax(self.ys >= top - 1e-15))])


def upper_hull(points: Sequence[tuple[float, float]]) -> PiecewiseLinear:
    """Upper concave envelope by a monotone-chain sweep.

    Duplicate x values keep the largest y; collinear interior points are
    dropped.  Input order is irrelevant.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise SolverError("upper_hull needs at least two points")
    order = np.lexsort((-pts[:, 1], pts[:, 0]))
    pts = pts[order]
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = pts[1:, 0] != pts[:-1, 0]
    pts = pts[keep]

    hull: list[tuple[float, float]] = []
    for x, y in pts.tolist():
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # pop the middle point unless it lies strictly above the chord
            if (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append((x, y))
    xs, ys = zip(*hull)
    return PiecewiseLinear(np.array(xs), np.array(ys))


def greedy_waterfill(curves: Sequence[PiecewiseLinear], caps: Sequence[float],
                     total_cap: float) -> np.ndarray:
    """Maximize ``sum_j curve_j(q_j)`` s.t. ``q_j <= cap_j``, ``sum q_j <= total_cap``.

    Curves must be concave with ``curve(0) = 0``.  Segments are consumed in
    globally nonincreasing slope order; nonpositive slopes are never used.
    """
    caps = np.asarray(caps, dtype=float)
    if len(caps) != len(curves):
        raise SolverError("one cap per curve required")
    segs = []
    for j, c in enumerate(curves):
        if abs(c(0.0)) > 1e-12 or c.xs[0] > 1e-12:
            raise SolverError(f"curve {j} must start at (0, 0)")
        if not c.is_concave():
            raise SolverError(f"curve {j} is not concave (slopes increase)")
        for k, s in enumerate(c.slopes):
            lo, hi = c.xs[k], min(c.xs[k + 1], caps[j])
            if hi > lo and s > 0:
                segs.append((-s, j, k, hi - lo))
    segs.sort()
    q = np.zeros(len(curves))
    remaining = float(total_cap)
    for _, j, _, length in segs:
        if remaining <= 0:
            break
        take = min(length, remaining)
        q[j] += take
        remaining -= take
    return q


# ---------------------------------------------------------------------------
# Linear programming
# ---------------------------------------------------------------------------

@dataclass
class LinearProgram:
    """maximize ``objective @ x`` subject to rows ``A[r] @ x (rel) rhs[r]``."""

    objective: np.ndarray
    A: np.ndarray
    relations: list[str]
    rhs: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        n = len(self.objective)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if len(self.relations) != len(self.A) or len(self.rhs) != len(self.A):
            raise SolverError("constraint rows, relations and rhs must align")
        if any(r not in ("<=", ">=", "=") for r in self.relations):
            raise SolverError("relations must be '<=', '>=' or '='")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.rhs))
                and np.all(np.isfinite(self.objective))):
            raise SolverError("coefficients must be finite")
        if np.any(self.lower > self.upper):
            raise SolverError("variable bounds require lo <= hi")

    @property
    def n(self) -> int:
        return len(self.objective)

    def max_violation(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        v = 0.0
        if len(self.A):
            lhs = self.A @ x
            for val, rel, b in zip(lhs, self.relations, self.rhs):
                if rel == "<=":
                    v = max(v, val - b)
                elif rel == ">=":
                    v = max(v, b - val)
                else:
                    v = max(v, abs(val - b))
        v = max(v, float(np.max(self.lower - x, initial=0.0)))
        v = max(v, float(np.max(x - self.upper, initial=0.0)))
        return v


@dataclass
class LpSolution:
    status: str
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective_value: float = math.nan

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class LpBuilder:
    """Incremental LP assembly with named-free integer variable handles."""

    def __init__(self):
        self.obj: list[float] = []
        self.lo: list[float] = []
        self.hi: list[float] = []
        self.rows: list[dict[int, float]] = []
        self.rels: list[str] = []
        self.rhs: list[float] = []

    def var(self, lo=0.0, hi=math.inf, obj=0.0) -> int:
        self.obj.append(obj)
        self.lo.append(lo)
        self.hi.append(hi)
        return len(self.obj) - 1

    def row(self, coeffs: dict[int, float], rel: str, rhs: float) -> None:
        self.rows.append(dict(coeffs))
        self.rels.append(rel)
        self.rhs.append(rhs)

    def build(self) -> LinearProgram:
        n = len(self.obj)
        A = np.zeros((len(self.rows), n))
        for r, coeffs in enumerate(self.rows):
            for j, a in coeffs.items():
                A[r, j] += a
        return LinearProgram(np.array(self.obj), A, list(self.rels), np.array(self.rhs),
                             np.array(self.lo), np.array(self.hi))


def _to_standard(lp: LinearProgram):
    """Rewrite as ``max c'y, G y <= h, y >= 0`` with ``x = T y + t``."""
    n = lp.n
    cols = []  # (original index, sign)
    shift = np.zeros(n)
    extra_rows = []
    for j in range(n):
        lo, hi = lp.lower[j], lp.upper[j]
        if math.isfinite(lo):
            shift[j] = lo
            cols.append((j, 1.0))
            if math.isfinite(hi):
                extra_rows.append((len(cols) - 1, hi - lo))
        elif math.isfinite(hi):
            shift[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    T = np.zeros((n, len(cols)))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s
    c = lp.objective @ T
    base = lp.A @ shift if len(lp.A) else np.zeros(0)
    AT = lp.A @ T if len(lp.A) else np.zeros((0, len(cols)))
    G, h = [], []
    for r, rel in enumerate(lp.relations):
        b = lp.rhs[r] - base[r]
        if rel in ("<=", "="):
            G.append(AT[r])
            h.append(b)
        if rel in (">=", "="):
            G.append(-AT[r])
            h.append(-b)
    for k, width in extra_rows:
        e = np.zeros(len(cols))
        e[k] = 1.0
        G.append(e)
        h.append(width)
    G = np.array(G).reshape(-1, len(cols))
    return c, G, np.array(h), T, shift


class _Tableau:
    def __init__(self, G, h):
        m, n = G.shape
        neg = h < 0
        n_art = int(neg.sum())
        self.n_struct = n
        self.n_slack = m
        width = n + m + n_art
        T = np.zeros((m + 1, width + 1))
        T[:m, :n] = G
        T[:m, n:n + m] = np.eye(m)
        T[:m, -1] = h
        T[:m][neg] *= -1.0
        basis = list(range(n, n + m))
        art_cols = []
        a = n + m
        for r in np.nonzero(neg)[0]:
            T[r, a] = 1.0
            basis[r] = a
            art_cols.append(a)
            a += 1
        self.T = T
        self.basis = basis
        self.art_cols = art_cols
        self.blocked = np.zeros(width, dtype=bool)

    def set_objective(self, cost):
        """Install ``max cost @ z`` as the bottom row (reduced-cost form)."""
        T = self.T
        T[-1, :] = 0.0
        T[-1, :len(cost)] = -cost
        for r, b in enumerate(self.basis):
            if T[-1, b] != 0.0:
                T[-1, :] -= T[-1, b] * T[r, :]

    def pivot(self, r, c):
        T = self.T
        T[r, :] /= T[r, c]
        col = T[:, c].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r, :])
        self.basis[r] = c

    def run(self, max_iter=50000):
        T = self.T
        m = T.shape[0] - 1
        degenerate_streak = 0
        bland = False
        for _ in range(max_iter):
            red = T[-1, :-1].copy()
            red[self.blocked] = 0.0
            cand = np.nonzero(red < -PIVOT_TOL)[0]
            if len(cand) == 0:
                return "optimal"
            c = int(cand[0]) if bland else int(cand[np.argmin(red[cand])])
            col = T[:m, c]
            pos = np.nonzero(col > PIVOT_TOL)[0]
            if len(pos) == 0:
                return "unbounded"
            ratios = T[pos, -1] / col[pos]
            best = ratios.min()
            ties = pos[ratios <= best + 1e-12]
            # least-index leaving rule among ties
            r = int(min(ties, key=lambda i: self.basis[i]))
            if best <= 1e-12:
                degenerate_streak += 1
                if degenerate_streak > 20:
                    bland = True
            else:
                degenerate_streak = 0
            self.pivot(r, c)
        raise SolverError("simplex iteration limit reached")


def solve_lp(lp: LinearProgram) -> LpSolution:
    """Two-phase dense simplex; Dantzig pricing, switching to Bland's rule on
    degenerate stalls.  Returns a status rather than raising."""
    c, G, h, Tmap, shift = _to_standard(lp)
    n = len(c)
    if len(G) == 0:
        if np.any(c > PIVOT_TOL):
            return LpSolution("unbounded")
        x = shift.copy()
        return LpSolution("optimal", x, float(lp.objective @ x))
    tab = _Tableau(G, h)
    width = tab.T.shape[1] - 1
    if tab.art_cols:
        cost = np.zeros(width)
        cost[tab.art_cols] = -1.0
        tab.set_objective(cost)
        tab.run()
        if -tab.T[-1, -1] > FEAS_TOL * max(1.0, np.abs(h).max()):
            return LpSolution("infeasible")
        art = set(tab.art_cols)
        for r, b in enumerate(tab.basis):
            if b in art:
                row = tab.T[r, :tab.n_struct + tab.n_slack]
                nz = np.nonzero(np.abs(row) > PIVOT_TOL)[0]
                if len(nz):
                    tab.pivot(r, int(nz[0]))
        tab.blocked[tab.art_cols] = True
    cost = np.zeros(width)
    cost[:n] = c
    tab.set_objective(cost)
    status = tab.run()
    if status != "optimal":
        return LpSolution(status)
    y = np.zeros(width)
    for r, b in enumerate(tab.basis):
        y[b] = tab.T[r, -1]
    x = Tmap @ y[:n] + shift
    return LpSolution("optimal", x, float(lp.objective @ x))
