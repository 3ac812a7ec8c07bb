"""Multi-buyer layer: the relaxed benchmark program, pre- and post-rounding,
and the multi-unit demand transformation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .magician import BoxPolicy, MagicianConfig, create_magician, gamma_lower_bound, offer_box, realize_open
from .single_buyer import (
    BuildResult,
    BuyerModel,
    Matroid,
    MechanismError,
    add_correlated_block,
    build,
    bundle_value,
    sample_outcome,
)
from .solver import LpBuilder, PiecewiseLinear, SolverError, solve_lp

__all__ = [
    "MarketSpec",
    "ExAnteMatrix",
    "Outcome",
    "MarketError",
    "solve_opt_bar",
    "magician_plan",
    "pre_rounding",
    "post_rounding",
    "transform_multi_unit",
    "round_robin_bins",
    "collapse_allocation",
]

CUT_TOL = 1e-10
MAX_CUT_ROUNDS = 200


class MarketError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MarketSpec:
    items: tuple  # ((item id, supply), ...)
    buyers: tuple
    objective: str = "revenue"
    gamma: float | None = None
    item_origin: tuple | None = None  # bin -> original item index, after transformation

    def __post_init__(self):
        items = tuple((str(i), int(k)) for i, k in self.items)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "buyers", tuple(self.buyers))
        if not items:
            raise MarketError("market needs at least one item")
        for item_id, k in items:
            if k < 1:
                raise MarketError(f"item {item_id}: supply >= 1 required")
        if self.objective not in ("revenue", "welfare"):
            raise MarketError(f"unknown objective {self.objective!r}")
        for i, b in enumerate(self.buyers):
            if b.m != len(items):
                raise MarketError(f"buyer {i}: has {b.m} items, market has {len(items)}")
            if self.objective == "welfare" and b.kind != "correlated_matroid":
                raise MarketError(f"buyer {i}: welfare objective needs a correlated_matroid buyer")
        bound = gamma_lower_bound(int(self.supplies.min()))
        if self.gamma is None:
            object.__setattr__(self, "gamma", bound)
        elif not (0.0 <= self.gamma <= bound + 1e-12):
            raise MarketError(f"gamma {self.gamma} exceeds the safe bound {bound:.6f}")

    @property
    def supplies(self) -> np.ndarray:
        return np.array([k for _, k in self.items], dtype=int)

    @property
    def n(self) -> int:
        return len(self.buyers)

    @property
    def m(self) -> int:
        return len(self.items)

    @property
    def alpha_min(self) -> float:
        return min((b.alpha for b in self.buyers), default=1.0)


@dataclass(frozen=True)
class ExAnteMatrix:
    q_bar: np.ndarray

    def check(self, supplies, tol: float = 1e-7) -> None:
        cols = self.q_bar.sum(axis=0)
        bad = np.nonzero(cols > np.asarray(supplies) + tol)[0]
        if len(bad):
            raise MarketError(f"ex-ante supply exceeded for items {bad.tolist()}")


@dataclass
class Outcome:
    allocations: np.ndarray  # n x m, 0/1
    payments: np.ndarray
    counts: np.ndarray
    opened: np.ndarray  # n x m, box-open indicators
    welfare: float = 0.0
    fractional: list = field(default_factory=list)  # (buyer, item, probability)
    violations: int = 0
    tentative: np.ndarray | None = None  # post-rounding only
    tentative_payments: np.ndarray | None = None

    @property
    def revenue(self) -> float:
        return float(self.payments.sum())


# ---------------------------------------------------------------------------
# Relaxed benchmark program
# ---------------------------------------------------------------------------

@dataclass
class _HullVar:
    curve: PiecewiseLinear
    q: int
    z: int
    cuts: set = field(default_factory=set)


def _add_cut(lp: LpBuilder, hv: _HullVar, seg: int) -> None:
    if seg in hv.cuts:
        return
    hv.cuts.add(seg)
    a = hv.curve.slopes[seg]
    b = hv.curve.intercepts[seg]
    lp.row({hv.z: 1.0, hv.q: -a}, "<=", float(b))


def _segments_at(curve: PiecewiseLinear, q: float) -> list[int]:
    xs = curve.xs
    nseg = len(xs) - 1
    k = int(np.searchsorted(xs, q, side="right")) - 1
    k = min(max(k, 0), nseg - 1)
    out = [k]
    if abs(xs[k] - q) <= 1e-12 and k > 0:
        out.append(k - 1)
    return out


def solve_opt_bar(market: MarketSpec) -> tuple[ExAnteMatrix, float]:
    """Maximize ``sum_i R_i(q_bar_i)`` subject to ``sum_i q_bar_ij <= k_j``.

    Price-based buyers contribute an epigraph of their revenue hulls; the
    hull rows are generated lazily (only the segments the optimum touches).
    Correlated buyers embed their menu program.
    """
    n, m = market.n, market.m
    if n == 0:
        return ExAnteMatrix(np.zeros((0, m))), 0.0
    lp = LpBuilder()
    qv = [[lp.var(0.0, 1.0) for _ in range(m)] for _ in range(n)]
    hulls: list[_HullVar] = []
    for i, b in enumerate(market.buyers):
        if b.kind == "correlated_matroid":
            add_correlated_block(lp, b, qv[i], market.objective, caps_are_vars=True)
            continue
        weight = 0.0 if b.kind == "additive_budgeted" else 1.0
        zs = []
        for j, c in enumerate(b.curves):
            hv = _HullVar(c.closure, qv[i][j], lp.var(0.0, math.inf, obj=weight))
            hulls.append(hv)
            zs.append(hv.z)
            peak = int(np.argmax(c.closure.xs >= c.peak - 1e-15))
            for seg in {0, max(peak - 1, 0), min(peak, len(c.closure.xs) - 2)}:
                _add_cut(lp, hv, seg)
        if b.kind == "unit_demand":
            lp.row({qv[i][j]: 1.0 for j in range(m)}, "<=", 1.0)
        elif b.kind == "additive_budgeted":
            tot = lp.var(0.0, b.budget, obj=1.0)
            row = {z: -1.0 for z in zs}
            row[tot] = 1.0
            lp.row(row, "<=", 0.0)
    for j, (_, k) in enumerate(market.items):
        lp.row({qv[i][j]: 1.0 for i in range(n)}, "<=", float(k))

    for _ in range(MAX_CUT_ROUNDS):
        sol = solve_lp(lp.build())
        if not sol.optimal:
            raise SolverError(f"benchmark program returned status {sol.status}")
        added = 0
        for hv in hulls:
            q, z = sol.values[hv.q], sol.values[hv.z]
            if z > hv.curve(q) + CUT_TOL:
                before = len(hv.cuts)
                for seg in _segments_at(hv.curve, q):
                    _add_cut(lp, hv, seg)
                added += len(hv.cuts) - before
        if added == 0:
            break
    else:
        raise SolverError("cut generation did not converge")

    q_bar = np.clip(np.array([[sol.values[h] for h in row] for row in qv]), 0.0, 1.0)
    # shave float slack so every column stays within supply
    cols = q_bar.sum(axis=0)
    over = cols > market.supplies
    if np.any(over):
        q_bar[:, over] *= market.supplies[over] / cols[over]
    mat = ExAnteMatrix(q_bar)
    mat.check(market.supplies)
    return mat, float(sol.objective_value)


# ---------------------------------------------------------------------------
# Rounding mechanisms
# ---------------------------------------------------------------------------

def magician_plan(gamma: float, supplies, boxes: np.ndarray, order) -> list[list[BoxPolicy]]:
    """Per-item magician policies for boxes presented in ``order``.

    The ex-ante state only depends on the presented probabilities, so the
    whole plan can be computed once and reused across trials.
    ``plan[i][j]`` is the policy buyer ``i`` meets at item ``j``.
    """
    n, m = boxes.shape
    plan: list[list[BoxPolicy | None]] = [[None] * m for _ in range(n)]
    for j in range(m):
        state = create_magician(MagicianConfig(gamma, int(supplies[j])))
        for i in order:
            plan[i][j] = offer_box(state, float(min(max(boxes[i, j], 0.0), 1.0)))
    return plan


def _empty_outcome(n: int, m: int) -> Outcome:
    return Outcome(np.zeros((n, m), dtype=int), np.zeros(n), np.zeros(m, dtype=int),
                   np.zeros((n, m), dtype=bool))


def _assign(out: Outcome, market: MarketSpec, i: int, items, payment: float, buyer_type) -> None:
    supplies = market.supplies
    for j in items:
        out.allocations[i, j] = 1
        out.counts[j] += 1
        if out.counts[j] > supplies[j]:
            out.violations += 1
    out.payments[i] = payment
    out.welfare += bundle_value(market.buyers[i], buyer_type, items)


def pre_rounding(market: MarketSpec, q_bar: ExAnteMatrix, order, types, rng: np.random.Generator,
                 plan=None, cache: dict | None = None) -> Outcome:
    """Serve buyers in ``order``; a buyer's mechanism only sees the items whose
    magician opened its box.

    ``types[i]`` is a valuation vector or a type id.  ``plan`` and ``cache``
    (built mechanisms keyed by buyer and open set) may be shared across
    trials with the same ``q_bar`` and ``order``.
    """
    n, m = market.n, market.m
    qb = q_bar.q_bar
    if plan is None:
        plan = magician_plan(market.gamma, market.supplies, qb, order)
    if cache is None:
        cache = {}
    out = _empty_outcome(n, m)
    broken = np.zeros(m, dtype=int)
    for i in order:
        coins = rng.random(m)
        opened = np.array([realize_open(plan[i][j], int(broken[j]), coins[j]) for j in range(m)])
        out.opened[i] = opened
        key = (i, opened.tobytes())
        if key not in cache:
            cache[key] = build(market.buyers[i], qb[i] * opened, market.objective)
        res: BuildResult = cache[key]
        buyer = market.buyers[i]
        so = sample_outcome(res.policy, types[i], buyer.budget, rng)
        _assign(out, market, i, so.items, so.payment, types[i])
        if so.fractional is not None:
            out.fractional.append((i, *so.fractional))
        for j in so.items:
            broken[j] += 1
    return out


def post_rounding(market: MarketSpec, q_bar: ExAnteMatrix, types, rng: np.random.Generator,
                  builds: list | None = None, plan=None) -> Outcome:
    """Run every buyer's mechanism independently, then keep each tentative unit
    only if the item's magician opens that buyer's box.  Payments scale by gamma.
    """
    n, m = market.n, market.m
    if builds is None:
        builds = [build(b, q_bar.q_bar[i], market.objective) for i, b in enumerate(market.buyers)]
    for i, res in enumerate(builds):
        if res.exact_rule is None:
            raise MechanismError(f"buyer {i}: mechanism has no exact allocation rule")
    if plan is None:
        exact = np.array([r.exact_rule for r in builds]).reshape(n, m)
        plan = magician_plan(market.gamma, market.supplies, exact, range(n))
    tentative = [sample_outcome(res.policy, types[i], market.buyers[i].budget, rng)
                 for i, res in enumerate(builds)]
    out = _empty_outcome(n, m)
    out.tentative = np.zeros((n, m), dtype=int)
    out.tentative_payments = np.array([t.payment for t in tentative], dtype=float)
    for i, t in enumerate(tentative):
        out.tentative[i, list(t.items)] = 1
    broken = np.zeros(m, dtype=int)
    for i in range(n):
        coins = rng.random(m)
        kept = set()
        for j in range(m):
            opened = realize_open(plan[i][j], int(broken[j]), coins[j])
            out.opened[i, j] = opened
            if opened and j in tentative[i].items:
                kept.add(j)
                broken[j] += 1
        _assign(out, market, i, kept, market.gamma * tentative[i].payment, types[i])
        if tentative[i].fractional is not None:
            out.fractional.append((i, *tentative[i].fractional))
    return out


# ---------------------------------------------------------------------------
# Multi-unit demand
# ---------------------------------------------------------------------------

def _bin_sizes(supply: int, k: int) -> list[int]:
    c = supply // k
    base, extra = divmod(supply, c)
    return [base + 1] * extra + [base] * (c - extra)


def transform_multi_unit(market: MarketSpec, k: int) -> MarketSpec:
    """Split each item's units into ``floor(k_j/k)`` near-equal bins, each a new item.

    Bins of one item are perfect substitutes, so only correlated buyers are
    accepted; their valuations are copied to every bin and each matroid part
    is widened to cover all bins of its items.
    """
    if k < 1:
        raise MarketError("demand divisor must be >= 1")
    items, origin = [], []
    for j, (item_id, supply) in enumerate(market.items):
        if supply < k:
            raise MarketError(f"item {item_id}: supply {supply} < demand divisor {k}")
        for b, size in enumerate(_bin_sizes(supply, k)):
            items.append((f"{item_id}#{b}", size))
            origin.append(j)
    bins_of = {j: [b for b, o in enumerate(origin) if o == j] for j in range(market.m)}

    buyers = []
    for i, buyer in enumerate(market.buyers):
        if buyer.kind != "correlated_matroid":
            raise MarketError(f"buyer {i}: multi-unit transformation needs a correlated_matroid buyer")
        table = tuple((f, tuple(v[o] for o in origin)) for f, v in buyer.type_table)
        mat = buyer.matroid
        if mat.kind == "partition":
            parts = tuple(tuple(b for j in p for b in bins_of[j]) for p in mat.parts)
            mat = Matroid("partition", parts=parts, capacities=mat.capacities)
        buyers.append(replace(buyer, type_table=table, matroid=mat))

    supplies = [s for _, s in items]
    gamma = min(market.gamma, gamma_lower_bound(min(supplies)))
    return MarketSpec(tuple(items), tuple(buyers), market.objective, gamma, tuple(origin))


def round_robin_bins(counts, sizes) -> list[list[int]]:
    """Map per-buyer unit counts of one item onto its bins.

    Bins are visited largest first in a cycle, so a buyer holding at most
    ``len(sizes)`` units never gets two from the same bin.
    """
    sizes = list(sizes)
    if sum(counts) > sum(sizes):
        raise MarketError("more units requested than the bins hold")
    queue = sorted(range(len(sizes)), key=lambda b: (-sizes[b], b))
    used = [0] * len(sizes)
    out, pos = [], 0
    for c in counts:
        got = []
        for _ in range(c):
            b = queue[pos % len(queue)]
            pos += 1
            used[b] += 1
            if used[b] > sizes[b]:
                raise MarketError("bin capacity exceeded")
            got.append(b)
        out.append(got)
    return out


def collapse_allocation(allocations: np.ndarray, item_origin, m: int) -> np.ndarray:
    """Units of each original item held by each buyer."""
    out = np.zeros((allocations.shape[0], m), dtype=int)
    for b, j in enumerate(item_origin):
        out[:, j] += allocations[:, b]
    return out
