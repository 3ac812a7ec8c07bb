"""Single-buyer mechanisms subject to an ex-ante allocation cap ``q_bar``.

Four buyer kinds are supported:

* ``budgeted_single_item`` -- one item, public budget; optimal randomized
  posted price (one price or a mix of two).
* ``unit_demand`` -- independent regular values; posted prices pruned by the
  tail recurrence (half of the benchmark).
* ``additive_budgeted`` -- independent additive values sharing one budget;
  independent per-item price mixes.
* ``correlated_matroid`` -- explicit type table and a uniform or partition
  matroid; menu from a linear program.

Every ``build_*`` returns a :class:`BuildResult` whose ``benchmark_value``
is a concave function of ``q_bar``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .distributions import Distribution, RevenueCurve, check_regular, revenue_curve
from .solver import LpBuilder, greedy_waterfill, solve_lp

__all__ = [
    "BuyerModel",
    "Matroid",
    "SinglePrice",
    "TwoPriceMix",
    "PerItemMixes",
    "Menu",
    "BuildResult",
    "SingleBuyerOutcome",
    "MechanismError",
    "KIND_ALPHA",
    "build",
    "benchmark",
    "build_budgeted_single_item",
    "build_unit_demand",
    "tail_select",
    "build_additive_budget",
    "build_correlated_lp",
    "correlated_program",
    "add_correlated_block",
    "matroid_round",
    "sample_outcome",
    "bundle_value",
]

KIND_ALPHA = {
    "budgeted_single_item": 1.0,
    "unit_demand": 0.5,
    "additive_budgeted": 1.0 - 1.0 / math.e,
    "correlated_matroid": 1.0,
}

DEFAULT_EPSILON = 1e-3


class MechanismError(ValueError):
    pass


@dataclass(frozen=True)
class Matroid:
    """Uniform matroid of a given rank, or a partition matroid.

    Items outside every part of a partition matroid are unconstrained.
    """

    kind: str
    rank: int = 1
    parts: tuple = ()
    capacities: tuple = ()

    def __post_init__(self):
        if self.kind == "uniform":
            if self.rank < 0:
                raise MechanismError("matroid rank must be >= 0")
        elif self.kind == "partition":
            parts = tuple(tuple(int(j) for j in p) for p in self.parts)
            object.__setattr__(self, "parts", parts)
            object.__setattr__(self, "capacities", tuple(int(c) for c in self.capacities))
            if len(parts) != len(self.capacities):
                raise MechanismError("partition matroid needs one capacity per part")
            if any(c < 0 for c in self.capacities):
                raise MechanismError("matroid capacities must be >= 0")
            flat = [j for p in parts for j in p]
            if len(flat) != len(set(flat)):
                raise MechanismError("partition matroid parts must be disjoint")
        else:
            raise MechanismError(f"unsupported matroid kind {self.kind!r}")

    def constraints(self, m: int) -> list[tuple[tuple[int, ...], int]]:
        """Rank constraints ``sum_{j in S} x_j <= r(S)`` that define the polytope
        together with the unit box."""
        if self.kind == "uniform":
            return [(tuple(range(m)), self.rank)] if self.rank < m else []
        return [(p, c) for p, c in zip(self.parts, self.capacities) if c < len(p)]

    def in_polytope(self, x: Sequence[float], tol: float = 1e-7) -> bool:
        x = np.asarray(x, dtype=float)
        if np.any(x < -tol) or np.any(x > 1 + tol):
            return False
        return all(x[list(S)].sum() <= r + tol for S, r in self.constraints(len(x)))

    def is_independent(self, items) -> bool:
        x = np.zeros(max(items, default=-1) + 1)
        x[list(items)] = 1.0
        return self.in_polytope(x, tol=0.0) if len(x) else True

    @staticmethod
    def from_dict(spec: dict) -> "Matroid":
        kind = spec.get("kind")
        if kind == "uniform":
            return Matroid("uniform", rank=int(spec["rank"]))
        if kind == "partition":
            return Matroid("partition", parts=tuple(spec["parts"]),
                           capacities=tuple(spec["capacities"]))
        raise MechanismError(f"unsupported matroid kind {kind!r}")


@dataclass(frozen=True, eq=False)
class BuyerModel:
    kind: str
    distributions: tuple = ()
    budget: float = math.inf
    type_table: tuple = ()  # ((prob, (v_1..v_m)), ...)
    matroid: Matroid | None = None
    alpha: float | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.kind not in KIND_ALPHA:
            raise MechanismError(f"unknown buyer kind {self.kind!r}")
        if not self.budget > 0:
            raise MechanismError("budget must be positive")
        if self.alpha is None:
            object.__setattr__(self, "alpha", KIND_ALPHA[self.kind])
        if self.kind == "correlated_matroid":
            if not self.type_table:
                raise MechanismError("correlated buyer needs a nonempty type table")
            table = tuple((float(f), tuple(float(v) for v in vals)) for f, vals in self.type_table)
            object.__setattr__(self, "type_table", table)
            if abs(sum(f for f, _ in table) - 1.0) > 1e-9 or any(f < 0 for f, _ in table):
                raise MechanismError("type probabilities must be nonnegative and sum to 1")
            if len({len(v) for _, v in table}) != 1:
                raise MechanismError("all type valuation vectors need the same length")
            if any(v < 0 for _, vals in table for v in vals):
                raise MechanismError("valuations must be nonnegative")
            if self.matroid is None:
                object.__setattr__(self, "matroid", Matroid("uniform", rank=self.m))
        else:
            if not self.distributions:
                raise MechanismError(f"{self.kind} buyer needs per-item distributions")
            if self.kind == "budgeted_single_item" and len(self.distributions) != 1:
                raise MechanismError("budgeted_single_item buyers have exactly one item")

    @property
    def m(self) -> int:
        if self.kind == "correlated_matroid":
            return len(self.type_table[0][1])
        return len(self.distributions)

    @cached_property
    def curves(self) -> list[RevenueCurve]:
        budget = math.inf if self.kind == "unit_demand" else self.budget
        return [revenue_curve(d, budget, self.epsilon) for d in self.distributions]


# ---------------------------------------------------------------------------
# Offer policies and outcomes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SinglePrice:
    price: float

    def draw(self, coin: float) -> float:
        return self.price


@dataclass(frozen=True)
class TwoPriceMix:
    """Offer ``p_minus`` with probability ``theta``, else ``p_plus``."""

    p_minus: float
    p_plus: float
    theta: float

    def draw(self, coin: float) -> float:
        return self.p_minus if coin < self.theta else self.p_plus


@dataclass(frozen=True)
class PerItemMixes:
    offers: tuple
    excluded: frozenset = frozenset()
    demand: str = "additive"  # or "unit"


@dataclass(frozen=True)
class Menu:
    """type id -> (marginal allocation vector, payment)."""

    entries: dict
    matroid: Matroid

    def to_table(self) -> list[dict]:
        return [{"type": t, "marginals": [float(v) for v in x], "payment": float(p)}
                for t, (x, p) in sorted(self.entries.items())]


@dataclass(frozen=True)
class BuildResult:
    policy: object
    benchmark_value: float
    exact_rule: np.ndarray | None = None
    target: np.ndarray | None = None


@dataclass(frozen=True)
class SingleBuyerOutcome:
    items: frozenset
    payment: float
    fractional: tuple | None = None  # (item, probability of receiving it)


def _as_caps(q_bar, m: int) -> np.ndarray:
    caps = np.atleast_1d(np.asarray(q_bar, dtype=float))
    if caps.shape != (m,):
        raise MechanismError(f"expected {m} caps, got shape {caps.shape}")
    if np.any(caps < -1e-12) or np.any(caps > 1 + 1e-12) or not np.all(np.isfinite(caps)):
        raise MechanismError("caps must lie in [0, 1]")
    return np.clip(caps, 0.0, 1.0)


def _offer_at(curve: RevenueCurve, q: float):
    if q <= 0:
        return SinglePrice(math.inf)
    q_lo, q_hi, theta, p_lo, p_hi = curve.decompose(q)
    if q_lo == q_hi:
        return SinglePrice(float(p_lo))
    return TwoPriceMix(float(p_lo), float(p_hi), float(theta))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_budgeted_single_item(model: BuyerModel, q_bar) -> BuildResult:
    if model.kind != "budgeted_single_item":
        raise MechanismError("model is not budgeted_single_item")
    cap = _as_caps(q_bar, 1)[0]
    curve = model.curves[0]
    q_star = min(cap, curve.peak)
    return BuildResult(policy=_offer_at(curve, q_star),
                       benchmark_value=float(curve(q_star)) if q_star > 0 else 0.0,
                       exact_rule=np.array([q_star]),
                       target=np.array([q_star]))


def tail_select(prices: Sequence[float], qs: Sequence[float]) -> tuple[set[int], float]:
    """Backward recurrence ``r_j = max(q_j p_j + (1-q_j) r_{j+1}, r_{j+1})``.

    ``prices`` must be ascending.  Returns the kept indices
    ``{j : p_j >= r_{j+1}}`` and ``r_1``.
    """
    p = np.asarray(prices, dtype=float)
    q = np.asarray(qs, dtype=float)
    if len(p) != len(q):
        raise MechanismError("prices and qs must have equal length")
    if np.any(q < 0) or np.any(p < 0):
        raise MechanismError("prices and qs must be nonnegative")
    if q.sum() > 1 + 1e-9:
        raise MechanismError(f"sum of qs is {q.sum()} > 1")
    if np.any(np.diff(p) < 0):
        raise MechanismError("prices must be sorted ascending")
    r_next = 0.0
    kept = set()
    for j in range(len(p) - 1, -1, -1):
        if p[j] >= r_next:
            kept.add(j)
        r_next = max(q[j] * p[j] + (1.0 - q[j]) * r_next, r_next)
    return kept, float(r_next)


def build_unit_demand(model: BuyerModel, q_bar) -> BuildResult:
    if model.kind != "unit_demand":
        raise MechanismError("model is not unit_demand")
    caps = _as_caps(q_bar, model.m)
    for j, d in enumerate(model.distributions):
        if not d.continuous or not check_regular(d):
            raise MechanismError(f"item {j}: distribution is not regular")
    curves = [c.closure for c in model.curves]
    q = greedy_waterfill(curves, caps, 1.0)
    prices = np.array([d.quantile(1.0 - qj) if qj > 0 else math.inf
                       for d, qj in zip(model.distributions, q)])
    order = np.argsort(prices, kind="stable")
    live = [j for j in order if q[j] > 0]
    kept_sorted, _ = tail_select(prices[live], q[live])
    kept = {int(live[k]) for k in kept_sorted}
    excluded = frozenset(j for j in range(model.m) if j not in kept)
    offers = tuple(SinglePrice(float(p)) for p in prices)
    value = float(sum(c(qj) for c, qj in zip(curves, q)))
    return BuildResult(policy=PerItemMixes(offers, excluded, demand="unit"),
                       benchmark_value=value, exact_rule=None, target=q)


def build_additive_budget(model: BuyerModel, q_bar) -> BuildResult:
    if model.kind != "additive_budgeted":
        raise MechanismError("model is not additive_budgeted")
    caps = _as_caps(q_bar, model.m)
    q = np.array([min(cap, c.peak) for cap, c in zip(caps, model.curves)])
    offers = tuple(_offer_at(c, qj) for c, qj in zip(model.curves, q))
    total = float(sum(c(qj) for c, qj in zip(model.curves, q) if qj > 0))
    excluded = frozenset(j for j in range(model.m) if q[j] <= 0)
    return BuildResult(policy=PerItemMixes(offers, excluded, demand="additive"),
                       benchmark_value=min(total, model.budget),
                       exact_rule=None, target=q)


def add_correlated_block(lp: LpBuilder, model: BuyerModel, caps, objective: str,
                         caps_are_vars: bool = False):
    """Add the correlated-buyer menu program to ``lp``.

    ``caps`` are either constants or LP variable handles (for the combined
    multi-buyer program).  Returns ``(x, P)`` handle arrays, ``x[t][j]``.
    """
    m = model.m
    hi_p = model.budget if math.isfinite(model.budget) else math.inf
    types = model.type_table
    x, P = [], []
    for f, vals in types:
        if objective == "revenue":
            x.append([lp.var(0.0, 1.0) for _ in range(m)])
            P.append(lp.var(0.0, hi_p, obj=f))
        elif objective == "welfare":
            x.append([lp.var(0.0, 1.0, obj=f * vals[j]) for j in range(m)])
            P.append(lp.var(0.0, hi_p))
        else:
            raise MechanismError(f"unknown objective {objective!r}")
    for j in range(m):
        row = {x[t][j]: f for t, (f, _) in enumerate(types)}
        if caps_are_vars:
            row[caps[j]] = row.get(caps[j], 0.0) - 1.0
            lp.row(row, "<=", 0.0)
        else:
            lp.row(row, "<=", float(caps[j]))
    for t in range(len(types)):
        for S, r in model.matroid.constraints(m):
            lp.row({x[t][j]: 1.0 for j in S}, "<=", float(r))
    for t, (_, vt) in enumerate(types):
        # participation: utility against the empty outcome
        row = {x[t][j]: vt[j] for j in range(m)}
        row[P[t]] = -1.0
        lp.row(row, ">=", 0.0)
        for u in range(len(types)):
            if u == t:
                continue
            row = {x[t][j]: vt[j] for j in range(m)}
            for j in range(m):
                row[x[u][j]] = row.get(x[u][j], 0.0) - vt[j]
            row[P[t]] = -1.0
            row[P[u]] = row.get(P[u], 0.0) + 1.0
            lp.row(row, ">=", 0.0)
    return x, P


def correlated_program(model: BuyerModel, q_bar, objective: str = "revenue"):
    """The menu linear program; returns ``(lp, x, P)`` with variable handles."""
    if model.kind != "correlated_matroid":
        raise MechanismError("model is not correlated_matroid")
    caps = _as_caps(q_bar, model.m)
    lp = LpBuilder()
    x, P = add_correlated_block(lp, model, caps, objective)
    return lp.build(), x, P


def build_correlated_lp(model: BuyerModel, q_bar, objective: str = "revenue") -> BuildResult:
    prog, x, P = correlated_program(model, q_bar, objective)
    caps = _as_caps(q_bar, model.m)
    sol = solve_lp(prog)
    if not sol.optimal:
        raise MechanismError(f"menu LP returned status {sol.status}")
    v = sol.values
    entries = {}
    marg = np.zeros(model.m)
    for t, (f, _) in enumerate(model.type_table):
        xt = np.clip([v[h] for h in x[t]], 0.0, 1.0)
        xt[xt < 1e-9] = 0.0
        pay = float(np.clip(v[P[t]], 0.0, model.budget))
        entries[t] = (xt, pay)
        marg += f * xt
    return BuildResult(policy=Menu(entries, model.matroid),
                       benchmark_value=float(sol.objective_value),
                       exact_rule=np.minimum(marg, caps), target=marg)


def build(model: BuyerModel, q_bar, objective: str = "revenue") -> BuildResult:
    if model.kind == "correlated_matroid":
        return build_correlated_lp(model, q_bar, objective)
    if objective != "revenue":
        raise MechanismError(f"{model.kind} mechanisms only support the revenue objective")
    if model.kind == "budgeted_single_item":
        return build_budgeted_single_item(model, q_bar)
    if model.kind == "unit_demand":
        return build_unit_demand(model, q_bar)
    return build_additive_budget(model, q_bar)


def benchmark(model: BuyerModel, q_bar, objective: str = "revenue") -> float:
    return build(model, q_bar, objective).benchmark_value


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def matroid_round(marginals: Sequence[float], matroid: Matroid, rng: np.random.Generator) -> frozenset:
    """Random independent set with ``Pr[j in set] = marginals[j]``.

    Systematic sampling with a uniform random offset inside each uniform
    constraint (one block for a uniform matroid, one per part otherwise).
    """
    x = np.asarray(marginals, dtype=float)
    if not matroid.in_polytope(x):
        raise MechanismError("marginals outside the matroid polytope")
    x = np.clip(x, 0.0, 1.0)
    m = len(x)
    if matroid.kind == "uniform":
        blocks = [(tuple(range(m)), matroid.rank)]
    else:
        covered = {j for p in matroid.parts for j in p}
        blocks = list(zip(matroid.parts, matroid.capacities))
        blocks += [((j,), 1) for j in range(m) if j not in covered]
    chosen = set()
    for items, cap in blocks:
        xb = x[list(items)]
        total = xb.sum()
        if total > cap:
            xb = xb * (cap / total)
        u = rng.random()
        cum = np.concatenate(([0.0], np.cumsum(xb)))
        hits = np.ceil(cum[1:] - u) - np.ceil(cum[:-1] - u)
        chosen.update(items[k] for k in np.nonzero(hits >= 1)[0])
    return frozenset(chosen)


def _buy(price: float, budget_left: float, rng: np.random.Generator):
    """Pay for one item; returns (paid, received, probability)."""
    if price <= budget_left:
        return price, True, 1.0
    prob = budget_left / price
    return budget_left, bool(rng.random() < prob), prob


def sample_outcome(policy, buyer_type, budget: float, rng: np.random.Generator) -> SingleBuyerOutcome:
    """Run the policy against one realized buyer type.

    ``buyer_type`` is a valuation vector for posted-price policies and a
    type id for menus.
    """
    if isinstance(policy, Menu):
        if buyer_type not in policy.entries:
            raise MechanismError(f"type {buyer_type!r} absent from menu")
        xt, pay = policy.entries[buyer_type]
        return SingleBuyerOutcome(matroid_round(xt, policy.matroid, rng), pay)

    values = np.atleast_1d(np.asarray(buyer_type, dtype=float))
    if isinstance(policy, (SinglePrice, TwoPriceMix)):
        price = policy.draw(rng.random())
        if math.isinf(price) or values[0] < price:
            return SingleBuyerOutcome(frozenset(), 0.0)
        paid, got, prob = _buy(price, budget, rng)
        return SingleBuyerOutcome(frozenset({0}) if got else frozenset(), paid,
                                  None if prob == 1.0 else (0, prob))

    if not isinstance(policy, PerItemMixes):
        raise MechanismError(f"unknown policy type {type(policy).__name__}")
    prices = np.array([o.draw(rng.random()) for o in policy.offers])
    cands = [j for j in range(len(prices))
             if j not in policy.excluded and math.isfinite(prices[j]) and values[j] >= prices[j]]
    if not cands:
        return SingleBuyerOutcome(frozenset(), 0.0)
    if policy.demand == "unit":
        j = min(cands, key=lambda j: (-(values[j] - prices[j]), prices[j], j))
        paid, got, prob = _buy(prices[j], budget, rng)
        return SingleBuyerOutcome(frozenset({j}) if got else frozenset(), float(paid),
                                  None if prob == 1.0 else (j, prob))
    items, paid_total, frac = set(), 0.0, None
    left = budget
    for j in sorted(cands, key=lambda j: (-(values[j] - prices[j]), j)):
        if left <= 0:
            break
        paid, got, prob = _buy(prices[j], left, rng)
        paid_total += paid
        left -= paid
        if got:
            items.add(j)
        if prob < 1.0:
            frac = (j, prob)
    return SingleBuyerOutcome(frozenset(items), float(paid_total), frac)


def bundle_value(model: BuyerModel, buyer_type, items) -> float:
    """Buyer value for a realized bundle (welfare accounting)."""
    if model.kind == "correlated_matroid":
        vals = model.type_table[buyer_type][1]
    else:
        vals = np.atleast_1d(buyer_type)
    if model.kind == "unit_demand":
        return float(max((vals[j] for j in items), default=0.0))
    return float(sum(vals[j] for j in items))
