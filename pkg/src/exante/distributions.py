"""Valuation distributions, budget-modified CDFs and revenue curves.

Sale convention used throughout the package: a buyer whose value equals the
posted price buys.  Hence the sale probability at price ``p`` is
``Pr[V >= p] = 1 - cdf_left(p)`` and revenue curves are built from that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .solver import PiecewiseLinear, upper_hull

__all__ = [
    "Distribution",
    "Uniform",
    "Discrete",
    "PiecewiseLinearCdf",
    "ModifiedCdf",
    "RevenueCurve",
    "DistributionError",
    "cdf_eval",
    "quantile",
    "revenue_curve",
    "check_regular",
    "sample",
    "distribution_from_dict",
]

# relative floor used when a distribution has no positive minimum value
DEFAULT_FLOOR = 1e-6


class DistributionError(ValueError):
    pass


class Distribution:
    """Base class: nonnegative valuation distribution with bounded support."""

    continuous = False

    def cdf(self, v):
        raise NotImplementedError

    def cdf_left(self, v):
        """Pr[V < v]."""
        raise NotImplementedError

    def quantile(self, q: float) -> float:
        raise NotImplementedError

    @property
    def lower(self) -> float:
        raise NotImplementedError

    @property
    def upper(self) -> float:
        raise NotImplementedError

    def atoms(self) -> list[float]:
        return []

    def survival(self, v):
        """Pr[V > v]."""
        return 1.0 - self.cdf(v)

    def sale_prob(self, p):
        """Pr[V >= p]."""
        return 1.0 - self.cdf_left(p)

    def min_positive(self) -> float:
        lo = self.lower
        if lo > 0:
            return lo
        return self.upper * DEFAULT_FLOOR


@dataclass(frozen=True)
class Uniform(Distribution):
    a: float
    b: float
    continuous = True

    def __post_init__(self):
        if not (0 <= self.a < self.b) or not math.isfinite(self.b):
            raise DistributionError(f"uniform requires 0 <= a < b < inf, got ({self.a}, {self.b})")

    def cdf(self, v):
        return np.clip((np.asarray(v, dtype=float) - self.a) / (self.b - self.a), 0.0, 1.0)

    cdf_left = cdf

    def quantile(self, q: float) -> float:
        q = min(max(q, 0.0), 1.0)
        return self.a + q * (self.b - self.a)

    def density(self, v):
        v = np.asarray(v, dtype=float)
        return np.where((v >= self.a) & (v <= self.b), 1.0 / (self.b - self.a), 0.0)

    @property
    def lower(self):
        return self.a

    @property
    def upper(self):
        return self.b


@dataclass(frozen=True)
class Discrete(Distribution):
    """Finite support ``[(value, probability), ...]``."""

    points: tuple
    _values: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = sorted((float(v), float(p)) for v, p in self.points)
        if not pts:
            raise DistributionError("discrete distribution needs at least one point")
        vals = np.array([v for v, _ in pts])
        probs = np.array([p for _, p in pts])
        if np.any(vals < 0) or np.any(probs < 0):
            raise DistributionError("discrete values and probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise DistributionError(f"discrete probabilities sum to {probs.sum()}, expected 1")
        # merge duplicate values
        uniq, inv = np.unique(vals, return_inverse=True)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inv, probs)
        cum = np.cumsum(merged)
        cum[-1] = 1.0
        object.__setattr__(self, "points", tuple(zip(uniq.tolist(), merged.tolist())))
        object.__setattr__(self, "_values", uniq)
        object.__setattr__(self, "_cum", cum)

    def cdf(self, v):
        idx = np.searchsorted(self._values, np.asarray(v, dtype=float), side="right")
        return np.concatenate(([0.0], self._cum))[idx]

    def cdf_left(self, v):
        idx = np.searchsorted(self._values, np.asarray(v, dtype=float), side="left")
        return np.concatenate(([0.0], self._cum))[idx]

    def quantile(self, q: float) -> float:
        if q <= 0:
            return float(self._values[0])
        idx = int(np.searchsorted(self._cum, q - 1e-12, side="left"))
        return float(self._values[min(idx, len(self._values) - 1)])

    def atoms(self):
        return self._values.tolist()

    @property
    def lower(self):
        return float(self._values[0])

    @property
    def upper(self):
        return float(self._values[-1])

    def min_positive(self):
        pos = self._values[self._values > 0]
        if len(pos) == 0:
            raise DistributionError("degenerate support: no positive value")
        return float(pos[0])


@dataclass(frozen=True)
class PiecewiseLinearCdf(Distribution):
    """CDF given by knots ``[(value, cumulative), ...]``, linear in between.

    A jump between equal values encodes an atom.  The first cumulative value
    may be positive (atom at the first knot); the last must be 1.
    """

    points: tuple
    continuous = True
    _v: np.ndarray = field(init=False, repr=False, compare=False)
    _F: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = [(float(v), float(F)) for v, F in self.points]
        if len(pts) < 2:
            raise DistributionError("piecewise-linear CDF needs at least two knots")
        v = np.array([p[0] for p in pts])
        F = np.array([p[1] for p in pts])
        if np.any(np.diff(v) < 0) or np.any(np.diff(F) < -1e-12):
            raise DistributionError("piecewise-linear CDF knots must be nondecreasing")
        if v[0] < 0 or F[0] < 0 or abs(F[-1] - 1.0) > 1e-9:
            raise DistributionError("piecewise-linear CDF must start >= 0 and end at 1")
        F = np.maximum.accumulate(np.clip(F, 0.0, 1.0))
        F[-1] = 1.0
        object.__setattr__(self, "points", tuple(zip(v.tolist(), F.tolist())))
        object.__setattr__(self, "_v", v)
        object.__setattr__(self, "_F", F)

    def _interp(self, v, side):
        v = np.asarray(v, dtype=float)
        flat = np.atleast_1d(v)
        n = len(self._v)
        idx = np.searchsorted(self._v, flat, side=side)
        i = np.clip(idx, 1, n - 1)
        x0, x1 = self._v[i - 1], self._v[i]
        F0, F1 = self._F[i - 1], self._F[i]
        width = np.where(x1 > x0, x1 - x0, 1.0)
        res = F0 + (F1 - F0) * (flat - x0) / width
        res = np.where(x1 > x0, res, F1 if side == "right" else F0)
        res = np.where(idx == 0, 0.0, np.where(idx == n, 1.0, res))
        if side == "left":
            # exactly at the first knot: mass strictly below is zero
            res = np.where(flat <= self._v[0], 0.0, res)
        return float(res[0]) if np.ndim(v) == 0 else res.reshape(np.shape(v))

    def cdf(self, v):
        return self._interp(v, "right")

    def cdf_left(self, v):
        return self._interp(v, "left")

    def quantile(self, q: float) -> float:
        if q <= self._F[0]:
            return float(self._v[0])
        i = int(np.searchsorted(self._F, q, side="left"))
        i = min(i, len(self._F) - 1)
        F0, F1 = self._F[i - 1], self._F[i]
        x0, x1 = self._v[i - 1], self._v[i]
        if F1 == F0:
            return float(x0)
        return float(x0 + (x1 - x0) * (q - F0) / (F1 - F0))

    def density(self, v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        idx = np.searchsorted(self._v, v, side="right")
        out = np.zeros(v.shape)
        for n, (x, i) in enumerate(zip(v, idx)):
            if 0 < i < len(self._v) and self._v[i] > self._v[i - 1]:
                out[n] = (self._F[i] - self._F[i - 1]) / (self._v[i] - self._v[i - 1])
        return out

    def atoms(self):
        out = []
        if self._F[0] > 0:
            out.append(float(self._v[0]))
        for i in range(1, len(self._v)):
            if self._v[i] == self._v[i - 1] and self._F[i] > self._F[i - 1]:
                out.append(float(self._v[i]))
        return out

    @property
    def lower(self):
        return float(self._v[0])

    @property
    def upper(self):
        return float(self._v[-1])


@dataclass(frozen=True)
class ModifiedCdf(Distribution):
    """Budget-truncated CDF: above the budget ``B`` the buyer pays ``B`` and
    receives the item with probability ``B / price``."""

    base: Distribution
    budget: float = math.inf

    def __post_init__(self):
        if not self.budget > 0:
            raise DistributionError("budget must be positive")

    def _modify(self, v, F):
        v = np.asarray(v, dtype=float)
        if math.isinf(self.budget):
            return F
        with np.errstate(divide="ignore", invalid="ignore"):
            scaled = 1.0 - (1.0 - F) * self.budget / np.where(v > 0, v, 1.0)
        return np.where(v >= self.budget, scaled, F)

    def cdf(self, v):
        out = self._modify(v, self.base.cdf(v))
        return float(out) if np.ndim(out) == 0 else out

    def cdf_left(self, v):
        out = self._modify(v, self.base.cdf_left(v))
        return float(out) if np.ndim(out) == 0 else out

    def quantile(self, q: float) -> float:
        """inf{v : cdf(v) >= q} by bisection (relative tolerance 1e-10)."""
        if q <= 0:
            return self.base.lower
        lo, hi = 0.0, self.base.upper
        if self.cdf(lo) >= q:
            return lo
        while hi - lo > 1e-10 * max(hi, 1e-300):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) >= q:
                hi = mid
            else:
                lo = mid
        return hi

    def atoms(self):
        return self.base.atoms()

    @property
    def lower(self):
        return self.base.lower

    @property
    def upper(self):
        return self.base.upper

    def min_positive(self):
        return self.base.min_positive()


def cdf_eval(d: Distribution, v: float) -> float:
    if v < 0:
        raise DistributionError("cdf_eval requires v >= 0")
    return float(d.cdf(v))


def quantile(d: Distribution, q: float) -> float:
    if not 0 <= q <= 1:
        raise DistributionError(f"quantile level {q} outside [0, 1]")
    return d.quantile(q)


def sample(d: Distribution, coin: float) -> float:
    """Inverse-transform draw."""
    return d.quantile(coin)


@dataclass(frozen=True)
class RevenueCurve:
    """Sampled revenue curve with its concave closure.

    ``qs``/``revenues``/``prices`` are the grid samples; ``closure`` is the
    upper concave hull of those samples together with (0, 0) and (1, 0).
    ``vertex_prices[k]`` is the posted price realizing closure vertex ``k``
    (``inf`` for the no-sale vertex at q = 0).
    """

    qs: np.ndarray
    revenues: np.ndarray
    prices: np.ndarray
    closure: PiecewiseLinear
    vertex_prices: np.ndarray
    epsilon: float
    budget: float = math.inf

    def __call__(self, q):
        return self.closure(q)

    @property
    def peak(self) -> float:
        """Leftmost maximizer of the closure."""
        ys = self.closure.ys
        return float(self.closure.xs[int(np.argmax(ys >= ys.max() - 1e-15))])

    def decompose(self, q: float):
        """Return ``(q_lo, q_hi, theta, p_lo, p_hi)`` with
        ``q = theta*q_lo + (1-theta)*q_hi`` on a single closure segment.
        ``p_lo`` is the price realizing ``q_lo`` (the higher price)."""
        xs = self.closure.xs
        k = int(np.searchsorted(xs, q, side="left"))
        if k < len(xs) and abs(xs[k] - q) <= 1e-12:
            return xs[k], xs[k], 1.0, self.vertex_prices[k], self.vertex_prices[k]
        if k == 0 or k >= len(xs):
            raise DistributionError(f"q={q} outside closure domain")
        x0, x1 = xs[k - 1], xs[k]
        theta = (x1 - q) / (x1 - x0)
        return x0, x1, theta, self.vertex_prices[k - 1], self.vertex_prices[k]


def price_grid(d: Distribution, epsilon: float, budget: float = math.inf) -> np.ndarray:
    """Geometric grid ``vmin*(1+eps)**r`` up to the top of the support."""
    vmin = d.min_positive()
    vmax = d.upper
    if not (vmax > 0 and vmin > 0):
        raise DistributionError("degenerate support for revenue curve")
    ratio = vmax / vmin
    ell = int(math.floor(math.log(ratio) / math.log1p(epsilon) + 1e-12)) if ratio > 1 else 0
    grid = vmin * np.power(1.0 + epsilon, np.arange(ell + 1))
    extra = [v for v in d.atoms() if vmin <= v <= vmax]
    if math.isfinite(budget) and vmin <= budget <= vmax:
        extra.append(budget)
    extra.append(vmax)
    return np.unique(np.concatenate([grid, np.array(extra, dtype=float)]))


def revenue_curve(d: Distribution, budget: float = math.inf, epsilon: float = 0.01) -> RevenueCurve:
    """Grid-sampled revenue curve ``R(q) = q * price(q)`` and its concave closure.

    With a finite budget the buyer pays ``min(p, B)`` and is served with
    probability ``Pr[V >= p] * min(1, B/p)``.
    """
    if not epsilon > 0:
        raise DistributionError("epsilon must be positive")
    if isinstance(d, ModifiedCdf):
        budget = min(budget, d.budget)
        d = d.base
    if d.upper <= 0:
        raise DistributionError("degenerate support: all mass at zero")
    prices = price_grid(d, epsilon, budget)
    sale = np.asarray(d.sale_prob(prices), dtype=float)
    if math.isinf(budget):
        qs = sale
        revs = prices * sale
    else:
        qs = sale * np.minimum(1.0, budget / prices)
        revs = np.minimum(prices, budget) * sale

    pts = [(0.0, 0.0), (1.0, 0.0)] + list(zip(qs.tolist(), revs.tolist()))
    closure = upper_hull(pts)
    # map hull vertices back to prices; prefer the highest price on ties
    lookup: dict[tuple[float, float], float] = {(0.0, 0.0): math.inf, (1.0, 0.0): 0.0}
    for q, r, p in zip(qs.tolist(), revs.tolist(), prices.tolist()):
        key = (q, r)
        if key not in lookup or (lookup[key] != math.inf and p > lookup[key]):
            lookup[key] = p
    vprices = np.array([lookup[(x, y)] for x, y in zip(closure.xs.tolist(), closure.ys.tolist())])
    return RevenueCurve(qs, revs, prices, closure, vprices, epsilon, budget)


def check_regular(d: Distribution, grid_size: int = 400) -> bool:
    """True iff the virtual value ``p - (1-F(p))/f(p)`` is nondecreasing.

    The density is taken as the CDF increment over each grid cell and the
    virtual value is evaluated at cell midpoints.  A cell with zero density
    inside the support counts as a violation.
    """
    if isinstance(d, ModifiedCdf):
        d = d.base
    if not d.continuous:
        raise DistributionError("regularity check requires density")
    if d.atoms():
        return False
    lo, hi = d.lower, d.upper
    edges = np.linspace(lo, hi, grid_size + 1)
    F = np.asarray(d.cdf(edges), dtype=float)
    h = edges[1] - edges[0]
    dens = np.diff(F) / h
    mids = 0.5 * (edges[:-1] + edges[1:])
    surv = 1.0 - np.asarray(d.cdf(mids), dtype=float)
    phi = np.full(grid_size, -np.inf)
    pos = dens > 0
    phi[pos] = mids[pos] - surv[pos] / dens[pos]
    # trailing cells with no remaining mass do not matter
    live = np.nonzero(surv > 1e-12)[0]
    if len(live) == 0:
        return True
    phi = phi[: live[-1] + 1]
    return bool(np.all(np.diff(phi) >= -1e-9))


def distribution_from_dict(spec: dict) -> Distribution:
    """Parse a distribution literal (``uniform``, ``discrete``, ``pwl_cdf``)."""
    kind = spec.get("kind")
    try:
        if kind == "uniform":
            return Uniform(float(spec["a"]), float(spec["b"]))
        if kind == "discrete":
            return Discrete(tuple(tuple(p) for p in spec["points"]))
        if kind == "pwl_cdf":
            return PiecewiseLinearCdf(tuple(tuple(p) for p in spec["points"]))
    except KeyError as exc:
        raise DistributionError(f"distribution literal missing field {exc}") from None
    raise DistributionError(f"unknown distribution kind {kind!r}")
