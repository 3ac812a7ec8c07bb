"""k-choice prophet inequality: threshold, magician-driven gambler, prophet payoff."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import Distribution
from .magician import BoxPolicy, MagicianConfig, create_magician, gamma_lower_bound, offer_box, realize_open

__all__ = [
    "ProphetInstance",
    "find_threshold",
    "gambler_plan",
    "run_gambler",
    "prophet_payoff",
]

BISECT_ITERS = 200


@dataclass(frozen=True)
class ProphetInstance:
    distributions: tuple
    k: int

    def __post_init__(self):
        object.__setattr__(self, "distributions", tuple(self.distributions))
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be a positive integer")
        if not self.distributions:
            raise ValueError("instance needs at least one distribution")
        if any(d.lower < 0 for d in self.distributions):
            raise ValueError("distributions must be nonnegative")

    @property
    def gamma(self) -> float:
        return gamma_lower_bound(self.k)


def _exceed(dists: Sequence[Distribution], t: float) -> float:
    return float(sum(d.survival(t) for d in dists))


def _mass_at(dists: Sequence[Distribution], t: float) -> float:
    return float(sum(d.cdf(t) - d.cdf_left(t) for d in dists))


def find_threshold(instance: ProphetInstance) -> tuple[float, float]:
    """Return ``(T, rho)`` with ``sum_i Pr[X_i > T] + rho * sum_i Pr[X_i = T] = k``.

    ``rho`` splits atoms at ``T``; it is 0 for continuous instances.  When
    fewer than k values are positive in expectation, ``T = 0``.
    """
    ds, k = instance.distributions, instance.k
    if _exceed(ds, 0.0) <= k:
        return 0.0, 0.0
    lo, hi = 0.0, max(d.upper for d in ds)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _exceed(ds, mid) > k:
            lo = mid
        else:
            hi = mid
    atoms = [a for d in ds for a in d.atoms() if lo <= a <= hi]
    t = min(atoms) if atoms else hi
    above = _exceed(ds, t)
    mass = _mass_at(ds, t)
    rho = 0.0
    if mass > 0 and above < k:
        rho = min(max((k - above) / mass, 0.0), 1.0)
    return float(t), float(rho)


def gambler_plan(instance: ProphetInstance, T: float, rho: float = 0.0) -> list[BoxPolicy]:
    """Magician policies for the fixed arrival order; independent of the draws."""
    state = create_magician(MagicianConfig(instance.gamma, instance.k))
    plan = []
    for d in instance.distributions:
        p = float(d.survival(T)) + rho * float(d.cdf(T) - d.cdf_left(T))
        plan.append(offer_box(state, min(max(p, 0.0), 1.0)))
    return plan


def run_gambler(instance: ProphetInstance, T: float, draws: Sequence[float],
                rng: np.random.Generator, rho: float = 0.0,
                plan: list[BoxPolicy] | None = None) -> tuple[list[int], float]:
    """Select draw ``i`` when its box opens and the draw beats ``T``
    (at ``T`` exactly, with probability ``rho``).  Each selection breaks a wand."""
    if len(draws) != len(instance.distributions):
        raise ValueError("one draw per distribution required")
    if plan is None:
        plan = gambler_plan(instance, T, rho)
    coins = rng.random((len(draws), 2))
    broken = 0
    selected = []
    for i, x in enumerate(draws):
        if not realize_open(plan[i], broken, coins[i, 0]):
            continue
        if x > T or (x == T and coins[i, 1] < rho):
            selected.append(i)
            broken += 1
    return selected, float(sum(draws[i] for i in selected))


def prophet_payoff(draws: Sequence[float], k: int) -> float:
    """Sum of the k largest draws."""
    x = np.sort(np.asarray(draws, dtype=float))[::-1]
    return float(x[:k].sum())
