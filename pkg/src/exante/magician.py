"""The gamma-conservative magician: an online admission rule that opens every
box with ex-ante probability gamma while breaking at most k wands.

The state is the ex-ante CDF ``phi[w] = Pr[W_i <= w]`` of the number of wands
broken before box ``i``.  It only depends on the presented probabilities, so
the dynamic program is deterministic; randomness enters through
:func:`realize_open`, which takes an explicit uniform coin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "MagicianConfig",
    "MagicianState",
    "BoxPolicy",
    "SandState",
    "Magician",
    "ConfigurationError",
    "WandBudgetExceeded",
    "create_magician",
    "offer_box",
    "realize_open",
    "gamma_lower_bound",
    "hardness_upper_bound",
    "sand_run",
    "max_threshold",
]

# slack when comparing a CDF value against gamma
THETA_TOL = 1e-12


class ConfigurationError(ValueError):
    pass


class WandBudgetExceeded(RuntimeError):
    """The threshold would need more wands than the magician owns."""


@dataclass(frozen=True)
class MagicianConfig:
    gamma: float
    wands: int

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if int(self.wands) != self.wands or self.wands < 1:
            raise ConfigurationError(f"wands must be a positive integer, got {self.wands}")


@dataclass
class MagicianState:
    config: MagicianConfig
    cdf: np.ndarray
    round: int = 1
    theta: int | None = None
    cumulative_p: float = 0.0

    @property
    def gamma(self) -> float:
        return self.config.gamma

    @property
    def wands(self) -> int:
        return self.config.wands


@dataclass(frozen=True)
class BoxPolicy:
    theta: int
    s_at_theta: float

    def open_prob(self, w: int) -> float:
        if w < self.theta:
            return 1.0
        if w == self.theta:
            return self.s_at_theta
        return 0.0


@dataclass
class SandState:
    """Sand on the tape: ``cdf[w]`` is the mass in positions ``0..w``."""

    cdf: np.ndarray
    barrier: int = 1
    round: int = 1


def _threshold(cdf: np.ndarray, gamma: float) -> int:
    return int(np.argmax(cdf >= gamma - THETA_TOL))


def _open_at_threshold(cdf: np.ndarray, theta: int, gamma: float) -> float:
    below = cdf[theta - 1] if theta > 0 else 0.0
    mass = cdf[theta] - below
    if mass <= 0.0:
        return 1.0
    return min(max((gamma - below) / mass, 0.0), 1.0)


def create_magician(config: MagicianConfig) -> MagicianState:
    return MagicianState(config=config, cdf=np.ones(config.wands + 1))


def offer_box(state: MagicianState, p: float) -> BoxPolicy:
    """Compute the policy for the next box and advance the ex-ante CDF.

    ``p`` is (an upper bound on) the probability that opening this box
    breaks a wand.
    """
    if not (0.0 <= p <= 1.0):
        raise ConfigurationError(f"box probability must lie in [0, 1], got {p}")
    phi = state.cdf
    theta = _threshold(phi, state.gamma)
    if theta > state.wands - 1:
        raise WandBudgetExceeded(
            f"threshold {theta} exceeds wand budget {state.wands} at round {state.round}")
    s = _open_at_threshold(phi, theta, state.gamma)

    k = len(phi)
    open_w = np.zeros(k)
    open_w[:theta] = 1.0
    open_w[theta] = s
    prev = np.concatenate(([0.0], phi[:-1]))
    state.cdf = open_w * p * prev + (1.0 - open_w * p) * phi
    state.theta = theta
    state.round += 1
    state.cumulative_p += p
    return BoxPolicy(theta=theta, s_at_theta=float(s))


def realize_open(policy: BoxPolicy, realized_broken: int, coin: float) -> bool:
    if realized_broken < policy.theta:
        return True
    if realized_broken > policy.theta:
        return False
    return coin < policy.s_at_theta


class Magician:
    """Online wrapper: ex-ante DP state plus the realized broken-wand count."""

    def __init__(self, gamma: float, wands: int):
        self.state = create_magician(MagicianConfig(gamma, wands))
        self.broken = 0

    def present(self, p: float, coin: float) -> bool:
        policy = offer_box(self.state, p)
        return realize_open(policy, self.broken, coin)

    def break_wand(self) -> None:
        if self.broken >= self.state.wands:
            raise WandBudgetExceeded("all wands already broken")
        self.broken += 1


def gamma_lower_bound(k: int) -> float:
    """``1 - 1/sqrt(k+3)``: a gamma that never needs more than k wands."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    return 1.0 - 1.0 / math.sqrt(k + 3)


def hardness_upper_bound(k: int) -> float:
    """``1 - k^k / (e^k k!)``, evaluated in log space."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    return 1.0 - math.exp(k * math.log(k) - k - math.lgamma(k + 1))


def sand_run(gamma: float, probs: Sequence[float]) -> tuple[list[int], list[np.ndarray]]:
    """Sand displacement process on an unbounded tape.

    Each round selects the leftmost ``gamma`` of the sand and moves a ``p``
    fraction of the selection one position right.  Returns the per-round
    thresholds and the CDFs at the start of every round (plus the final one).
    """
    n = len(probs)
    st = SandState(cdf=np.ones(n + 1))
    thresholds: list[int] = []
    cdfs = [st.cdf.copy()]
    for p in probs:
        phi = st.cdf
        theta = _threshold(phi, gamma)
        selected = np.minimum(phi, gamma)
        selected[theta:] = min(gamma, phi[theta])
        shifted = np.concatenate(([0.0], selected[:-1]))
        st.cdf = phi - p * selected + p * shifted
        st.barrier = theta + 1
        st.round += 1
        thresholds.append(theta)
        cdfs.append(st.cdf.copy())
    return thresholds, cdfs


def max_threshold(gamma: float, probs: Sequence[float]) -> int:
    """Largest threshold the magician DP uses on this sequence."""
    if len(probs) == 0:
        return 0
    st = create_magician(MagicianConfig(gamma, len(probs) + 1))
    best = 0
    for p in probs:
        best = max(best, offer_box(st, p).theta)
    return best
