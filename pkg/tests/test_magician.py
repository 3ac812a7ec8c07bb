import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exante.magician import (
    BoxPolicy,
    ConfigurationError,
    Magician,
    MagicianConfig,
    WandBudgetExceeded,
    create_magician,
    gamma_lower_bound,
    hardness_upper_bound,
    max_threshold,
    offer_box,
    realize_open,
    sand_run,
)

from oracles import exact_break_cdf

probs_strategy = st.lists(st.floats(0.0, 1.0), min_size=0, max_size=25)


def run_dp(gamma, wands, probs):
    state = create_magician(MagicianConfig(gamma, wands))
    cdfs, pols = [state.cdf.copy()], []
    for p in probs:
        pols.append(offer_box(state, p))
        cdfs.append(state.cdf.copy())
    return pols, cdfs, state


def test_create_base_case():
    s = create_magician(MagicianConfig(0.5, 1))
    assert s.round == 1 and s.cumulative_p == 0.0
    np.testing.assert_array_equal(s.cdf, [1.0, 1.0])
    np.testing.assert_array_equal(create_magician(MagicianConfig(0.8, 4)).cdf, np.ones(5))


@pytest.mark.parametrize("gamma,wands", [(1.2, 1), (-0.1, 2), (0.5, 0), (0.5, 1.5)])
def test_invalid_config(gamma, wands):
    with pytest.raises(ConfigurationError):
        MagicianConfig(gamma, wands)


def test_two_boxes_hand_values():
    pols, cdfs, state = run_dp(0.5, 1, [0.5, 0.5])
    assert (pols[0].theta, pols[0].s_at_theta) == (0, 0.5)
    assert cdfs[1][0] == pytest.approx(0.75, abs=1e-15)
    assert pols[1].theta == 0
    assert pols[1].s_at_theta == pytest.approx(2 / 3, abs=1e-15)
    assert state.cumulative_p == 1.0 and state.round == 3


def test_two_boxes_against_path_enumeration():
    pols, cdfs, _ = run_dp(0.5, 1, [0.5, 0.5])
    ref = exact_break_cdf(pols, [0.5, 0.5], 1)
    for a, b in zip(cdfs, ref):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_zero_probability_box_leaves_cdf():
    _, cdfs, _ = run_dp(0.6, 3, [0.3, 0.7])
    state = create_magician(MagicianConfig(0.6, 3))
    for p in (0.3, 0.7):
        offer_box(state, p)
    before = state.cdf.copy()
    pol = offer_box(state, 0.0)
    np.testing.assert_array_equal(state.cdf, before)
    pmf = np.diff(np.concatenate(([0.0], before)))
    assert sum(pol.open_prob(w) * pmf[w] for w in range(4)) == pytest.approx(0.6, abs=1e-12)


def test_invalid_box_probability():
    with pytest.raises(ConfigurationError):
        offer_box(create_magician(MagicianConfig(0.5, 1)), 1.5)


def test_wand_budget_exceeded_does_not_mutate():
    state = create_magician(MagicianConfig(0.99, 1))
    offer_box(state, 1.0)
    before = state.cdf.copy()
    with pytest.raises(WandBudgetExceeded):
        offer_box(state, 1.0)
    np.testing.assert_array_equal(state.cdf, before)


def test_realize_open_rules():
    pol = BoxPolicy(theta=2, s_at_theta=0.5)
    assert realize_open(pol, 1, 0.99) is True
    assert realize_open(pol, 3, 0.0) is False
    pol0 = BoxPolicy(theta=0, s_at_theta=0.5)
    assert realize_open(pol0, 0, 0.3) is True
    assert realize_open(pol0, 0, 0.7) is False


def test_open_prob_function():
    pol = BoxPolicy(theta=1, s_at_theta=0.25)
    assert [pol.open_prob(w) for w in range(3)] == [1.0, 0.25, 0.0]


def test_gamma_lower_bound_values():
    assert gamma_lower_bound(1) == 0.5
    assert gamma_lower_bound(6) == pytest.approx(2 / 3, abs=1e-15)
    assert gamma_lower_bound(97) == pytest.approx(0.9, abs=1e-15)
    with pytest.raises(ConfigurationError):
        gamma_lower_bound(0)


def test_hardness_bound_values():
    assert hardness_upper_bound(1) == pytest.approx(1 - 1 / math.e, abs=1e-15)
    assert hardness_upper_bound(2) == pytest.approx(1 - 2 / math.e ** 2, abs=1e-14)
    assert hardness_upper_bound(100) == pytest.approx(1 - 1 / math.sqrt(200 * math.pi), abs=1e-3)
    # exact integer arithmetic at moderate k
    k = 12
    exact = 1 - k ** k / (math.e ** k * math.factorial(k))
    assert hardness_upper_bound(k) == pytest.approx(exact, abs=1e-13)
    assert 0 < hardness_upper_bound(10 ** 6) < 1
    with pytest.raises(ConfigurationError):
        hardness_upper_bound(0)


def test_bounds_ordered():
    for k in range(1, 200):
        assert gamma_lower_bound(k) < hardness_upper_bound(k)


def test_sand_examples():
    th, cdfs = sand_run(0.5, [0.5, 0.5])
    assert th == [0, 0]
    _, dp = run_dp(0.5, 2, [0.5, 0.5])[:2]
    for a, b in zip(cdfs, dp):
        np.testing.assert_allclose(a, b, atol=1e-12)
    th, cdfs = sand_run(0.9, [])
    assert th == [] and len(cdfs) == 1 and cdfs[0][0] == 1.0
    th, cdfs = sand_run(0.5, [1.0])
    np.testing.assert_allclose(cdfs[1], [0.5, 1.0], atol=1e-15)


def test_max_threshold_examples():
    assert max_threshold(0.5, [0.05] * 20) == 0
    assert max_threshold(0.99, [1.0, 1.0]) >= 1
    rng = np.random.default_rng(4)
    g = gamma_lower_bound(4)
    for _ in range(50):
        p = rng.dirichlet(np.ones(30)) * 4
        assert max_threshold(g, np.minimum(p, 1)) <= 3
    assert max_threshold(0.3, []) == 0


def test_online_wrapper():
    mg = Magician(0.5, 1)
    assert mg.present(0.5, 0.4) is True
    mg.break_wand()
    assert mg.present(0.5, 0.0) is False
    with pytest.raises(WandBudgetExceeded):
        mg.break_wand()


@settings(max_examples=200, deadline=None)
@given(gamma=st.floats(0.0, 1.0), probs=probs_strategy)
def test_dp_matches_path_enumeration(gamma, probs):
    wands = len(probs) + 1
    pols, cdfs, _ = run_dp(gamma, wands, probs)
    ref = exact_break_cdf(pols, probs, wands)
    for a, b in zip(cdfs, ref):
        np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(gamma=st.floats(0.0, 1.0), probs=probs_strategy)
def test_exactness_and_monotone_cdf(gamma, probs):
    wands = len(probs) + 1
    pols, cdfs, state = run_dp(gamma, wands, probs)
    for pol, phi in zip(pols, cdfs):
        pmf = np.diff(np.concatenate(([0.0], phi)))
        opened = sum(pol.open_prob(w) * pmf[w] for w in range(wands + 1))
        assert opened == pytest.approx(gamma, abs=1e-9)
        assert 0.0 <= pol.s_at_theta <= 1.0
        assert pol.theta == int(np.argmax(phi >= gamma - 1e-12))
    for phi in cdfs:
        assert np.all(np.diff(phi) >= -1e-15)
        assert phi[-1] == pytest.approx(1.0, abs=1e-12)
    assert state.cumulative_p == pytest.approx(sum(probs))


@settings(max_examples=300, deadline=None)
@given(gamma=st.floats(0.0, 1.0), probs=probs_strategy)
def test_sand_equivalence_and_geometric_decay(gamma, probs):
    th, sand = sand_run(gamma, probs)
    n = len(probs)
    pols, dp, _ = run_dp(gamma, n + 1, probs)
    assert th == [p.theta for p in pols]
    for a, b in zip(sand, dp):
        np.testing.assert_allclose(a, b[: n + 1], atol=1e-12)
        assert a.sum() <= n + 1 + 1e-9
    for i, t in enumerate(th):
        phi = sand[i]
        for w in range(t):
            assert phi[w] <= gamma * phi[w + 1] + 1e-12
        if gamma < 1:
            assert phi[: t + 1].sum() <= (1 - gamma ** (t + 1)) / (1 - gamma) + 1e-12


@settings(max_examples=200, deadline=None)
@given(k=st.integers(1, 10), weights=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40),
       fill=st.floats(0.0, 1.0))
def test_barrier_property(k, weights, fill):
    w = np.asarray(weights)
    if w.sum() == 0:
        return
    p = np.minimum(w / w.sum() * k * fill, 1.0)
    assert max_threshold(gamma_lower_bound(k), p) <= k - 1


def test_upper_bound_dominance_monte_carlo():
    # present p_i but break with p'_i = p_i / 2: open frequency stays >= gamma
    rng = np.random.default_rng(11)
    gamma, k, trials = gamma_lower_bound(2), 2, 40_000
    probs = rng.dirichlet(np.ones(12)) * 2
    pols, _, _ = run_dp(gamma, k, probs)
    broken = np.zeros(trials, dtype=int)
    sigma = math.sqrt(gamma * (1 - gamma) / trials)
    for pol, p in zip(pols, probs):
        coin = rng.random(trials)
        opened = (broken < pol.theta) | ((broken == pol.theta) & (coin < pol.s_at_theta))
        assert opened.mean() >= gamma - 3 * sigma
        broken += opened & (rng.random(trials) < p / 2)
    assert broken.max() <= k
