"""Config loading, seeded Monte Carlo runs, statistics and report files."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .distributions import DistributionError, distribution_from_dict
from .magician import ConfigurationError, MagicianConfig, create_magician, hardness_upper_bound, offer_box
from .multi_buyer import (
    MarketError,
    MarketSpec,
    magician_plan,
    post_rounding,
    pre_rounding,
    solve_opt_bar,
)
from .prophet import ProphetInstance, find_threshold, gambler_plan, prophet_payoff, run_gambler
from .single_buyer import DEFAULT_EPSILON, BuyerModel, Matroid, MechanismError, build

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Report",
    "load_market",
    "market_from_dict",
    "load_prophet",
    "trial_rng",
    "sample_types",
    "run_trials",
    "emit_report",
    "format_float",
    "confidence_z",
    "hardness_experiment",
    "prophet_trials",
    "magician_trace",
    "read_probs",
]

TAG_TYPES = 0
TAG_COINS = 1


class ConfigError(ValueError):
    pass


def format_float(x: float) -> str:
    return f"{float(x):.12g}"


def confidence_z(confidence: float) -> float:
    if not 0 < confidence < 1:
        raise ConfigError("confidence must lie in (0, 1)")
    return NormalDist().inv_cdf(0.5 + confidence / 2)


def trial_rng(seed: int, trial: int, tag: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, trial, tag)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, trial, tag])))


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _budget(value, where: str) -> float:
    if value is None or value == "inf":
        return math.inf
    try:
        b = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.budget: expected a number, null or \"inf\"") from None
    if not b > 0:
        raise ConfigError(f"{where}.budget: budget must be positive")
    return b


def _buyer_from_dict(d: dict, m: int, where: str, epsilon: float) -> BuyerModel:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    kind = d.get("kind")
    budget = _budget(d.get("budget"), where)
    alpha = d.get("alpha")
    try:
        if kind == "correlated_matroid":
            raw = d.get("types")
            if not isinstance(raw, list) or not raw:
                raise ConfigError(f"{where}.types: nonempty list required")
            table = []
            for t in raw:
                if isinstance(t, dict):
                    table.append((float(t["prob"]), tuple(float(v) for v in t["values"])))
                else:
                    table.append((float(t[0]), tuple(float(v) for v in t[1])))
            if any(len(v) != m for _, v in table):
                raise ConfigError(f"{where}.types: valuation length differs from item count {m}")
            mat = Matroid.from_dict(d["matroid"]) if d.get("matroid") else None
            return BuyerModel(kind, budget=budget, type_table=tuple(table), matroid=mat,
                              alpha=alpha, epsilon=epsilon)
        dists = d.get("distributions")
        if not isinstance(dists, list):
            raise ConfigError(f"{where}.distributions: list required")
        if len(dists) != m:
            raise ConfigError(f"{where}.distributions: dimension {len(dists)} differs from item count {m}")
        parsed = tuple(distribution_from_dict(x) for x in dists)
        return BuyerModel(kind, distributions=parsed, budget=budget, alpha=alpha, epsilon=epsilon)
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"{where}: malformed buyer literal ({exc!r})") from None
    except (MechanismError, DistributionError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def market_from_dict(d: dict) -> tuple[MarketSpec, dict]:
    """Parse a market literal.  Returns the market and extra fields (e.g. seed)."""
    if not isinstance(d, dict):
        raise ConfigError("market config must be a JSON object")
    items = d.get("items")
    if not isinstance(items, list) or not items:
        raise ConfigError("items: nonempty list required")
    parsed_items = []
    for j, it in enumerate(items):
        try:
            supply = it["supply"]
            item_id = it.get("id", str(j))
        except (KeyError, TypeError, AttributeError):
            raise ConfigError(f"items[{j}]: needs fields id and supply") from None
        if int(supply) != supply or supply < 1:
            raise ConfigError(f"items[{j}].supply: supply >= 1 required")
        parsed_items.append((item_id, int(supply)))
    epsilon = float(d.get("epsilon", DEFAULT_EPSILON))
    buyers = d.get("buyers", [])
    if not isinstance(buyers, list):
        raise ConfigError("buyers: list required")
    models = [_buyer_from_dict(b, len(items), f"buyers[{i}]", epsilon) for i, b in enumerate(buyers)]
    try:
        spec = MarketSpec(tuple(parsed_items), tuple(models), d.get("objective", "revenue"), d.get("gamma"))
    except (MarketError, ConfigurationError) as exc:
        raise ConfigError(str(exc)) from None
    return spec, {"seed": d.get("seed")}


def _load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_market(path) -> MarketSpec:
    return market_from_dict(_load_json(path))[0]


def load_prophet(path) -> ProphetInstance:
    d = _load_json(path)
    try:
        dists = tuple(distribution_from_dict(x) for x in d["distributions"])
        return ProphetInstance(dists, int(d["k"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: prophet config needs k and distributions ({exc!r})") from None
    except (DistributionError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Auction experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    market: MarketSpec | str | Path
    mechanism: str = "pre"
    trials: int = 100_000
    seed: int = 0
    output: str | Path | None = None
    confidence: float = 0.999
    order: tuple | None = None
    trace: str | Path | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.mechanism not in ("pre", "post"):
            raise ConfigError(f"mechanism must be pre or post, got {self.mechanism!r}")
        confidence_z(self.confidence)

    def load(self) -> MarketSpec:
        if isinstance(self.market, MarketSpec):
            return self.market
        return load_market(self.market)


@dataclass
class Report:
    mechanism: str
    objective: str
    trials: int
    seed: int
    gamma: float
    alpha_min: float
    opt_bar_value: float
    mean: float
    ci_lo: float
    ci_hi: float
    open_freq: np.ndarray
    alloc_freq: np.ndarray
    item_ids: tuple
    violations: int = 0
    runtime: float = field(default=0.0, compare=False)

    @property
    def failed(self) -> bool:
        return self.violations > 0

    @property
    def status(self) -> str:
        return "FAILED" if self.failed else "OK"

    @property
    def n_buyers(self) -> int:
        return self.open_freq.shape[0]


def sample_types(market: MarketSpec, rng: np.random.Generator) -> list:
    """Valuation vectors for independent buyers, type ids for correlated ones."""
    out = []
    for b in market.buyers:
        if b.kind == "correlated_matroid":
            cum = np.cumsum([f for f, _ in b.type_table])
            out.append(int(min(np.searchsorted(cum, rng.random(), side="right"), len(cum) - 1)))
        else:
            u = rng.random(b.m)
            out.append(np.array([d.quantile(x) for d, x in zip(b.distributions, u)]))
    return out


def run_trials(config: ExperimentConfig) -> Report:
    started = time.perf_counter()
    market = config.load()
    n, m = market.n, market.m
    q_bar, opt_bar = solve_opt_bar(market)
    order = list(config.order) if config.order is not None else list(range(n))
    if sorted(order) != list(range(n)):
        raise ConfigError("order must be a permutation of the buyers")

    if config.mechanism == "pre":
        plan = magician_plan(market.gamma, market.supplies, q_bar.q_bar, order)
        cache: dict = {}

        def one(types, rng):
            return pre_rounding(market, q_bar, order, types, rng, plan, cache)
    else:
        builds = [build(b, q_bar.q_bar[i], market.objective) for i, b in enumerate(market.buyers)]
        for i, res in enumerate(builds):
            if res.exact_rule is None:
                raise ConfigError(f"buyer {i}: post-rounding needs an exact allocation rule "
                                  f"({market.buyers[i].kind} has none)")
        exact = np.array([r.exact_rule for r in builds]).reshape(n, m)
        plan = magician_plan(market.gamma, market.supplies, exact, range(n))

        def one(types, rng):
            return post_rounding(market, q_bar, types, rng, builds, plan)

    values = np.zeros(config.trials)
    opened = np.zeros((n, m))
    alloc = np.zeros((n, m))
    violations = 0
    trace_rows = []
    for t in range(config.trials):
        types = sample_types(market, trial_rng(config.seed, t, TAG_TYPES))
        out = one(types, trial_rng(config.seed, t, TAG_COINS))
        values[t] = out.revenue if market.objective == "revenue" else out.welfare
        opened += out.opened
        alloc += out.allocations
        violations += out.violations
        if config.trace is not None:
            for i in range(n):
                for j in range(m):
                    trace_rows.append((t, i, market.items[j][0], int(out.allocations[i, j]),
                                       out.payments[i]))

    mean = float(values.mean())
    half = 0.0
    if config.trials > 1:
        half = confidence_z(config.confidence) * float(values.std(ddof=1)) / math.sqrt(config.trials)
    report = Report(
        mechanism=config.mechanism, objective=market.objective, trials=config.trials,
        seed=config.seed, gamma=market.gamma, alpha_min=market.alpha_min,
        opt_bar_value=opt_bar, mean=mean, ci_lo=mean - half, ci_hi=mean + half,
        open_freq=opened / config.trials, alloc_freq=alloc / config.trials,
        item_ids=tuple(i for i, _ in market.items), violations=violations,
        runtime=time.perf_counter() - started,
    )
    if config.trace is not None:
        with open(config.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "buyer", "item", "allocated", "payment"])
            for t, i, j, a, p in trace_rows:
                w.writerow([t, i, j, a, format_float(p)])
    if config.output is not None:
        emit_report(report, config.output)
    return report


def _summary_rows(r: Report) -> list[tuple[str, float, float | None, float | None]]:
    return [
        ("mean_objective", r.mean, r.ci_lo, r.ci_hi),
        ("opt_bar_value", r.opt_bar_value, None, None),
        ("lower_bound", r.gamma * r.alpha_min * r.opt_bar_value, None, None),
        ("gamma", r.gamma, None, None),
        ("alpha_min", r.alpha_min, None, None),
        ("trials", r.trials, None, None),
        ("seed", r.seed, None, None),
        ("supply_violations", r.violations, None, None),
        ("failed", int(r.failed), None, None),
    ]


def _cell_rows(r: Report):
    for i in range(r.n_buyers):
        for j, item in enumerate(r.item_ids):
            yield f"open_freq[{i},{item}]", float(r.open_freq[i, j])
            yield f"alloc_freq[{i},{item}]", float(r.alloc_freq[i, j])


def emit_report(report: Report, path, fmt: str = "csv") -> None:
    """Write the report; runtime is left out so files are byte-reproducible."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "ci_lo", "ci_hi"])
        if report.n_buyers > 0:
            for name, v, lo, hi in _summary_rows(report):
                w.writerow([name, format_float(v),
                            "" if lo is None else format_float(lo),
                            "" if hi is None else format_float(hi)])
            for name, v in _cell_rows(report):
                w.writerow([name, format_float(v), "", ""])
        text = buf.getvalue()
    elif fmt == "json":
        def num(x):
            return None if x is None else float(format_float(x))
        doc = {"metrics": [], "cells": []}
        if report.n_buyers > 0:
            doc["metrics"] = [{"metric": n, "value": num(v), "ci_lo": num(lo), "ci_hi": num(hi)}
                              for n, v, lo, hi in _summary_rows(report)]
            doc["cells"] = [{"metric": n, "value": num(v)} for n, v in _cell_rows(report)]
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# Other experiments
# ---------------------------------------------------------------------------

def hardness_experiment(k: int, n: int, trials: int, seed: int = 0,
                        confidence: float = 0.999) -> tuple[float, float, float]:
    """``n`` boxes with probability ``k/n`` each: E[min(S, k)] / k.

    Returns (empirical mean ratio, CI half-width, hardness bound).  No
    magician can open each box with probability above the empirical ratio.
    """
    if k < 1 or n < k or trials < 1:
        raise ConfigError("need k >= 1, n >= k and trials >= 1")
    rng = trial_rng(seed, 0, TAG_COINS)
    s = np.minimum(rng.binomial(n, k / n, size=trials), k) / k
    half = confidence_z(confidence) * float(s.std(ddof=1)) / math.sqrt(trials) if trials > 1 else 0.0
    return float(s.mean()), half, hardness_upper_bound(k)


def prophet_trials(instance: ProphetInstance, trials: int, seed: int = 0):
    """Returns per-trial gambler and prophet totals."""
    T, rho = find_threshold(instance)
    plan = gambler_plan(instance, T, rho)
    gam = np.zeros(trials)
    pro = np.zeros(trials)
    for t in range(trials):
        u = trial_rng(seed, t, TAG_TYPES).random(len(instance.distributions))
        draws = [d.quantile(x) for d, x in zip(instance.distributions, u)]
        _, gam[t] = run_gambler(instance, T, draws, trial_rng(seed, t, TAG_COINS), rho, plan)
        pro[t] = prophet_payoff(draws, instance.k)
    return gam, pro


def read_probs(path) -> list[float]:
    """Box probabilities from a JSON list or comma/whitespace separated text."""
    text = Path(path).read_text()
    try:
        vals = json.loads(text)
        if not isinstance(vals, list):
            raise ConfigError(f"{path}: expected a list of probabilities")
    except json.JSONDecodeError:
        vals = text.replace(",", " ").split()
    try:
        return [float(v) for v in vals]
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: probabilities must be numbers") from None


def magician_trace(gamma: float, wands: int, probs) -> list[list[float]]:
    """Rows ``[round, theta, s, phi_0..phi_k]`` with phi taken before each box."""
    state = create_magician(MagicianConfig(gamma, wands))
    rows = []
    for r, p in enumerate(probs, start=1):
        phi = state.cdf.copy()
        pol = offer_box(state, p)
        rows.append([r, pol.theta, pol.s_at_theta, *phi.tolist()])
    return rows
