"""Least-squares Monte Carlo for the optimal harvesting problem.

Backward induction with per-date polynomial regression of the
continuation value, run either on the 2-dim salmon state (deterministic
feed costs) or the 4-dim salmon + soy state (stochastic feed costs).
Feed costs enter as a running cost: the regression target subtracts the
feed cost accrued over each interval, keeping the state Markovian
without augmenting it by the accrued cost.

All values are expressed discounted to time 0.  Harvesting is first
allowed at date 1 (the stock is weightless smolt at date 0) and forced
at the final date.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .farm import FarmParams, cost_curves, cumulative_feed_cost
from .model import CommodityParams, CommodityState, PathSet, expected_relative_price

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class LsmcRule:
    """Per-date continuation-value regressions defining a stopping rule.

    ``coefs[k - 1]`` holds the regression coefficients of date k for
    k = 1..N-1; dates 0 and N carry no regression (no exercise at 0,
    forced exercise at N).
    """

    mode: str
    dim: int
    coefs: np.ndarray
    train_seed: int
    feed_factor: np.ndarray | None = None  # expected curve, deterministic mode
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n_basis = basis_size(self.dim)
        if self.coefs.shape[1] != n_basis:
            raise ValueError(
                f"coefficient rows must have {n_basis} entries for dim {self.dim}"
            )


@dataclass(frozen=True)
class StoppingOutcome:
    """Pathwise result of applying a stopping rule."""

    stop_index: np.ndarray
    values: np.ndarray  # discounted stopped value per path
    v0: float
    se: float

    @classmethod
    def from_values(cls, stop_index, values) -> "StoppingOutcome":
        return cls(
            stop_index=stop_index,
            values=values,
            v0=float(values.mean()),
            se=float(values.std(ddof=1) / np.sqrt(len(values))),
        )


@dataclass(frozen=True)
class CompareReport:
    """Paired comparison of two rules on the same validation paths."""

    ri: float
    index_diff: np.ndarray  # stop index, rule A minus rule B, per path
    value_diff: np.ndarray
    outcome_a: StoppingOutcome
    outcome_b: StoppingOutcome


def basis_size(dim: int) -> int:
    return 1 + dim + dim * (dim + 1) // 2


def state_features(paths: PathSet, k: int, dim: int) -> np.ndarray:
    """Regression coordinates at date k: (log spot, yield) per commodity.

    ``dim`` selects how many state components the consumer reads; a
    2-dim rule reads only the first commodity of a 4-dim path set.
    """
    if dim > paths.dim:
        raise ValueError(f"need {dim}-dim paths, got dim {paths.dim}")
    cols = [np.log(paths.spot(0)[:, k]), paths.delta(0)[:, k]]
    if dim == 4:
        cols += [np.log(paths.spot(1)[:, k]), paths.delta(1)[:, k]]
    return np.column_stack(cols)


def poly_basis(x: np.ndarray) -> np.ndarray:
    """All monomials of degree <= 2 (constant, linear, cross, square)."""
    m, d = x.shape
    cols = [np.ones(m)]
    cols += [x[:, i] for i in range(d)]
    cols += [x[:, i] * x[:, j] for i, j in combinations_with_replacement(range(d), 2)]
    return np.column_stack(cols)


def discounted_payoff(paths: PathSet, fp: FarmParams, r: float) -> np.ndarray:
    """e^{-r t_k} (S^1 B(t_k) - CH(t_k)) per path and date."""
    curves = cost_curves(fp, paths.grid)
    disc = np.exp(-r * paths.grid.times)
    return disc * curves.biomass * (paths.spot(0) - fp.harvest_cost0)


def feed_factor(
    paths: PathSet,
    mode: str,
    soy_params: CommodityParams | None = None,
    soy_init: CommodityState | None = None,
    r: float = 0.0,
) -> np.ndarray:
    """Feed-price multiplier F_t / F_0 on the grid.

    Stochastic mode reads the simulated soy spot (normalized by its
    initial value); deterministic mode evaluates the closed-form
    expected relative price curve.
    """
    if mode == STOCHASTIC:
        if paths.dim != 4:
            raise ValueError("stochastic feed costs require 4-dim paths")
        soy = paths.spot(1)
        return soy / soy[:, :1]
    if mode == DETERMINISTIC:
        if soy_params is None:
            raise ValueError("deterministic mode needs the soy parameters")
        soy_init = soy_init or CommodityState(1.0, 0.0)
        return expected_relative_price(soy_params, r, soy_init, paths.grid.times)
    raise ValueError(f"unknown mode {mode!r}")


def _stopped_values(payoff, cf, stop_index):
    rows = np.arange(payoff.shape[0])
    cf = np.broadcast_to(cf, payoff.shape)
    return payoff[rows, stop_index] - cf[rows, stop_index]


def solve(
    paths: PathSet,
    fp: FarmParams,
    r: float,
    mode: str,
    soy_params: CommodityParams | None = None,
    soy_init: CommodityState | None = None,
    discount_at_upper: bool = False,
) -> tuple[LsmcRule, StoppingOutcome]:
    """Backward induction on the training paths.

    Returns the fitted rule and its in-sample outcome.  Deterministic
    mode expects 2-dim paths; stochastic mode expects 4-dim paths.
    """
    dim = 2 if mode == DETERMINISTIC else 4
    if paths.dim != dim:
        raise ValueError(f"{mode} mode requires {dim}-dim paths, got {paths.dim}")
    n = paths.grid.n_steps
    factor = feed_factor(paths, mode, soy_params, soy_init, r)
    cf = cumulative_feed_cost(fp, r, factor, paths.grid, discount_at_upper)
    payoff = discounted_payoff(paths, fp, r)

    n_basis = basis_size(dim)
    coefs = np.zeros((n - 1, n_basis))
    deficient: list[int] = []

    value = payoff[:, n].copy()
    stop_index = np.full(paths.n_paths, n)
    cf2d = np.atleast_2d(cf)
    for k in range(n - 1, 0, -1):
        target = value - (cf2d[:, k + 1] - cf2d[:, k])
        design = poly_basis(state_features(paths, k, dim))
        beta, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
        if rank < n_basis:
            deficient.append(k)
        coefs[k - 1] = beta
        continuation = design @ beta
        stop = payoff[:, k] >= continuation
        value = np.where(stop, payoff[:, k], target)
        stop_index = np.where(stop, k, stop_index)

    rule = LsmcRule(
        mode=mode,
        dim=dim,
        coefs=coefs,
        train_seed=paths.seed,
        feed_factor=factor if mode == DETERMINISTIC else None,
        diagnostics={"rank_deficient_dates": deficient[::-1]},
    )
    outcome = StoppingOutcome.from_values(
        stop_index, _stopped_values(payoff, cf, stop_index)
    )
    return rule, outcome


def apply_rule(rule: LsmcRule, paths: PathSet, payoff: np.ndarray) -> np.ndarray:
    """Stop index per path: first date where exercise beats the fitted
    continuation, forced stop at the final date."""
    n = paths.grid.n_steps
    stop_index = np.full(paths.n_paths, n)
    alive = np.ones(paths.n_paths, dtype=bool)
    for k in range(1, n):
        design = poly_basis(state_features(paths, k, rule.dim))
        stop = alive & (payoff[:, k] >= design @ rule.coefs[k - 1])
        stop_index[stop] = k
        alive &= ~stop
        if not alive.any():
            break
    return stop_index


def evaluate(
    rule: LsmcRule,
    fresh_paths: PathSet,
    fp: FarmParams,
    r: float,
    discount_at_upper: bool = False,
) -> StoppingOutcome:
    """Out-of-sample evaluation under the stochastic-feed objective.

    Whatever feed-cost assumption trained the rule, the realized value
    always accrues the simulated (stochastic) feed cost.
    """
    if fresh_paths.dim != 4:
        raise ValueError("evaluation requires 4-dim paths")
    if fresh_paths.seed == rule.train_seed:
        raise ValueError("validation paths must not reuse the training seed")
    payoff = discounted_payoff(fresh_paths, fp, r)
    factor = feed_factor(fresh_paths, STOCHASTIC)
    cf = cumulative_feed_cost(fp, r, factor, fresh_paths.grid, discount_at_upper)
    stop_index = apply_rule(rule, fresh_paths, payoff)
    return StoppingOutcome.from_values(
        stop_index, _stopped_values(payoff, cf, stop_index)
    )


def compare(
    rule_a: LsmcRule,
    rule_b: LsmcRule,
    fresh_paths: PathSet,
    fp: FarmParams,
    r: float,
    discount_at_upper: bool = False,
) -> CompareReport:
    """Pathwise comparison of two rules on shared validation paths."""
    out_a = evaluate(rule_a, fresh_paths, fp, r, discount_at_upper)
    out_b = evaluate(rule_b, fresh_paths, fp, r, discount_at_upper)
    return CompareReport(
        ri=out_a.v0 / out_b.v0,
        index_diff=out_a.stop_index - out_b.stop_index,
        value_diff=out_a.values - out_b.values,
        outcome_a=out_a,
        outcome_b=out_b,
    )
