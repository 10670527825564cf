"""Deterministic farm biology and cost functions.

Fish weight follows a Bertalanffy growth curve, the population decays at
a constant continuous mortality rate, and cash flows (harvesting cost,
cumulative feeding cost) are derived from biomass and its growth rate.
All cash flows are expressed discounted to time 0.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import TimeGrid


@dataclass(frozen=True)
class FarmParams:
    """Biology and cost constants of a single harvesting cycle.

    The default cost profile ties production cost to half the market
    salmon price, harvesting cost to 10% of production cost and yearly
    feeding cost to 25% of production cost; ``with_market_price`` and
    ``with_feed_share`` build consistent instances.
    """

    a: float = 1.113
    b: float = 1.097
    c: float = 1.43
    w_inf: float = 6.0
    mortality: float = 0.10
    conversion: float = 1.1
    n0: float = 10_000.0
    horizon: float = 3.0
    n_harvest_dates: int = 72
    market_spot: float = 95.0      # quoted salmon price, per kg
    production_cost: float = 47.5  # per kg
    harvest_cost0: float = 4.75    # per kg
    feed_cost0: float = 11.875     # per kg per year

    def __post_init__(self):
        for name in (
            "a", "b", "c", "w_inf", "mortality", "conversion", "n0",
            "horizon", "market_spot", "production_cost", "harvest_cost0",
            "feed_cost0",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.n_harvest_dates < 1:
            raise ValueError("n_harvest_dates must be >= 1")
        if self.a <= self.b:
            raise ValueError("need a > b for positive weight at t = 0")

    @property
    def net_spot0(self) -> float:
        """Model initial salmon value: market price net of production
        costs, with harvesting and feeding cost rates added back."""
        return (
            self.market_spot
            - self.production_cost
            + self.harvest_cost0
            + self.feed_cost0
        )

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.n_harvest_dates)

    @classmethod
    def with_market_price(cls, market_spot: float, feed_share: float = 0.25, **kw):
        """Default cost profile for a given quoted salmon price."""
        pc = 0.5 * market_spot
        return cls(
            market_spot=market_spot,
            production_cost=pc,
            harvest_cost0=0.1 * pc,
            feed_cost0=feed_share * pc,
            **kw,
        )

    def with_feed_share(self, feed_share: float) -> "FarmParams":
        """Same farm with feeding costs at ``feed_share`` of production cost."""
        if not 0.0 < feed_share < 1.0:
            raise ValueError("feed_share must lie in (0, 1)")
        return replace(self, feed_cost0=feed_share * self.production_cost)


def weight(fp: FarmParams, t) -> np.ndarray | float:
    """Fish weight in kg, w(t) = w_inf (a - b e^{-c t})^3."""
    t = _check_time(t)
    return fp.w_inf * (fp.a - fp.b * np.exp(-fp.c * t)) ** 3


def weight_rate(fp: FarmParams, t) -> np.ndarray | float:
    """Time derivative of the weight curve, kg per year."""
    t = _check_time(t)
    ect = np.exp(-fp.c * t)
    return 3.0 * fp.w_inf * (fp.a - fp.b * ect) ** 2 * fp.b * fp.c * ect


def population(fp: FarmParams, t) -> np.ndarray | float:
    """Surviving fish count, n0 e^{-m t}."""
    t = _check_time(t)
    return fp.n0 * np.exp(-fp.mortality * t)


def biomass(fp: FarmParams, t) -> np.ndarray | float:
    """Total biomass in kg."""
    return population(fp, t) * weight(fp, t)


def harvest_cost(fp: FarmParams, t) -> np.ndarray | float:
    """Total harvesting cost at t (undiscounted)."""
    return fp.harvest_cost0 * biomass(fp, t)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be >= 0")
    return t


@dataclass(frozen=True)
class CostCurves:
    """Per-grid-date biology and cost arrays, shared across the engine."""

    grid: TimeGrid
    weight: np.ndarray
    population: np.ndarray
    biomass: np.ndarray
    harvest_cost: np.ndarray
    feed_rate: np.ndarray  # n(t) w'(t) * conversion, kg feed per year


def cost_curves(fp: FarmParams, grid: TimeGrid | None = None) -> CostCurves:
    grid = grid or fp.grid
    t = grid.times
    w = weight(fp, t)
    n = population(fp, t)
    return CostCurves(
        grid=grid,
        weight=w,
        population=n,
        biomass=n * w,
        harvest_cost=fp.harvest_cost0 * n * w,
        feed_rate=n * weight_rate(fp, t) * fp.conversion,
    )


def cumulative_feed_cost(
    fp: FarmParams,
    r: float,
    feed_factor: np.ndarray,
    grid: TimeGrid | None = None,
    discount_at_upper: bool = False,
) -> np.ndarray:
    """Discounted cumulative feeding cost CF(t_k) on the grid.

    ``feed_factor`` holds the feed-price multiplier F_t / F_0 at the grid
    dates, either one sequence of length N+1 or a (n_paths, N+1) panel.
    The integral of e^{-r s} F_0 feed_factor(s) n(s) w'(s) conversion is
    taken by the trapezoidal rule on the grid nodes.

    ``discount_at_upper`` reproduces a literal reading where the discount
    factor is evaluated at the upper integration limit instead of at the
    running time; it is exposed for comparison only.
    """
    grid = grid or fp.grid
    feed_factor = np.asarray(feed_factor, dtype=float)
    if np.any(feed_factor < 0):
        raise ValueError("feed_factor entries must be >= 0")
    if feed_factor.shape[-1] != grid.n_steps + 1:
        raise ValueError(
            f"feed_factor must have {grid.n_steps + 1} entries per path, "
            f"got shape {feed_factor.shape}"
        )
    t = grid.times
    curves = cost_curves(fp, grid)
    integrand = fp.feed_cost0 * feed_factor * curves.feed_rate
    if not discount_at_upper:
        integrand = integrand * np.exp(-r * t)
    steps = 0.5 * grid.dt * (integrand[..., 1:] + integrand[..., :-1])
    cf = np.zeros_like(integrand)
    np.cumsum(steps, axis=-1, out=cf[..., 1:])
    if discount_at_upper:
        cf = cf * np.exp(-r * t)
    return cf
