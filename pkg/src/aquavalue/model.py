"""Two-factor commodity dynamics: exact risk-neutral simulation and
closed-form futures pricing.

Each commodity follows a mean-reverting convenience-yield model

    dS_t     = (r - delta_t) S_t dt + sigma1 S_t dW1_t
    ddelta_t = (kappa (alpha - delta_t) - lam) dt + sigma2 dW2_t

with corr(dW1, dW2) = rho.  Simulation is done in (log S, delta)
coordinates with exact one-step Gaussian transitions, so there is no
discretization bias even on coarse grids.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CommodityParams:
    """Parameter six-tuple of one commodity.

    ``lam`` (risk premium) must be nonnegative unless
    ``allow_negative_lambda`` is set, which calibration uses to explore
    unconstrained fits.
    """

    sigma1: float
    sigma2: float
    kappa: float
    alpha: float
    lam: float
    rho: float
    allow_negative_lambda: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.sigma1 < 0:
            raise ValueError(f"sigma1 must be >= 0, got {self.sigma1}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if abs(self.rho) > 1:
            raise ValueError(f"|rho| must be <= 1, got {self.rho}")
        if self.lam < 0 and not self.allow_negative_lambda:
            raise ValueError(
                f"lam must be >= 0, got {self.lam} "
                "(pass allow_negative_lambda=True to override)"
            )

    @property
    def alpha_hat(self) -> float:
        """Risk-adjusted long-term yield mean, alpha - lam / kappa."""
        return self.alpha - self.lam / self.kappa

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.sigma1, self.sigma2, self.kappa, self.alpha, self.lam, self.rho]
        )

    @classmethod
    def from_vector(cls, v, allow_negative_lambda: bool = False) -> "CommodityParams":
        return cls(*map(float, v), allow_negative_lambda=allow_negative_lambda)


@dataclass(frozen=True)
class CommodityState:
    """Spot price and convenience yield of one commodity."""

    spot: float
    delta: float

    def __post_init__(self):
        if self.spot <= 0:
            raise ValueError(f"spot must be > 0, got {self.spot}")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform decision grid t_k = k * horizon / n_steps, k = 0..n_steps."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass(frozen=True)
class PathSet:
    """Simulated panel of states on a grid.

    ``values`` has shape (n_paths, n_steps + 1, dim) with dim 2 for one
    commodity (spot, yield) or 4 for two stacked commodities
    (spot1, yield1, spot2, yield2).  Immutable after construction.
    """

    grid: TimeGrid
    dim: int
    values: np.ndarray
    seed: int
    measure: str = "risk-neutral"

    def __post_init__(self):
        if self.dim not in (2, 4):
            raise ValueError(f"dim must be 2 or 4, got {self.dim}")
        expected = (self.values.shape[1], self.values.shape[2])
        if expected != (self.grid.n_steps + 1, self.dim):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid/dim"
            )
        self.values.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def spot(self, commodity: int = 0) -> np.ndarray:
        """(n_paths, n_steps + 1) spot panel of one commodity."""
        return self.values[:, :, 2 * commodity]

    def delta(self, commodity: int = 0) -> np.ndarray:
        return self.values[:, :, 2 * commodity + 1]

    def first_commodity(self) -> "PathSet":
        """Two-dimensional view keeping only the first commodity."""
        if self.dim == 2:
            return self
        return PathSet(self.grid, 2, self.values[:, :, :2], self.seed, self.measure)


def yield_loading(params: CommodityParams, dT) -> np.ndarray | float:
    """Loading of the convenience yield on log futures, (1 - e^{-kappa dT}) / kappa."""
    return (1.0 - np.exp(-params.kappa * np.asarray(dT, dtype=float))) / params.kappa


def log_futures_intercept(params: CommodityParams, r: float, dT) -> np.ndarray | float:
    """Deterministic part A(dT) of the log futures price.

    log F(S, delta, dT) = log S - delta * yield_loading(dT) + A(dT).
    """
    dT = np.asarray(dT, dtype=float)
    s1, s2, k, rho = params.sigma1, params.sigma2, params.kappa, params.rho
    ah = params.alpha_hat
    e1 = 1.0 - np.exp(-k * dT)
    e2 = 1.0 - np.exp(-2.0 * k * dT)
    return (
        (r - ah + 0.5 * s2**2 / k**2 - s1 * s2 * rho / k) * dT
        + 0.25 * s2**2 * e2 / k**3
        + (ah * k + s1 * s2 * rho - s2**2 / k) * e1 / k**2
    )


def futures_price(
    params: CommodityParams, r: float, state: CommodityState, dT
) -> np.ndarray | float:
    """Closed-form futures (= forward, deterministic rates) price."""
    dT = np.asarray(dT, dtype=float)
    if np.any(dT < 0):
        raise ValueError("time to maturity must be >= 0")
    out = state.spot * np.exp(
        -state.delta * yield_loading(params, dT)
        + log_futures_intercept(params, r, dT)
    )
    return float(out) if out.ndim == 0 else out


def expected_relative_price(
    params: CommodityParams, r: float, init: CommodityState, t
) -> np.ndarray | float:
    """Risk-neutral E[S_t / S_0], the deterministic feed-price multiplier.

    Equals the futures curve divided by the initial spot (futures equal
    expected spot under the pricing measure with deterministic rates).
    """
    return futures_price(params, r, init, t) / init.spot


def _step_moments(params: CommodityParams, r: float, dt: float):
    """Exact one-step transition of (log S, delta).

    Returns (e, drift_const, load_delta, chol) such that, given the
    current (x, d):

        mean_x = x + drift_const_x + load_delta_x * (d - alpha_hat)
        mean_d = alpha_hat + e * (d - alpha_hat)
        (x', d') = mean + chol @ z,  z ~ N(0, I_2)
    """
    s1, s2, k, rho = params.sigma1, params.sigma2, params.kappa, params.rho
    ah = params.alpha_hat
    e = np.exp(-k * dt)
    b = (1.0 - e) / k  # integral of e^{-k s} over the step

    # integrated yield: I = ah*dt + (d - ah)*b + noise
    var_d = s2**2 * (1.0 - e**2) / (2.0 * k)
    var_i = s2**2 / k**2 * (dt - 2.0 * b + (1.0 - e**2) / (2.0 * k))
    cov_di = s2**2 / k * (b - (1.0 - e**2) / (2.0 * k))
    cov_w1_i = rho * s2 / k * (dt - b)
    cov_w1_d = rho * s2 * b

    # x-noise = -I_noise + s1 * dW1
    var_x = var_i + s1**2 * dt - 2.0 * s1 * cov_w1_i
    cov_xd = -cov_di + s1 * cov_w1_d

    l11 = np.sqrt(max(var_x, 0.0))
    l21 = cov_xd / l11 if l11 > 0 else 0.0
    l22 = np.sqrt(max(var_d - l21**2, 0.0))
    chol = np.array([[l11, 0.0], [l21, l22]])

    drift_const = np.array([(r - 0.5 * s1**2) * dt - ah * dt, 0.0])
    load_delta = np.array([-b, e])
    return e, drift_const, load_delta, chol


def _normals(seed: int, stream: int, step: int, n_paths: int) -> np.ndarray:
    """Counter-based standard normals for one (commodity, step) substream.

    Philox keyed on the master seed with the (stream, step) pair in the
    counter gives bit-identical draws regardless of execution order.
    """
    bitgen = np.random.Philox(key=seed, counter=[0, 0, stream, step])
    return np.random.Generator(bitgen).standard_normal((n_paths, 2))


def simulate(
    params: CommodityParams,
    r: float,
    init: CommodityState,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    stream: int = 0,
) -> PathSet:
    """Exact simulation of one commodity on the grid.

    ``stream`` separates the random substreams of different commodities
    driven by the same master seed.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    _, drift_const, load_delta, chol = _step_moments(params, r, grid.dt)
    ah = params.alpha_hat

    values = np.empty((n_paths, grid.n_steps + 1, 2))
    x = np.full(n_paths, np.log(init.spot))
    d = np.full(n_paths, init.delta)
    values[:, 0, 0] = init.spot
    values[:, 0, 1] = init.delta
    for k in range(1, grid.n_steps + 1):
        z = _normals(seed, stream, k, n_paths)
        centered = d - ah
        x = x + drift_const[0] + load_delta[0] * centered + z @ chol[0]
        d = ah + load_delta[1] * centered + z @ chol[1]
        values[:, k, 0] = np.exp(x)
        values[:, k, 1] = d
    return PathSet(grid, 2, values, seed)


def simulate_pair(
    params1: CommodityParams,
    init1: CommodityState,
    params2: CommodityParams,
    init2: CommodityState,
    r: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
) -> PathSet:
    """Simulate two independent commodities into a 4-dim path set.

    The first commodity uses substream 0 and the second substream 1, so
    the first commodity's paths coincide with a standalone 2-dim
    simulation under the same seed.
    """
    p1 = simulate(params1, r, init1, grid, n_paths, seed, stream=0)
    p2 = simulate(params2, r, init2, grid, n_paths, seed, stream=1)
    values = np.concatenate([p1.values, p2.values], axis=2)
    return PathSet(grid, 4, values, seed)
