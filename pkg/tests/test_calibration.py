import dataclasses

import numpy as np
import pytest

from aquavalue.calibration import (
    DEFAULT_MATURITIES,
    CalibrationResult,
    FuturesPanel,
    KalmanSpec,
    cortazar_calibrate,
    cortazar_inner,
    fitted_curve,
    kalman_calibrate,
    kalman_filter,
    synthetic_panel,
    uncertainty_report,
)
from aquavalue.model import CommodityParams, CommodityState, futures_price

R = 0.0303
TRUE = CommodityParams(0.3, 0.45, 1.5, 0.05, 0.1, 0.6)
INIT = CommodityState(80.0, 0.08)


def exact_panel(params, states, dates, maturities):
    prices = [
        futures_price(params, R, CommodityState(float(np.exp(s)), float(d)), maturities)
        for s, d in states
    ]
    return FuturesPanel(dates, [maturities.copy() for _ in dates], prices)


def test_panel_validation():
    with pytest.raises(ValueError):
        FuturesPanel(np.array([0.0, 0.0]), [np.array([0.5])] * 2, [np.array([1.0])] * 2)
    with pytest.raises(ValueError):
        FuturesPanel(np.array([0.0]), [np.array([0.5, 1.0])], [np.array([1.0])])
    with pytest.raises(ValueError):
        FuturesPanel(np.array([0.0]), [np.array([0.5])], [np.array([-1.0])])


def test_fixed_grid_nearest_neighbour():
    panel = FuturesPanel(
        np.array([0.0]),
        [np.array([0.24, 0.5, 1.1])],
        [np.array([10.0, 20.0, 30.0])],
    )
    grid = panel.on_fixed_grid(np.array([0.25, 1.0]))
    assert np.array_equal(grid, [[10.0, 30.0]])


def test_inner_recovers_state_exactly():
    # noiseless quotes at the true parameters invert to the exact state
    mats = DEFAULT_MATURITIES
    prices = futures_price(TRUE, R, INIT, mats)
    s, d, sse = cortazar_inner(TRUE, R, mats, prices)
    assert s == pytest.approx(np.log(INIT.spot), abs=1e-10)
    assert d == pytest.approx(INIT.delta, abs=1e-9)
    assert sse < 1e-18


def test_inner_underdetermined():
    with pytest.raises(ValueError):
        cortazar_inner(TRUE, R, [0.5], [80.0])
    with pytest.raises(ValueError):
        cortazar_inner(TRUE, R, [0.5, 0.5], [80.0, 81.0])


def test_inner_is_least_squares_optimum():
    # perturbing the returned state can only increase the residual
    rng = np.random.default_rng(3)
    mats = DEFAULT_MATURITIES
    prices = futures_price(TRUE, R, INIT, mats) * np.exp(0.01 * rng.standard_normal(6))

    def sse_at(s, d):
        model = futures_price(TRUE, R, CommodityState(np.exp(s), d), mats)
        return np.sum((np.log(prices) - np.log(model)) ** 2)

    s, d, sse = cortazar_inner(TRUE, R, mats, prices)
    assert sse == pytest.approx(sse_at(s, d), rel=1e-9)
    for ds, dd in [(1e-4, 0), (-1e-4, 0), (0, 1e-4), (0, -1e-4)]:
        assert sse_at(s + ds, d + dd) >= sse - 1e-15


def test_nested_lsq_refits_noiseless_panel():
    rng = np.random.default_rng(7)
    n_dates = 40
    states = np.column_stack(
        [
            np.log(INIT.spot) + 0.2 * rng.standard_normal(n_dates),
            INIT.delta + 0.15 * rng.standard_normal(n_dates),
        ]
    )
    panel = exact_panel(TRUE, states, np.arange(n_dates) / 252.0, DEFAULT_MATURITIES)
    start = CommodityParams(0.4, 0.3, 1.0, 0.0, 0.3, 0.2)
    res = cortazar_calibrate(panel, R, start, n_starts=4, seed=1)
    assert res.method == "nested-lsq"
    assert res.goodness < 1e-8
    # fitted curves reproduce the quotes even if params are not unique
    for i in range(n_dates):
        fit = fitted_curve(res, i, DEFAULT_MATURITIES)
        assert np.allclose(fit, panel.prices[i], rtol=1e-4)
    assert np.allclose(res.log_spot, states[:, 0], atol=5e-3)


def test_nested_lsq_diagnostics_and_skipped_dates():
    panel = FuturesPanel(
        np.array([0.0, 1 / 252, 2 / 252]),
        [DEFAULT_MATURITIES, np.array([0.5]), DEFAULT_MATURITIES],
        [
            futures_price(TRUE, R, INIT, DEFAULT_MATURITIES),
            np.array([80.0]),
            futures_price(TRUE, R, INIT, DEFAULT_MATURITIES),
        ],
    )
    res = cortazar_calibrate(panel, R, TRUE, n_starts=1)
    assert res.diagnostics["skipped_dates"] == [1]
    assert np.isnan(res.log_spot[1]) and not np.isnan(res.log_spot[0])
    assert {"converged", "iterations", "bound_hits"} <= res.diagnostics.keys()


def test_kalman_filter_noiseless_likelihood_and_states():
    panel, states = synthetic_panel(
        TRUE, R, INIT, n_dates=120, noise_std=0.0, seed=5
    )
    spec = KalmanSpec(
        TRUE,
        R,
        R,
        1.0 / 252.0,
        DEFAULT_MATURITIES,
        np.full(6, 1e-6),
        states[0],
        np.zeros((2, 2)),
    )
    loglik, filtered, innov = kalman_filter(spec, np.log(panel.on_fixed_grid(DEFAULT_MATURITIES)))
    # near-noiseless quotes pin the state up to the variance floor
    assert np.allclose(filtered, states, atol=2e-3)
    assert np.max(np.abs(innov[0])) < 1e-8  # exact prior on the first date
    assert np.isfinite(loglik)


def test_kalman_filter_prefers_true_parameters():
    panel, states = synthetic_panel(
        TRUE, R, INIT, n_dates=250, noise_std=0.01, seed=9
    )
    logp = np.log(panel.on_fixed_grid(DEFAULT_MATURITIES))

    def loglik_at(params):
        spec = KalmanSpec(
            params,
            R,
            R,
            1.0 / 252.0,
            DEFAULT_MATURITIES,
            np.full(6, 0.01**2),
            states[0],
            0.01 * np.eye(2),
        )
        return kalman_filter(spec, logp)[0]

    base = loglik_at(TRUE)
    assert base > loglik_at(dataclasses.replace(TRUE, sigma1=0.6))
    assert base > loglik_at(dataclasses.replace(TRUE, sigma2=1.2))
    assert base > loglik_at(dataclasses.replace(TRUE, kappa=4.0))


def test_kalman_spec_rejects_sub_floor_variance():
    with pytest.raises(ValueError):
        KalmanSpec(
            TRUE, R, R, 1 / 252, DEFAULT_MATURITIES,
            np.full(6, 1e-9), np.zeros(2), np.eye(2),
        )


def test_kalman_calibrate_recovers_sigma1():
    panel, _ = synthetic_panel(TRUE, R, INIT, n_dates=400, noise_std=0.005, seed=21)
    start = CommodityParams(0.5, 0.3, 1.0, 0.0, 0.3, 0.2)
    res = kalman_calibrate(panel, R, start, n_starts=2, seed=2)
    assert res.method == "kalman-ml"
    assert res.params.sigma1 == pytest.approx(TRUE.sigma1, rel=0.15)
    assert res.diagnostics["converged"]
    # filtered log spots co-move with the short-maturity quotes
    short = np.log(panel.on_fixed_grid(np.array([1e-6]))[:, 0])
    assert np.corrcoef(res.log_spot, short)[0, 1] > 0.99


def test_uncertainty_report_structure():
    panel, states = synthetic_panel(TRUE, R, INIT, n_dates=60, noise_std=0.005, seed=13)
    start = CommodityParams(0.4, 0.3, 1.0, 0.0, 0.3, 0.2)
    res_a = cortazar_calibrate(panel, R, start, n_starts=3, seed=4)
    res_b = kalman_calibrate(panel, R, start, n_starts=2, seed=4)
    rep = uncertainty_report(panel, R, res_a, res_b)
    assert rep["method_a"] == "nested-lsq" and rep["method_b"] == "kalman-ml"
    assert len(rep["per_date"]) == 60
    assert rep["rmse_log_a"] < 0.05 and rep["rmse_log_b"] < 0.05
    assert rep["param_distance"] >= 0.0
    import json

    json.dumps(rep)  # fully serializable


def test_inner_noisy_sse_scale():
    # i.i.d. log noise of stdev 0.01 -> SSE/(P-2) near 1e-4
    rng = np.random.default_rng(11)
    mats = np.linspace(1 / 12, 1.5, 8)
    ratios = []
    for _ in range(200):
        prices = futures_price(TRUE, R, INIT, mats) * np.exp(
            0.01 * rng.standard_normal(8)
        )
        _, _, sse = cortazar_inner(TRUE, R, mats, prices)
        ratios.append(sse / (len(mats) - 2))
    mean_ratio = np.mean(ratios)
    assert 0.5e-4 <= mean_ratio <= 2e-4


def test_nested_lsq_noisy_panel_rmse_and_fixed_point():
    rng = np.random.default_rng(19)
    n_dates, noise = 500, 0.005
    mats = np.linspace(1 / 12, 2.0, 8)
    states = np.column_stack(
        [
            np.log(INIT.spot) + 0.15 * rng.standard_normal(n_dates),
            INIT.delta + 0.1 * rng.standard_normal(n_dates),
        ]
    )
    panel = exact_panel(TRUE, states, np.arange(n_dates) / 252.0, mats)
    panel = FuturesPanel(
        panel.dates,
        panel.maturities,
        [p * np.exp(noise * rng.standard_normal(len(p))) for p in panel.prices],
    )
    start = CommodityParams(0.4, 0.3, 1.0, 0.0, 0.3, 0.2)
    res = cortazar_calibrate(panel, R, start, n_starts=3, seed=2)
    n_obs = n_dates * len(mats)
    rmse = np.sqrt(res.goodness / n_obs)
    assert rmse <= 1.5 * noise
    # flat-curve baseline: per-date mean log price
    flat_sse = sum(
        float(((np.log(p) - np.log(p).mean()) ** 2).sum()) for p in panel.prices
    )
    assert res.goodness <= flat_sse
    # restarting from the returned optimum is a fixed point
    again = cortazar_calibrate(panel, R, res.params, n_starts=1, seed=2)
    assert abs(again.goodness - res.goodness) <= 1e-8 * res.goodness


def test_kalman_filter_maturity_permutation_invariance():
    panel, states = synthetic_panel(TRUE, R, INIT, n_dates=80, noise_std=0.01, seed=8)
    perm = np.array([3, 0, 5, 1, 4, 2])
    meas = np.full(6, 0.01**2)
    base = KalmanSpec(
        TRUE, R, R, 1 / 252, DEFAULT_MATURITIES, meas, states[0], np.eye(2)
    )
    permuted = KalmanSpec(
        TRUE, R, R, 1 / 252, DEFAULT_MATURITIES[perm], meas[perm], states[0], np.eye(2)
    )
    logp = np.log(panel.on_fixed_grid(DEFAULT_MATURITIES))
    ll_a, st_a, _ = kalman_filter(base, logp)
    ll_b, st_b, _ = kalman_filter(permuted, logp[:, perm])
    assert ll_a == pytest.approx(ll_b, rel=1e-9)
    assert np.allclose(st_a, st_b, atol=1e-9)


def test_kalman_innovations_whiteness():
    panel, states = synthetic_panel(TRUE, R, INIT, n_dates=600, noise_std=0.01, seed=23)
    spec = KalmanSpec(
        TRUE, R, R, 1 / 252, DEFAULT_MATURITIES, np.full(6, 0.01**2),
        states[0], 0.01 * np.eye(2),
    )
    _, _, innov = kalman_filter(spec, np.log(panel.on_fixed_grid(DEFAULT_MATURITIES)))
    k = len(innov)
    for j in range(innov.shape[1]):
        v = innov[1:, j] - innov[1:, j].mean()
        rho1 = (v[1:] @ v[:-1]) / (v @ v)
        assert abs(rho1) < 3 / np.sqrt(k)


def test_kalman_loglik_degrades_with_added_noise():
    panel, states = synthetic_panel(TRUE, R, INIT, n_dates=200, noise_std=0.005, seed=31)
    spec = KalmanSpec(
        TRUE, R, R, 1 / 252, DEFAULT_MATURITIES, np.full(6, 0.005**2),
        states[0], 0.01 * np.eye(2),
    )
    logp = np.log(panel.on_fixed_grid(DEFAULT_MATURITIES))
    rng = np.random.default_rng(0)
    ll_clean, _, _ = kalman_filter(spec, logp)
    ll_noisy, _, _ = kalman_filter(spec, logp + 0.02 * rng.standard_normal(logp.shape))
    assert ll_noisy < ll_clean


def test_kalman_calibrate_scale_equivariant_and_deterministic():
    panel, _ = synthetic_panel(TRUE, R, INIT, n_dates=60, noise_std=0.01, seed=37)
    start = CommodityParams(0.4, 0.3, 1.2, 0.0, 0.2, 0.3)
    res = kalman_calibrate(panel, R, start, n_starts=1, seed=1)
    res_again = kalman_calibrate(panel, R, start, n_starts=1, seed=1)
    assert np.array_equal(res.params.as_vector(), res_again.params.as_vector())
    doubled = kalman_calibrate(panel.scaled(2.0), R, start, n_starts=1, seed=1)
    # log-price model: scale moves the spot series, not the parameters
    assert np.array_equal(doubled.params.as_vector(), res.params.as_vector())
    assert np.allclose(doubled.log_spot - res.log_spot, np.log(2.0), atol=1e-12)


def test_methods_agree_on_inferred_spot_series():
    panel, _ = synthetic_panel(TRUE, R, INIT, n_dates=120, noise_std=0.005, seed=41)
    start = CommodityParams(0.4, 0.3, 1.0, 0.0, 0.3, 0.2)
    res_a = cortazar_calibrate(panel, R, start, n_starts=2, seed=6)
    res_b = kalman_calibrate(panel, R, start, n_starts=1, seed=6)
    corr = np.corrcoef(res_a.log_spot, res_b.log_spot)[0, 1]
    assert corr > 0.99


def test_synthetic_panel_deterministic():
    a, sa = synthetic_panel(TRUE, R, INIT, n_dates=20, noise_std=0.01, seed=3)
    b, sb = synthetic_panel(TRUE, R, INIT, n_dates=20, noise_std=0.01, seed=3)
    assert np.array_equal(sa, sb)
    for pa, pb in zip(a.prices, b.prices):
        assert np.array_equal(pa, pb)
