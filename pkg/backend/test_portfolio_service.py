"""
Tests for selection, allocators and backtests.
Run with: pytest backend/test_portfolio_service.py
"""
import math

import numpy as np
import pandas as pd
import pytest
from scipy.linalg import cho_factor, cho_solve

from backend.data_service import ReturnMatrix, SyntheticSpec, generate_synthetic
from backend.errors import ConvergenceError, EmptyUniverseError, NumericalError, ValidationError
from backend.portfolio_service import (
    PerfReport,
    WeightVector,
    alphasharpe_weights,
    backtest,
    compare_strategies,
    contribution_spread,
    equal_weight,
    erc_from_covariance,
    erc_weights,
    fit_cov_model,
    format_delta,
    portfolio_returns,
    render_comparison,
    risk_parity_weights,
    select_top_fraction,
)


def _matrix(returns, assets=None) -> ReturnMatrix:
    returns = np.asarray(returns, dtype=float)
    assets = assets or [f"A{i}" for i in range(returns.shape[1])]
    return ReturnMatrix(pd.bdate_range("2021-01-04", periods=returns.shape[0]), assets, returns)


def _random_cov(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    return a @ a.T / n + 0.1 * np.eye(n)


def _on_simplex(w: WeightVector):
    assert np.all(w.weights >= 0)
    assert w.weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_select_top_fraction():
    assets = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"]
    scores = np.array([5, 9, 1, 7, 3, 8, 2, 6, 4, 0], dtype=float)
    assert select_top_fraction(scores, assets, 0.25) == ["B", "F", "D"]
    assert select_top_fraction(scores, assets, 0.1) == ["B"]


def test_select_skips_nan_and_breaks_ties_by_index():
    scores = np.array([1.0, np.nan, 1.0, 1.0])
    assert select_top_fraction(scores, ["a", "b", "c", "d"], 0.5) == ["a", "c"]
    with pytest.raises(EmptyUniverseError):
        select_top_fraction(np.array([np.nan, np.nan]), ["a", "b"], 0.5)
    with pytest.raises(ValidationError):
        select_top_fraction(np.array([1.0]), ["a"], 0.0)


def test_equal_weight():
    w = equal_weight(["x", "y", "z", "w"])
    np.testing.assert_allclose(w.weights, 0.25)
    with pytest.raises(EmptyUniverseError):
        equal_weight([])


def test_weight_vector_rejects_off_simplex():
    with pytest.raises(NumericalError):
        WeightVector(["a", "b"], [0.7, 0.7])
    with pytest.raises(NumericalError):
        WeightVector(["a", "b"], [1.5, -0.5])


def _reference_alphasharpe(returns, lam=1e-4, eps=1e-8, per_asset=False):
    mu = returns.mean(axis=0)
    sigma = np.cov(returns, rowvar=False, ddof=1) + lam * np.eye(returns.shape[1])
    r = np.maximum(0.0, cho_solve(cho_factor(sigma, lower=True), mu))
    r_prime = (1 + r.std() * r) / np.sqrt(np.diag(sigma) + eps)
    w = np.exp(r_prime - r_prime.max())
    w = w / w.sum()
    h = -np.sum(w * np.log(w + eps))
    w = w * np.exp(-h * w) if per_asset else w * math.exp(-h)
    w = np.maximum(0.0, w)
    return w / w.sum()


def test_alphasharpe_matches_step_reference():
    r = generate_synthetic(SyntheticSpec(n_assets=12, n_periods=300, seed=4))
    for mode, per_asset in (("scalar", False), ("per_asset", True)):
        w = alphasharpe_weights(r, entropy_mode=mode)
        _on_simplex(w)
        np.testing.assert_allclose(w.weights, _reference_alphasharpe(r.returns, per_asset=per_asset),
                                   rtol=1e-10, atol=1e-12)


def test_alphasharpe_scalar_entropy_reduces_to_softmax():
    r = generate_synthetic(SyntheticSpec(n_assets=8, n_periods=200, seed=6))
    model = fit_cov_model(r.returns)
    z = np.maximum(0.0, cho_solve(cho_factor(model.sigma, lower=True), model.mu))
    r_prime = (1 + z.std() * z) / np.sqrt(np.diag(model.sigma) + model.eps)
    soft = np.exp(r_prime - r_prime.max())
    soft = soft / soft.sum()
    np.testing.assert_allclose(alphasharpe_weights(r).weights, soft, rtol=1e-12, atol=1e-15)


def test_alphasharpe_rejects_unknown_entropy_mode():
    r = generate_synthetic(SyntheticSpec(n_assets=4, n_periods=50, seed=1))
    with pytest.raises(ValidationError):
        alphasharpe_weights(r, entropy_mode="vector")


def test_alphasharpe_handles_more_assets_than_periods():
    r = generate_synthetic(SyntheticSpec(n_assets=30, n_periods=20, seed=2))
    _on_simplex(alphasharpe_weights(r))


def test_risk_parity_inverse_volatility():
    rng = np.random.default_rng(5)
    returns = rng.normal(0, 1, size=(500, 3)) * np.array([0.01, 0.02, 0.04])
    returns = np.column_stack([returns, np.zeros(500)])
    w = risk_parity_weights(_matrix(returns))
    assert w.assets == ["A0", "A1", "A2"]
    _on_simplex(w)
    vol = returns[:, :3].std(axis=0, ddof=1)
    np.testing.assert_allclose(w.weights, (1 / vol) / (1 / vol).sum())


def test_erc_equalises_contributions():
    sigma = _random_cov(10, seed=7)
    w = erc_from_covariance(sigma)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0)
    assert contribution_spread(w, sigma) <= 1e-8


def test_erc_diagonal_is_inverse_volatility():
    variances = np.array([0.01, 0.04, 0.09])
    w = erc_from_covariance(np.diag(variances))
    inv = 1 / np.sqrt(variances)
    np.testing.assert_allclose(w, inv / inv.sum(), rtol=1e-6)


def test_erc_reports_non_convergence():
    with pytest.raises(ConvergenceError) as info:
        erc_from_covariance(_random_cov(5, seed=8), max_iter=0)
    assert info.value.spread > 0


def test_erc_weights_from_returns():
    r = generate_synthetic(SyntheticSpec(n_assets=6, n_periods=250, seed=3))
    _on_simplex(erc_weights(r))


def test_portfolio_returns_rebalanced_log_sum():
    returns = np.array([[0.01, -0.02], [0.03, 0.00]])
    w = WeightVector(["A0", "A1"], [0.25, 0.75])
    expected = [math.log(0.25 * math.exp(0.01) + 0.75 * math.exp(-0.02)),
                math.log(0.25 * math.exp(0.03) + 0.75)]
    np.testing.assert_allclose(portfolio_returns(w, _matrix(returns)), expected)


def test_backtest_is_permutation_invariant():
    r = generate_synthetic(SyntheticSpec(n_assets=6, n_periods=120, seed=12))
    w = WeightVector(list(r.assets), [0.1, 0.2, 0.3, 0.15, 0.15, 0.1])
    perm = [3, 0, 5, 1, 4, 2]
    shuffled = ReturnMatrix(r.timestamps, [r.assets[i] for i in perm], r.returns[:, perm])
    w_shuffled = WeightVector([w.assets[i] for i in perm], w.weights[perm])
    assert backtest(w, r) == backtest(w_shuffled, shuffled)


def test_backtest_without_drawdown_has_infinite_calmar():
    report = backtest(equal_weight(["A0", "A1"]), _matrix(np.full((10, 2), 0.001)))
    assert report.mdd == 0.0
    assert report.calmar == math.inf
    assert report.cumulative_log_return == pytest.approx(0.01)
    assert report.n_periods == 10


def test_backtest_missing_asset():
    with pytest.raises(ValidationError):
        backtest(equal_weight(["ZZ"]), _matrix(np.zeros((5, 2))))


def test_compare_strategies_deltas():
    bench = PerfReport(1.0, 2.0, 0.5, 0.2, 0.1, 100)
    better = PerfReport(1.5, 3.0, 1.0, 0.1, 0.2, 100)
    table = compare_strategies([("equal_weighted", bench), ("alphasharpe", better)], "equal_weighted")
    row = table.set_index("strategy").loc["alphasharpe"]
    assert row["delta_sharpe_pct"] == pytest.approx(50.0)
    assert row["delta_calmar_pct"] == pytest.approx(100.0)
    text = render_comparison(table)
    assert "+50.00%" in text and "+100.00%" in text


def test_compare_strategies_undefined_delta():
    flat = PerfReport(0.0, 0.0, math.inf, 0.0, 0.0, 10)
    other = PerfReport(1.0, 1.0, 2.0, 0.1, 0.1, 10)
    table = compare_strategies([("equal_weighted", flat), ("erc", other)], "equal_weighted")
    assert math.isnan(table.loc[1, "delta_sharpe_pct"])
    assert format_delta(table.loc[1, "delta_calmar_pct"]) == "NA"
    with pytest.raises(ValidationError):
        compare_strategies([("erc", other)], "equal_weighted")


def test_compare_strategies_benchmark_row_is_zero():
    # drawdown-free benchmark: infinite Calmar, and a zero-Sharpe one
    calm = PerfReport(0.01, 0.16, math.inf, 0.0, 0.1, 10)
    flat = PerfReport(0.0, 0.0, 1.0, 0.1, 0.0, 10)
    other = PerfReport(0.02, 0.32, 2.0, 0.1, 0.2, 10)
    for bench in (calm, flat):
        table = compare_strategies([("equal_weighted", bench), ("alphasharpe", other)], "equal_weighted")
        assert table.loc[0, "delta_sharpe_pct"] == 0.0
        assert table.loc[0, "delta_calmar_pct"] == 0.0
        assert "+0.00%" in render_comparison(table).splitlines()[1]


def test_single_asset_universe_allocates_everything():
    r = generate_synthetic(SyntheticSpec(n_assets=1, n_periods=120, seed=9))
    allocations = [equal_weight(list(r.assets)), risk_parity_weights(r), erc_weights(r), alphasharpe_weights(r)]
    for w in allocations:
        np.testing.assert_allclose(w.weights, [1.0])
    reports = [(name, backtest(w, r)) for name, w in zip(["equal_weighted", "risk_parity", "erc", "alphasharpe"],
                                                         allocations)]
    table = compare_strategies(reports, "equal_weighted")
    np.testing.assert_allclose(table["delta_sharpe_pct"], 0.0, atol=1e-9)


def _random_universe(rng):
    n_assets = int(rng.integers(1, 51))
    n_periods = int(rng.integers(2, 1001))
    factor = rng.normal(0.0, 0.008, size=(n_periods, 1))
    loadings = rng.uniform(0.0, 1.2, size=(1, n_assets))
    noise = rng.normal(0.0, 1.0, size=(n_periods, n_assets)) * rng.uniform(0.005, 0.03, size=n_assets)
    drift = rng.normal(2e-4, 3e-4, size=n_assets)
    return _matrix(drift + factor @ loadings + noise)


def test_allocators_stay_on_simplex_across_random_universes():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        r = _random_universe(rng)
        _on_simplex(equal_weight(list(r.assets)))
        _on_simplex(risk_parity_weights(r))
        for mode in ("scalar", "per_asset"):
            _on_simplex(alphasharpe_weights(r, entropy_mode=mode))
        w = erc_weights(r)
        _on_simplex(w)
        assert contribution_spread(w.weights, fit_cov_model(r.returns).sigma) <= 1e-8 + 1e-12


def test_alphasharpe_matches_step_reference_across_random_universes():
    rng = np.random.default_rng(77)
    for _ in range(100):
        r = _random_universe(rng)
        for mode, per_asset in (("scalar", False), ("per_asset", True)):
            np.testing.assert_allclose(alphasharpe_weights(r, entropy_mode=mode).weights,
                                       _reference_alphasharpe(r.returns, per_asset=per_asset),
                                       rtol=1e-10, atol=1e-12)
