"""
Portfolio Service - top-fraction selection, allocators (equal weight, risk
parity, equal risk contribution, AlphaSharpe) and fixed-weight backtests.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp, softmax

from backend.data_service import ReturnMatrix, fraction_count
from backend.errors import (
    ConvergenceError,
    EmptyUniverseError,
    NumericalError,
    ValidationError,
)
from backend.metrics_service import max_drawdown, sharpe

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1e-4
DEFAULT_EPSILON = 1e-8
DEFAULT_FRACTIONS = (0.10, 0.15, 0.20, 0.25)
ENTROPY_MODES = ("scalar", "per_asset")


@dataclass
class WeightVector:
    assets: List[str]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.assets) != len(self.weights):
            raise ValidationError("Weight vector and asset list differ in length")
        if len(self.assets) == 0:
            raise EmptyUniverseError("Weight vector is empty")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise NumericalError(f"Weights leave the simplex (min {self.weights.min()}, sum {self.weights.sum()})")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"asset": self.assets, "weight": self.weights})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


@dataclass
class CovModel:
    mu: np.ndarray
    sigma: np.ndarray  # covariance + lambda * I
    lam: float
    eps: float


@dataclass
class PerfReport:
    sharpe: float
    sharpe_annualized: float
    calmar: float  # +inf when there is no drawdown
    mdd: float
    cumulative_log_return: float
    n_periods: int


def select_top_fraction(scores: np.ndarray, assets: Sequence[str], fraction: float) -> List[str]:
    """
    Highest-scoring ceil(fraction * N_scored) assets; NaN scores are never
    picked and boundary ties go to the lower asset index.
    """
    scores = np.asarray(scores, dtype=float)
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"Fraction must be in (0, 1], got {fraction}")
    scored = np.flatnonzero(np.isfinite(scores))
    if len(scored) == 0:
        raise EmptyUniverseError("No scored assets to select from")
    k = max(1, fraction_count(fraction, len(scored)))
    order = scored[np.lexsort((scored, -scores[scored]))]
    return [assets[i] for i in order[:k]]


def equal_weight(subset: Sequence[str]) -> WeightVector:
    if len(subset) == 0:
        raise EmptyUniverseError("Cannot equal-weight an empty subset")
    return WeightVector(list(subset), np.full(len(subset), 1.0 / len(subset)))


def _normalize(weights: np.ndarray) -> np.ndarray:
    clipped = np.maximum(weights, 0.0)
    return clipped / clipped.sum()


def fit_cov_model(returns: np.ndarray, lam: float = DEFAULT_LAMBDA, eps: float = DEFAULT_EPSILON) -> CovModel:
    returns = np.asarray(returns, dtype=float)
    T, N = returns.shape
    if N == 0:
        raise EmptyUniverseError("No assets to allocate")
    if T < 2:
        raise ValidationError(f"Need at least 2 periods to estimate a covariance, got {T}")
    if lam <= 0:
        raise ValidationError(f"Ridge lambda must be > 0, got {lam}")
    if T <= N:
        logger.warning(f"[ALLOC] T={T} <= N={N}: sample covariance is rank deficient, relying on ridge")
    cov = np.atleast_2d(np.cov(returns, rowvar=False, ddof=1))
    return CovModel(returns.mean(axis=0), cov + lam * np.eye(N), lam, eps)


def alphasharpe_from_model(model: CovModel, entropy_mode: str = "scalar") -> np.ndarray:
    """
    1. r  = max(0, Sigma^-1 mu)
    2. r' = (1 + std(r) * r) / sqrt(diag(Sigma) + eps)
    3. w  = softmax(r'), H = -sum w log(w + eps), w' = w * exp(-H)
       (per_asset mode: w'_i = w_i * exp(-H * w_i))
    4. w* = max(0, w') / sum max(0, w')
    """
    if entropy_mode not in ENTROPY_MODES:
        raise ValidationError(f"entropy_mode must be one of {ENTROPY_MODES}, got {entropy_mode!r}")
    try:
        z = cho_solve(cho_factor(model.sigma, lower=True), model.mu)
    except LinAlgError:
        raise NumericalError(
            f"Covariance not positive definite with lambda={model.lam}; increase lambda"
        )
    r = np.maximum(0.0, z)
    r_prime = (1.0 + r.std() * r) / np.sqrt(np.diag(model.sigma) + model.eps)
    w = softmax(r_prime)
    entropy = -np.sum(w * np.log(w + model.eps))
    if entropy_mode == "scalar":
        w_prime = w * math.exp(-entropy)
    else:
        w_prime = w * np.exp(-entropy * w)
    return _normalize(w_prime)


def alphasharpe_weights(r: ReturnMatrix, lam: float = DEFAULT_LAMBDA, eps: float = DEFAULT_EPSILON,
                        entropy_mode: str = "scalar") -> WeightVector:
    """AlphaSharpe allocation on a matrix of excess log returns"""
    model = fit_cov_model(r.returns, lam, eps)
    return WeightVector(list(r.assets), alphasharpe_from_model(model, entropy_mode))


def risk_parity_weights(r: ReturnMatrix) -> WeightVector:
    """Inverse-volatility weights; zero-variance assets are left out"""
    if r.n_assets == 0:
        raise EmptyUniverseError("No assets to allocate")
    vol = r.returns.std(axis=0, ddof=1)
    usable = vol > 0
    if not usable.all():
        skipped = [a for a, ok in zip(r.assets, usable) if not ok]
        logger.warning(f"[ALLOC] Risk parity skipping {len(skipped)} zero-variance assets: {', '.join(skipped[:5])}")
    if not usable.any():
        raise EmptyUniverseError("Every asset has zero variance")
    inv = 1.0 / vol[usable]
    return WeightVector([a for a, ok in zip(r.assets, usable) if ok], inv / inv.sum())


def risk_contributions(weights: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return weights * (sigma @ weights)


def contribution_spread(weights: np.ndarray, sigma: np.ndarray) -> float:
    rc = risk_contributions(weights, sigma)
    return float((rc.max() - rc.min()) / rc.mean())


def erc_from_covariance(sigma: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """
    Equal risk contribution by cyclical coordinate descent, starting from
    equal weights. Each coordinate solves sigma_ii w_i^2 + c_i w_i - 1/N = 0.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = sigma.shape[0]
    if n == 0:
        raise EmptyUniverseError("No assets to allocate")
    diag = np.diag(sigma)
    if np.any(diag <= 0):
        raise NumericalError("Covariance has non-positive variances")
    budget = 1.0 / n
    w = np.full(n, budget)
    sigma_w = sigma @ w
    spread = contribution_spread(w, sigma)
    for iteration in range(max_iter):
        if spread <= tol:
            logger.debug(f"[ALLOC] ERC converged after {iteration} sweeps (spread {spread:.2e})")
            return w / w.sum()
        for i in range(n):
            c = sigma_w[i] - diag[i] * w[i]
            new = (-c + math.sqrt(c * c + 4.0 * diag[i] * budget)) / (2.0 * diag[i])
            sigma_w += sigma[:, i] * (new - w[i])
            w[i] = new
        # refresh to keep rounding drift out of the running product
        sigma_w = sigma @ w
        spread = contribution_spread(w, sigma)
    if spread <= tol:
        return w / w.sum()
    raise ConvergenceError(f"ERC did not converge in {max_iter} sweeps", spread)


def erc_weights(r: ReturnMatrix, tol: float = 1e-8, max_iter: int = 10_000,
                lam: float = DEFAULT_LAMBDA) -> WeightVector:
    model = fit_cov_model(r.returns, lam)
    try:
        np.linalg.cholesky(model.sigma)
    except np.linalg.LinAlgError:
        raise NumericalError(f"Covariance not positive definite with lambda={lam}; increase lambda")
    return WeightVector(list(r.assets), erc_from_covariance(model.sigma, tol, max_iter))


def portfolio_returns(w: WeightVector, r_test: ReturnMatrix) -> np.ndarray:
    """
    Per-period log return of a portfolio rebalanced to w every period:
    ln(sum_i w_i exp(x_i,t)).
    """
    index = {a: i for i, a in enumerate(r_test.assets)}
    missing = [a for a in w.assets if a not in index]
    if missing:
        raise ValidationError(f"Weighted assets missing from test data: {', '.join(missing)}")
    # fixed column order so a permuted input reduces identically
    order = sorted(range(len(w.assets)), key=lambda j: w.assets[j])
    cols = [index[w.assets[j]] for j in order]
    return logsumexp(r_test.returns[:, cols], b=w.weights[order], axis=1)


def backtest(w: WeightVector, r_test: ReturnMatrix, r_f: float = 0.0) -> PerfReport:
    if r_test.n_periods < 2:
        raise ValidationError(f"Backtest needs at least 2 periods, got {r_test.n_periods}")
    series = portfolio_returns(w, r_test)
    per_period = sharpe(series, r_f)
    mdd = max_drawdown(series)
    annual_return = float(series.mean()) * r_test.frequency
    return PerfReport(
        sharpe=per_period,
        sharpe_annualized=per_period * math.sqrt(r_test.frequency),
        calmar=annual_return / mdd if mdd > 0 else math.inf,
        mdd=mdd,
        cumulative_log_return=float(series.sum()),
        n_periods=len(series),
    )


def _delta_pct(value: float, benchmark: float) -> float:
    if benchmark == 0 or not math.isfinite(benchmark) or not math.isfinite(value):
        return float("nan")
    return 100.0 * (value - benchmark) / abs(benchmark)


def compare_strategies(reports: Sequence[Tuple[str, PerfReport]], benchmark_name: str) -> pd.DataFrame:
    """
    Percentage improvement of each strategy's Sharpe and Calmar over the
    benchmark. The benchmark row is 0 by definition; other undefined deltas
    are NaN.
    """
    by_name = dict(reports)
    if benchmark_name not in by_name:
        raise ValidationError(f"Benchmark {benchmark_name!r} not among strategies {list(by_name)}")
    bench = by_name[benchmark_name]
    rows = []
    for name, rep in reports:
        if name == benchmark_name:
            delta_sharpe = delta_calmar = 0.0
        else:
            delta_sharpe = _delta_pct(rep.sharpe_annualized, bench.sharpe_annualized)
            delta_calmar = _delta_pct(rep.calmar, bench.calmar)
        rows.append({
            "strategy": name,
            "sharpe": rep.sharpe_annualized,
            "calmar": rep.calmar,
            "mdd": rep.mdd,
            "delta_sharpe_pct": delta_sharpe,
            "delta_calmar_pct": delta_calmar,
        })
    return pd.DataFrame(rows, columns=["strategy", "sharpe", "calmar", "mdd",
                                       "delta_sharpe_pct", "delta_calmar_pct"])


def format_delta(value: Optional[float]) -> str:
    if value is None or not math.isfinite(value):
        return "NA"
    return f"{value:+.2f}%"


def render_comparison(table: pd.DataFrame) -> str:
    """Aligned-text rendering with percentage deltas"""
    shown = table.copy()
    for col in ("delta_sharpe_pct", "delta_calmar_pct"):
        shown[col] = shown[col].map(format_delta)
    shown["calmar"] = shown["calmar"].map(lambda v: "inf" if v == math.inf else f"{v:.4f}")
    shown["sharpe"] = shown["sharpe"].map(lambda v: f"{v:.4f}")
    shown["mdd"] = shown["mdd"].map(lambda v: f"{v:.4f}")
    return shown.to_string(index=False) + "\n"
