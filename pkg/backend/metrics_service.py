"""
Metrics Service - baseline and AlphaSharpe risk-adjusted scores.

All functions take one asset's per-period log-return series and return a
per-period (not annualised) scalar. r_f is a per-period log risk-free rate.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import norm

from backend.data_service import ReturnMatrix
from backend.errors import ConfigError, EmptyScoreError, SizeError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8
SHARPE_EPS = 1e-12
DEFAULT_BONUS = 0.1
DEFAULT_KURT_DIV = 12.0
DEFAULT_SKEW_DIV = 6.0
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


@dataclass
class MomentSet:
    mean: float
    variance: float
    std: float
    skewness: float
    excess_kurtosis: float
    n: int


@dataclass
class RiskComponents:
    dr: float
    v: float
    mdd: float
    n_neg: int


def _series(x, min_len: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) < min_len:
        raise SizeError(f"{what} needs at least {min_len} observations, got {len(x)}")
    return x


def moments(x) -> MomentSet:
    """Population moments; skewness and excess kurtosis are 0 for a constant series"""
    x = _series(x, 2, "moments")
    n = len(x)
    if np.ptp(x) == 0:
        return MomentSet(float(x[0]), 0.0, 0.0, 0.0, 0.0, n)
    mean = x.mean()
    d = x - mean
    m2 = np.mean(d ** 2)
    m3 = np.mean(d ** 3)
    m4 = np.mean(d ** 4)
    if m2 == 0:
        return MomentSet(float(mean), 0.0, 0.0, 0.0, 0.0, n)
    return MomentSet(
        mean=float(mean),
        variance=float(m2),
        std=float(math.sqrt(m2)),
        skewness=float(m3 / m2 ** 1.5),
        excess_kurtosis=float(m4 / m2 ** 2 - 3.0),
        n=n,
    )


def sharpe(x, r_f: float = 0.0) -> float:
    x = _series(x, 2, "sharpe")
    return float(np.mean(x - r_f) / (np.std(x) + SHARPE_EPS))


def prob_sharpe_with_flag(x, r_f: float = 0.0, sr_benchmark: float = 0.0) -> Tuple[float, bool]:
    """
    Probabilistic Sharpe ratio plus a flag telling whether the variance
    radicand was non-positive (value pinned to 0.5 in that case).
    """
    x = _series(x, 3, "prob_sharpe")
    n = len(x)
    sr = sharpe(x, r_f)
    m = moments(x)
    radicand = 1.0 - m.skewness * sr + ((m.excess_kurtosis + 3.0) - 1.0) / 4.0 * sr ** 2
    if radicand <= 0:
        logger.warning(f"[PSR] Degenerate radicand {radicand:.3e} (SR={sr:.4f}); returning 0.5")
        return 0.5, True
    z = (sr - sr_benchmark) * math.sqrt(n - 1) / math.sqrt(radicand)
    return float(norm.cdf(z)), False


def prob_sharpe(x, r_f: float = 0.0, sr_benchmark: float = 0.0) -> float:
    return prob_sharpe_with_flag(x, r_f, sr_benchmark)[0]


def downside_risk(x, eps: float = DEFAULT_EPS) -> float:
    """DR = (std of negatives + sqrt(#negatives) * std of series) / (#negatives + eps)"""
    x = _series(x, 2, "downside_risk")
    neg = x[x < 0]
    n_neg = len(neg)
    sigma_neg = float(np.std(neg)) if n_neg >= 2 else 0.0
    return (sigma_neg + math.sqrt(n_neg) * float(np.std(x))) / (n_neg + eps)


def forecast_vol(x) -> float:
    """
    Dispersion of the last three quarters of the window around the
    full-series mean. The divisor is the full length n, as printed.
    """
    x = _series(x, 4, "forecast_vol")
    n = len(x)
    window = x[n // 4:]
    return math.sqrt(float(np.sum((window - x.mean()) ** 2)) / n)


def max_drawdown(x) -> float:
    """
    Largest peak-to-trough wealth loss, computed on log wealth so deep losses
    stay strictly below 1. The starting wealth of 1 counts as a peak.
    """
    x = _series(x, 1, "max_drawdown")
    log_wealth = np.cumsum(x)
    log_peak = np.maximum.accumulate(np.concatenate(([0.0], log_wealth)))[1:]
    drawdown = -np.expm1(log_wealth - log_peak)
    return min(max(0.0, float(np.max(drawdown))), _BELOW_ONE)


def risk_components(x, eps: float = DEFAULT_EPS) -> RiskComponents:
    x = _series(x, 4, "risk_components")
    return RiskComponents(
        dr=downside_risk(x, eps),
        v=forecast_vol(x),
        mdd=max_drawdown(x),
        n_neg=int(np.sum(x < 0)),
    )


def alpha_s1(x, r_f: float = 0.0, eps: float = DEFAULT_EPS) -> float:
    x = _series(x, 2, "alpha_s1")
    sigma = float(np.std(x))
    return math.exp(float(np.mean(x - r_f))) / math.sqrt((sigma ** 2 + eps) * (sigma + eps))


def _alpha_s2_from(x: np.ndarray, r_f: float, eps: float, risk: RiskComponents) -> float:
    sigma = float(np.std(x))
    numerator = math.exp(float(np.mean(x - r_f)))
    return numerator / (math.sqrt(sigma ** 2 + eps) + risk.dr + risk.v)


def alpha_s2(x, r_f: float = 0.0, eps: float = DEFAULT_EPS) -> float:
    x = _series(x, 4, "alpha_s2")
    return _alpha_s2_from(x, r_f, eps, risk_components(x, eps))


def alpha_s3(x, r_f: float = 0.0, eps: float = DEFAULT_EPS,
             kurt_div: float = DEFAULT_KURT_DIV, skew_div: float = DEFAULT_SKEW_DIV) -> float:
    # Not clamped: K > kurt_div or S < -skew_div flips the sign.
    x = _series(x, 4, "alpha_s3")
    m = moments(x)
    risk = risk_components(x, eps)
    adjustment = (1.0 - m.excess_kurtosis / kurt_div) * (1.0 + m.skewness / skew_div) / (1.0 + risk.mdd)
    return _alpha_s2_from(x, r_f, eps, risk) * adjustment


def alpha_s4(x, r_f: float = 0.0, eps: float = DEFAULT_EPS, kurt_div: float = DEFAULT_KURT_DIV,
             skew_div: float = DEFAULT_SKEW_DIV, bonus: float = DEFAULT_BONUS) -> float:
    x = _series(x, 4, "alpha_s4")
    s3 = alpha_s3(x, r_f, eps, kurt_div, skew_div)
    if float(np.mean(x - r_f)) > 0:
        return s3 * (1.0 + bonus)
    return s3


@dataclass(frozen=True)
class MetricKind:
    func: Callable[..., float]
    defaults: Dict[str, float]
    min_length: int


def _psr(x, r_f=0.0, sr_benchmark=0.0):
    return prob_sharpe(x, r_f, sr_benchmark)


METRIC_KINDS: Dict[str, MetricKind] = {
    "sharpe": MetricKind(sharpe, {}, 2),
    "psr": MetricKind(_psr, {"sr_benchmark": 0.0}, 3),
    "alpha_s1": MetricKind(alpha_s1, {"eps": DEFAULT_EPS}, 2),
    "alpha_s2": MetricKind(alpha_s2, {"eps": DEFAULT_EPS}, 4),
    "alpha_s3": MetricKind(alpha_s3, {"eps": DEFAULT_EPS, "kurt_div": DEFAULT_KURT_DIV,
                                      "skew_div": DEFAULT_SKEW_DIV}, 4),
    "alpha_s4": MetricKind(alpha_s4, {"eps": DEFAULT_EPS, "kurt_div": DEFAULT_KURT_DIV,
                                      "skew_div": DEFAULT_SKEW_DIV, "bonus": DEFAULT_BONUS}, 4),
}

# Order the evolutionary kind toggle walks along
ALPHA_FAMILY = ["alpha_s1", "alpha_s2", "alpha_s3", "alpha_s4"]
CUSTOM_KIND = "custom"
ALL_KINDS = list(METRIC_KINDS) + [CUSTOM_KIND]


@dataclass
class MetricDescriptor:
    name: str
    kind: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValidationError(f"Unknown metric kind {self.kind!r} (known: {', '.join(ALL_KINDS)})")
        if self.kind != CUSTOM_KIND:
            allowed = METRIC_KINDS[self.kind].defaults
            unknown = set(self.params) - set(allowed)
            if unknown:
                raise ValidationError(f"Metric {self.name}: unknown params {sorted(unknown)} for kind {self.kind}")
            self.params = {**allowed, **{k: float(v) for k, v in self.params.items()}}
        for key, value in self.params.items():
            if not math.isfinite(value):
                raise ValidationError(f"Metric {self.name}: param {key} must be finite")
            if key.startswith("eps") and value <= 0:
                raise ValidationError(f"Metric {self.name}: {key} must be > 0, got {value}")

    @property
    def min_length(self) -> int:
        return METRIC_KINDS[self.kind].min_length if self.kind in METRIC_KINDS else 2

    def key(self) -> Tuple:
        """Identity used for duplicate suppression and caching"""
        ident = self.name if self.kind == CUSTOM_KIND else ""
        return (self.kind, ident, tuple(sorted(self.params.items())))

    def compute(self, x, r_f: float = 0.0) -> float:
        if self.kind == CUSTOM_KIND:
            raise ValidationError(f"Metric {self.name} is a fold-aware custom scorer; score it through evaluation")
        return METRIC_KINDS[self.kind].func(x, r_f, **self.params)

    def to_dict(self) -> Dict:
        return {"name": self.name, "kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricDescriptor":
        try:
            return cls(name=str(data["name"]), kind=str(data["kind"]), params=dict(data.get("params") or {}))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Invalid metric descriptor {data!r}: {e}")


def baseline_descriptors() -> List[MetricDescriptor]:
    return [MetricDescriptor(kind, kind) for kind in METRIC_KINDS]


class MetricRegistry:
    """Named descriptors, unique by name; persisted as metrics.json"""

    def __init__(self, descriptors: Optional[List[MetricDescriptor]] = None):
        self._items: Dict[str, MetricDescriptor] = {}
        for d in descriptors or []:
            self.add(d)

    @classmethod
    def with_baselines(cls) -> "MetricRegistry":
        return cls(baseline_descriptors())

    def add(self, descriptor: MetricDescriptor) -> None:
        if descriptor.name in self._items:
            raise ValidationError(f"Metric name {descriptor.name!r} already registered")
        self._items[descriptor.name] = descriptor

    def get(self, name: str) -> MetricDescriptor:
        try:
            return self._items[name]
        except KeyError:
            raise ConfigError(f"Unknown metric {name!r} (registered: {', '.join(self._items)})")

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items.values())

    def __len__(self) -> int:
        return len(self._items)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps([d.to_dict() for d in self], indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricRegistry":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read metric registry {path}: {e}")
        return cls([MetricDescriptor.from_dict(item) for item in raw])


def _score_column(column: np.ndarray, m: MetricDescriptor, r_f: float) -> float:
    if len(column) < m.min_length:
        return float("nan")
    try:
        value = m.compute(column, r_f)
    except SizeError:
        return float("nan")
    return value if math.isfinite(value) else float("nan")


def score_universe(r: ReturnMatrix, m: MetricDescriptor, r_f: float = 0.0, executor=None) -> np.ndarray:
    """
    Apply a metric to every asset column. Assets that fail the metric's
    preconditions get NaN. Column order matches r.assets.
    """
    columns = [r.returns[:, i] for i in range(r.n_assets)]
    if executor is not None:
        scores = list(executor.map(lambda col: _score_column(col, m, r_f), columns))
    else:
        scores = [_score_column(col, m, r_f) for col in columns]
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0 or np.all(np.isnan(scores)):
        raise EmptyScoreError(f"Metric {m.name} produced no score for any of {r.n_assets} assets")
    return scores
