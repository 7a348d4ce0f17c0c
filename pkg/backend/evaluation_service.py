"""
Evaluation Service - how well a metric's historical scores line up with
realised future Sharpe ratios (Spearman, Kendall tau-b, NDCG@k), per
cross-validation fold and on the holdout.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import kendalltau, rankdata

from backend.data_service import FoldSet, ReturnMatrix, fraction_count
from backend.errors import (
    ConfigError,
    FoldDegenerateError,
    SizeError,
    UndefinedCorrelationError,
    ValidationError,
)
from backend.metrics_service import CUSTOM_KIND, MetricDescriptor, score_universe, sharpe

logger = logging.getLogger(__name__)

DEFAULT_NDCG_FRACTION = 0.25
STATISTICS = ("spearman", "kendall", "ndcg")

# name -> scorer(returns, train_range, future_range, r_f) -> per-asset scores
FoldScorer = Callable[[ReturnMatrix, Tuple[int, int], Tuple[int, int], float], np.ndarray]
CUSTOM_SCORERS: Dict[str, FoldScorer] = {}


def register_custom_scorer(name: str, scorer: FoldScorer) -> None:
    CUSTOM_SCORERS[name] = scorer


def _pair(a, b, what: str) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise SizeError(f"{what}: vectors must be 1-D and of equal length ({a.shape} vs {b.shape})")
    if len(a) < 3:
        raise SizeError(f"{what}: need at least 3 paired values, got {len(a)}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError(f"{what}: non-finite entries")
    return a, b


def spearman(a, b) -> float:
    """Pearson correlation of average ranks"""
    a, b = _pair(a, b, "spearman")
    ra, rb = rankdata(a), rankdata(b)
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        raise UndefinedCorrelationError("spearman: zero rank variance")
    return float(np.clip(np.corrcoef(ra, rb)[0, 1], -1.0, 1.0))


def kendall(a, b) -> float:
    """Tie-corrected tau-b (scipy's O(n log n) implementation)"""
    a, b = _pair(a, b, "kendall")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedCorrelationError("kendall: all values tied")
    tau = kendalltau(a, b, variant="b")[0]
    if not math.isfinite(tau):
        raise UndefinedCorrelationError("kendall: undefined tau-b")
    return float(np.clip(tau, -1.0, 1.0))


def _descending_order(values: np.ndarray) -> np.ndarray:
    # ties: ascending asset index
    return np.lexsort((np.arange(len(values)), -values))


def ndcg_at(scores, relevance_source, fraction: float = DEFAULT_NDCG_FRACTION) -> float:
    """
    NDCG over the top ceil(fraction * N) assets ranked by metric score, with
    linear gain on min-max normalised future Sharpe.
    """
    scores, future = _pair(scores, relevance_source, "ndcg")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"ndcg: fraction must be in (0, 1], got {fraction}")
    k = max(1, fraction_count(fraction, len(scores)))
    span = future.max() - future.min()
    relevance = np.ones_like(future) if span == 0 else (future - future.min()) / span
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(np.sum(relevance[_descending_order(scores)[:k]] * discounts))
    ideal = float(np.sum(relevance[_descending_order(relevance)[:k]] * discounts))
    return min(1.0, dcg / ideal)


@dataclass
class FoldRecord:
    fold: str
    spearman: float
    kendall: float
    ndcg: float
    n_assets: int


@dataclass
class EvalReport:
    metric: str
    folds: List[FoldRecord] = field(default_factory=list)
    holdout: Optional[FoldRecord] = None

    @property
    def aggregates(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for stat in STATISTICS:
            values = np.array([getattr(f, stat) for f in self.folds], dtype=float)
            out[stat] = {
                "mean": float(values.mean()) if len(values) else float("nan"),
                "std": float(values.std()) if len(values) else float("nan"),
            }
        return out

    def mean(self, stat: str) -> float:
        return self.aggregates[stat]["mean"]

    def to_dict(self) -> Dict:
        return {
            "metric": self.metric,
            "folds": [asdict(f) for f in self.folds],
            "aggregates": self.aggregates,
            "holdout": asdict(self.holdout) if self.holdout else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_frame(self) -> pd.DataFrame:
        """One row per fold, aggregate rows flagged 'agg', then the holdout row"""
        rows = [{"row_type": "fold", **asdict(f)} for f in self.folds]
        aggregates = self.aggregates
        for which in ("mean", "std"):
            rows.append({"row_type": "agg", "fold": which,
                         **{s: aggregates[s][which] for s in STATISTICS}, "n_assets": None})
        if self.holdout:
            rows.append({"row_type": "holdout", **asdict(self.holdout)})
        frame = pd.DataFrame(rows, columns=["row_type", "fold", *STATISTICS, "n_assets"])
        frame.insert(0, "metric", self.metric)
        return frame


@dataclass
class FitnessWeights:
    w_spearman: float = 0.4
    w_kendall: float = 0.3
    w_ndcg: float = 0.3

    def __post_init__(self):
        values = (self.w_spearman, self.w_kendall, self.w_ndcg)
        if any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-9:
            raise ValidationError(f"Fitness weights must be nonnegative and sum to 1, got {values}")


def fitness(rep: EvalReport, w: Optional[FitnessWeights] = None) -> float:
    w = w or FitnessWeights()
    if not rep.folds:
        raise ValidationError(f"Report for {rep.metric} has no folds to score")
    return (w.w_spearman * rep.mean("spearman")
            + w.w_kendall * rep.mean("kendall")
            + w.w_ndcg * rep.mean("ndcg"))


def future_sharpe(r: ReturnMatrix, future: Tuple[int, int], r_f: float = 0.0) -> np.ndarray:
    """Plain per-period Sharpe of every asset over the future window (NaN if too short)"""
    window = r.returns[future[0]:future[1]]
    if window.shape[0] < 2:
        return np.full(r.n_assets, np.nan)
    return np.array([sharpe(window[:, i], r_f) for i in range(r.n_assets)])


def oracle_future_sharpe(r: ReturnMatrix, train: Tuple[int, int], future: Tuple[int, int],
                         r_f: float = 0.0) -> np.ndarray:
    """Diagnostic scorer that peeks at the realised future Sharpe (upper bound on alignment)"""
    return future_sharpe(r, future, r_f)


register_custom_scorer("oracle_future_sharpe", oracle_future_sharpe)


def fold_scores(m: MetricDescriptor, r: ReturnMatrix, train: Tuple[int, int],
                future: Tuple[int, int], r_f: float = 0.0) -> np.ndarray:
    if m.kind == CUSTOM_KIND:
        scorer = CUSTOM_SCORERS.get(m.name)
        if scorer is None:
            raise ConfigError(f"No custom scorer registered under {m.name!r}")
        return np.asarray(scorer(r, train, future, r_f), dtype=float)
    return score_universe(r.window(*train), m, r_f)


def _evaluate_window(m: MetricDescriptor, r: ReturnMatrix, label: str, train: Tuple[int, int],
                     future: Tuple[int, int], r_f: float, ndcg_fraction: float) -> FoldRecord:
    scores = fold_scores(m, r, train, future, r_f)
    target = future_sharpe(r, future, r_f)
    # pairwise deletion, never imputed
    joint = np.isfinite(scores) & np.isfinite(target)
    n = int(joint.sum())
    if n < 3:
        raise FoldDegenerateError(label, n)
    s, t = scores[joint], target[joint]
    return FoldRecord(label, spearman(s, t), kendall(s, t), ndcg_at(s, t, ndcg_fraction), n)


def evaluate_metric(m: MetricDescriptor, r: ReturnMatrix, folds: FoldSet, r_f: float = 0.0,
                    executor=None, ndcg_fraction: float = DEFAULT_NDCG_FRACTION) -> EvalReport:
    """
    Score the metric on each fold's train window and compare against the
    future window's realised Sharpe. With a holdout, the holdout record
    trains on the whole non-holdout prefix.

    Args:
        executor: optional pool; folds are evaluated through executor.map and
                  reassembled in fold order
    """
    if folds.n_periods and folds.n_periods != r.n_periods:
        raise SizeError(f"Fold set built for {folds.n_periods} periods, matrix has {r.n_periods}")

    def run(item):
        label, train, future = item
        return _evaluate_window(m, r, label, train, future, r_f, ndcg_fraction)

    jobs = [(str(i), f.train, f.future) for i, f in enumerate(folds.folds)]
    if folds.holdout:
        jobs.append(("holdout", (0, folds.holdout[0]), folds.holdout))
    records = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]

    report = EvalReport(m.name)
    for record in records:
        if record.fold == "holdout":
            report.holdout = record
        else:
            report.folds.append(record)
    logger.debug(f"[EVAL] {m.name}: spearman={report.mean('spearman') if report.folds else float('nan'):.4f}")
    return report
