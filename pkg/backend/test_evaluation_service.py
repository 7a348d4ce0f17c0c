"""
Tests for rank alignment statistics and fold evaluation.
Run with: pytest backend/test_evaluation_service.py
"""
import itertools
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy import stats

from backend.data_service import ReturnMatrix, SyntheticSpec, generate_synthetic, split_time_series
from backend.errors import FoldDegenerateError, SizeError, UndefinedCorrelationError, ValidationError
from backend.evaluation_service import (
    EvalReport,
    FitnessWeights,
    FoldRecord,
    evaluate_metric,
    fitness,
    kendall,
    ndcg_at,
    spearman,
)
from backend.metrics_service import MetricDescriptor


def _brute_tau_b(a, b):
    concordant = discordant = ties_a = ties_b = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        da, db = a[i] - a[j], b[i] - b[j]
        if da == 0 and db == 0:
            continue
        if da == 0:
            ties_a += 1
        elif db == 0:
            ties_b += 1
        elif da * db > 0:
            concordant += 1
        else:
            discordant += 1
    return (concordant - discordant) / math.sqrt((concordant + discordant + ties_a) *
                                                 (concordant + discordant + ties_b))


def test_spearman_extremes_and_scipy():
    a = [0.3, 0.1, 0.5, 0.2, 0.9]
    assert spearman(a, a) == pytest.approx(1.0)
    assert spearman(a, [-v for v in a]) == pytest.approx(-1.0)
    b = [1.0, 3.0, 2.0, 2.0, 5.0]
    assert spearman(a, b) == pytest.approx(stats.spearmanr(a, b)[0])


def test_kendall_matches_brute_force_with_ties():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 5, size=40).astype(float)
    b = rng.integers(0, 5, size=40).astype(float)
    assert kendall(a, b) == pytest.approx(_brute_tau_b(a, b))


def test_correlation_guards():
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(UndefinedCorrelationError):
        kendall([1, 2, 3, 4], [5, 5, 5, 5])
    with pytest.raises(SizeError):
        spearman([1, 2], [2, 1])
    with pytest.raises(ValidationError):
        kendall([1, 2, float("nan")], [1, 2, 3])


def test_ndcg_hand_example():
    scores = [3.0, 2.0, 1.0, 0.0]
    future = [0.0, 1.0, 2.0, 3.0]
    dcg = 0.0 * 1.0 + (1 / 3) / math.log2(3)
    ideal = 1.0 + (2 / 3) / math.log2(3)
    assert ndcg_at(scores, future, 0.5) == pytest.approx(dcg / ideal)


def test_ndcg_perfect_and_bounds():
    future = [0.2, -0.1, 0.5, 0.05, 0.3]
    assert ndcg_at(future, future, 0.4) == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    for _ in range(20):
        value = ndcg_at(rng.normal(size=12), rng.normal(size=12), 0.25)
        assert 0.0 <= value <= 1.0


def test_ndcg_ties_go_to_lower_index():
    # all scores tied: assets 0 and 1 are taken first
    assert ndcg_at([1.0] * 4, [1.0, 0.0, 0.5, 0.25], 0.5) == pytest.approx(
        (1.0 + 0.0) / (1.0 + 0.5 / math.log2(3))
    )


def _market(n_assets=20, n_periods=400, seed=9) -> ReturnMatrix:
    return generate_synthetic(SyntheticSpec(n_assets=n_assets, n_periods=n_periods, seed=seed))


def _folds(r):
    return split_time_series(r, holdout_frac=0.2, n_folds=3, train_len=120, future_len=40, stride=40)


def test_evaluate_metric_shape_and_executor():
    r = _market()
    folds = _folds(r)
    m = MetricDescriptor("alpha_s2", "alpha_s2")
    report = evaluate_metric(m, r, folds)
    assert [f.fold for f in report.folds] == ["0", "1", "2"]
    assert report.holdout is not None and report.holdout.fold == "holdout"
    for record in report.folds + [report.holdout]:
        assert -1.0 <= record.spearman <= 1.0
        assert -1.0 <= record.kendall <= 1.0
        assert 0.0 <= record.ndcg <= 1.0
        assert record.n_assets == 20
    with ThreadPoolExecutor(max_workers=4) as pool:
        assert evaluate_metric(m, r, folds, executor=pool).to_json() == report.to_json()


def test_oracle_scorer_aligns_perfectly():
    r = _market()
    report = evaluate_metric(MetricDescriptor("oracle_future_sharpe", "custom"), r, _folds(r))
    for stat in ("spearman", "kendall", "ndcg"):
        assert report.mean(stat) == pytest.approx(1.0)
    assert fitness(report) == pytest.approx(1.0)


def test_asset_permutation_invariance():
    r = _market()
    perm = np.random.default_rng(3).permutation(r.n_assets)
    shuffled = ReturnMatrix(r.timestamps, [r.assets[i] for i in perm], r.returns[:, perm], r.frequency)
    m = MetricDescriptor("alpha_s4", "alpha_s4")
    a = evaluate_metric(m, r, _folds(r))
    b = evaluate_metric(m, shuffled, _folds(shuffled))
    for x, y in zip(a.folds, b.folds):
        assert x.spearman == pytest.approx(y.spearman)
        assert x.kendall == pytest.approx(y.kendall)
        assert x.ndcg == pytest.approx(y.ndcg)


def test_degenerate_fold():
    r = _market(n_assets=2)
    with pytest.raises(FoldDegenerateError):
        evaluate_metric(MetricDescriptor("sharpe", "sharpe"), r, _folds(r))


def test_fitness_weights():
    report = EvalReport("m", [FoldRecord("0", 0.5, 0.2, 0.8, 10), FoldRecord("1", 0.1, 0.0, 0.6, 10)])
    assert fitness(report) == pytest.approx(0.4 * 0.3 + 0.3 * 0.1 + 0.3 * 0.7)
    assert fitness(report, FitnessWeights(1.0, 0.0, 0.0)) == pytest.approx(0.3)
    with pytest.raises(ValidationError):
        FitnessWeights(0.5, 0.5, 0.5)
    with pytest.raises(ValidationError):
        fitness(EvalReport("empty"))


def test_report_frame_rows():
    report = EvalReport("m", [FoldRecord("0", 0.5, 0.2, 0.8, 10)], FoldRecord("holdout", 0.1, 0.1, 0.5, 10))
    frame = report.to_frame()
    assert list(frame["row_type"]) == ["fold", "agg", "agg", "holdout"]
    assert list(frame.columns) == ["metric", "row_type", "fold", "spearman", "kendall", "ndcg", "n_assets"]
    assert report.aggregates["spearman"]["std"] == 0.0


def _pairwise_tau_b(a, b):
    """O(n^2) tau-b over every index pair"""
    upper = np.triu_indices(len(a), k=1)
    sa = np.sign(np.subtract.outer(a, a))[upper]
    sb = np.sign(np.subtract.outer(b, b))[upper]
    return float(np.sum(sa * sb) / math.sqrt(np.count_nonzero(sa) * np.count_nonzero(sb)))


def _random_pair(rng):
    n = int(rng.integers(3, 501))
    while True:
        if rng.random() < 0.5:
            a = rng.integers(0, int(rng.integers(2, 8)), size=n).astype(float)
            b = rng.integers(0, int(rng.integers(2, 8)), size=n).astype(float)
        else:
            a, b = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(a) > 0 and np.ptp(b) > 0:
            return a, b


def test_kendall_matches_pairwise_count_across_random_pairs():
    rng = np.random.default_rng(99)
    for _ in range(200):
        a, b = _random_pair(rng)
        assert kendall(a, b) == pytest.approx(_pairwise_tau_b(a, b), abs=1e-12)


def test_rank_statistics_ignore_increasing_transforms():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(5, 200))
        scores = np.round(rng.normal(size=n), 2)
        future = rng.normal(size=n)
        if np.ptp(scores) == 0:
            continue
        for transformed in (scores ** 3 + 2.0 * scores, np.exp(scores), 7.5 * scores - 3.0):
            assert spearman(transformed, future) == pytest.approx(spearman(scores, future), abs=1e-12)
            assert kendall(transformed, future) == pytest.approx(kendall(scores, future), abs=1e-12)
            assert ndcg_at(transformed, future, 0.25) == ndcg_at(scores, future, 0.25)


def test_reversed_order_is_minus_one():
    rng = np.random.default_rng(3)
    a = rng.normal(size=50)
    assert spearman(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert kendall(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert kendall(a, a) == pytest.approx(1.0, abs=1e-12)
