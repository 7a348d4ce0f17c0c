"""
AlphaSharpe command-line entry point.

    python -m backend.main {score,evaluate,backtest,evolve,synth} [flags]

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
"""
import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from backend.config import RunConfig, load_run_config
from backend.data_service import (
    FoldSet,
    ReturnMatrix,
    SyntheticSpec,
    clean,
    generate_synthetic,
    load_price_csv,
    load_return_cache,
    save_return_cache,
    save_return_csv,
    split_time_series,
    to_log_returns,
)
from backend.errors import AlphaSharpeError, ConfigError, DataError
from backend.evaluation_service import (
    CUSTOM_SCORERS,
    FitnessWeights,
    evaluate_metric,
    fold_scores,
)
from backend.evolution_service import EvolutionConfig, evolve
from backend.gpt_service import DEFAULT_TEMPLATE, LLMEndpoint
from backend.metrics_service import (
    CUSTOM_KIND,
    MetricDescriptor,
    MetricRegistry,
    score_universe,
)
from backend.portfolio_service import (
    PerfReport,
    WeightVector,
    alphasharpe_weights,
    backtest,
    compare_strategies,
    equal_weight,
    erc_weights,
    risk_parity_weights,
    render_comparison,
    select_top_fraction,
)

logger = logging.getLogger("backend.main")

BENCHMARK = "equal_weighted"
THRESHOLD_BASELINES = ("sharpe", "psr")


# ---------------------------------------------------------------- helpers

def load_returns(cfg: RunConfig) -> ReturnMatrix:
    if cfg.data:
        path = Path(cfg.data)
        if path.suffix == ".asrm":
            r = load_return_cache(path)
        else:
            r = to_log_returns(load_price_csv(path, cfg.layout), cfg.frequency)
    else:
        spec = (SyntheticSpec.from_json(cfg.synthetic, default_seed=cfg.seed)
                if cfg.synthetic else SyntheticSpec(seed=cfg.seed))
        r = generate_synthetic(spec)
        r.frequency = cfg.frequency
    r = clean(r, cfg.missing_threshold)
    logger.info(f"[CLI] Return matrix: {r.n_periods} periods x {r.n_assets} assets")
    return r


def build_registry(cfg: RunConfig) -> MetricRegistry:
    registry = MetricRegistry.with_baselines()
    if cfg.metrics_file:
        for d in MetricRegistry.load(cfg.metrics_file):
            if d.name not in registry:
                registry.add(d)
    for name in sorted(CUSTOM_SCORERS):
        if name not in registry:
            registry.add(MetricDescriptor(name, CUSTOM_KIND))
    return registry


def resolve_metrics(cfg: RunConfig) -> List[MetricDescriptor]:
    registry = build_registry(cfg)
    return [registry.get(name) for name in cfg.metrics]


def build_folds(cfg: RunConfig, r: ReturnMatrix) -> FoldSet:
    return split_time_series(r, cfg.holdout, cfg.folds, cfg.train_len, cfg.future_len, cfg.stride)


def prepare_out(cfg: RunConfig) -> Tuple[Path, Path]:
    out = Path(cfg.out)
    reports, logs = out / "reports", out / "logs"
    reports.mkdir(parents=True, exist_ok=True)
    logs.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved_text(), encoding="utf-8")
    return reports, logs


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, na_rep="NA", lineterminator="\n")
    logger.info(f"[CLI] Wrote {path}")


def _scores_for(m: MetricDescriptor, r: ReturnMatrix, train: Tuple[int, int], future: Tuple[int, int],
                r_f: float, executor=None) -> np.ndarray:
    if m.kind == CUSTOM_KIND:
        return fold_scores(m, r, train, future, r_f)
    return score_universe(r.window(*train), m, r_f, executor)


# ---------------------------------------------------------------- commands

def cmd_score(cfg: RunConfig, executor) -> int:
    r = load_returns(cfg)
    reports, _ = prepare_out(cfg)
    frame = pd.DataFrame({"asset": r.assets})
    full = (0, r.n_periods)
    for m in resolve_metrics(cfg):
        frame[m.name] = _scores_for(m, r, full, full, cfg.rf, executor)
        if cfg.annualize and m.kind == "sharpe":
            frame[f"{m.name}_annualized"] = frame[m.name] * math.sqrt(r.frequency)
    _write_csv(frame, reports / "scores.csv")
    return 0


def cmd_evaluate(cfg: RunConfig, executor) -> int:
    r = load_returns(cfg)
    folds = build_folds(cfg, r)
    reports, _ = prepare_out(cfg)
    summary, holdout_rows = [], []
    results: Dict[str, object] = {}
    last_error: Optional[AlphaSharpeError] = None

    for m in resolve_metrics(cfg):
        try:
            rep = evaluate_metric(m, r, folds, cfg.rf, executor, cfg.ndcg_fraction)
        except AlphaSharpeError as e:
            last_error = e
            logger.error(f"[CLI] Evaluation of {m.name} failed: {e}")
            summary.append({"metric": m.name, "spearman": None, "kendall": None, "ndcg": None})
            holdout_rows.append({"metric": m.name, "spearman": None, "kendall": None, "ndcg": None})
            continue
        results[m.name] = rep
        (reports / f"eval_{m.name}.json").write_text(rep.to_json(), encoding="utf-8")
        _write_csv(rep.to_frame(), reports / f"eval_{m.name}.csv")
        summary.append({"metric": m.name, **{s: rep.mean(s) for s in ("spearman", "kendall", "ndcg")}})
        h = rep.holdout
        holdout_rows.append({"metric": m.name, "spearman": h.spearman if h else None,
                             "kendall": h.kendall if h else None, "ndcg": h.ndcg if h else None})

    columns = ["metric", "spearman", "kendall", "ndcg"]
    _write_csv(pd.DataFrame(summary, columns=columns), reports / "summary.csv")
    _write_csv(pd.DataFrame(holdout_rows, columns=columns), reports / "summary_holdout.csv")
    # one table, aggregate rows first, then holdout rows
    combined = [{"row_type": "aggregate", **row} for row in summary] + \
               [{"row_type": "holdout", **row} for row in holdout_rows]
    _write_csv(pd.DataFrame(combined, columns=["row_type", *columns]), reports / "summary_table.csv")
    (reports / "directional_check.txt").write_text(directional_check(results), encoding="utf-8")

    if not results:
        raise last_error or DataError("No metric could be evaluated")
    return 0


def directional_check(results: Dict[str, object]) -> str:
    """Indicative holdout comparison of alpha_s2 against sharpe; reported, never asserted"""
    a, s = results.get("alpha_s2"), results.get("sharpe")
    if not (a and s and a.holdout and s.holdout):
        return "directional check: n/a (needs alpha_s2 and sharpe with a holdout)\n"
    verdict = "exceeds" if a.holdout.spearman > s.holdout.spearman else "does not exceed"
    return (f"directional check (indicative only): alpha_s2 holdout spearman {a.holdout.spearman:.4f} "
            f"{verdict} sharpe holdout spearman {s.holdout.spearman:.4f}\n")


def _mean_report(reports: List[PerfReport]) -> PerfReport:
    return PerfReport(
        sharpe=float(np.mean([p.sharpe for p in reports])),
        sharpe_annualized=float(np.mean([p.sharpe_annualized for p in reports])),
        calmar=float(np.mean([p.calmar for p in reports])),
        mdd=float(np.mean([p.mdd for p in reports])),
        cumulative_log_return=float(np.mean([p.cumulative_log_return for p in reports])),
        n_periods=int(sum(p.n_periods for p in reports)),
    )


def threshold_reports(cfg: RunConfig, r: ReturnMatrix, folds: FoldSet,
                      metrics: List[MetricDescriptor], executor) -> Dict[Tuple[str, float], PerfReport]:
    """
    Top-fraction equal-weight portfolios per metric. prefix mode ranks once on
    the training prefix and tests on the holdout; folds mode ranks on each
    fold's train window, tests on its future window and averages.
    """
    if cfg.rank_mode == "prefix":
        windows = [((0, folds.prefix_end), folds.holdout)]
    else:
        windows = [(f.train, f.future) for f in folds.folds]
    out = {}
    for m in metrics:
        per_fraction: Dict[float, List[PerfReport]] = {f: [] for f in cfg.fractions}
        for train, future in windows:
            scores = _scores_for(m, r, train, future, cfg.rf, executor)
            test = r.window(*future)
            for fraction in cfg.fractions:
                picks = select_top_fraction(scores, r.assets, fraction)
                per_fraction[fraction].append(backtest(equal_weight(picks), test, cfg.rf))
        for fraction, reps in per_fraction.items():
            out[(m.name, fraction)] = reps[0] if len(reps) == 1 else _mean_report(reps)
    return out


def cmd_backtest(cfg: RunConfig, executor) -> int:
    if cfg.holdout <= 0:
        raise ConfigError("backtest needs a holdout (HOLDOUT > 0)")
    r = load_returns(cfg)
    folds = build_folds(cfg, r)
    reports, _ = prepare_out(cfg)
    metrics = resolve_metrics(cfg)

    perf = threshold_reports(cfg, r, folds, metrics, executor)
    _write_csv(pd.DataFrame([
        {"metric": name, "fraction": fraction, **asdict(rep)} for (name, fraction), rep in perf.items()
    ]), reports / "threshold_perf.csv")

    deltas = []
    names = [m.name for m in metrics]
    for fraction in cfg.fractions:
        for name in names:
            for baseline in THRESHOLD_BASELINES:
                if baseline == name or baseline not in names:
                    continue
                table = compare_strategies([(baseline, perf[(baseline, fraction)]),
                                            (name, perf[(name, fraction)])], baseline)
                row = table.iloc[1]
                deltas.append({"fraction": fraction, "metric": name, "baseline": baseline,
                               "delta_sharpe_pct": row["delta_sharpe_pct"],
                               "delta_calmar_pct": row["delta_calmar_pct"]})
    _write_csv(pd.DataFrame(deltas, columns=["fraction", "metric", "baseline",
                                             "delta_sharpe_pct", "delta_calmar_pct"]),
               reports / "threshold_delta.csv")

    train = r.window(0, folds.prefix_end)
    test = r.window(*folds.holdout)
    excess = ReturnMatrix(train.timestamps, train.assets, train.returns - cfg.rf, train.frequency)
    allocations: List[Tuple[str, WeightVector]] = [
        (BENCHMARK, equal_weight(train.assets)),
        ("risk_parity", risk_parity_weights(train)),
        ("erc", erc_weights(train, lam=cfg.lam)),
        ("alphasharpe", alphasharpe_weights(excess, cfg.lam, cfg.epsilon, cfg.entropy_mode)),
    ]
    strategy_reports = []
    for name, weights in allocations:
        weights.to_csv(reports / f"weights_{name}.csv")
        strategy_reports.append((name, backtest(weights, test, cfg.rf)))
    table = compare_strategies(strategy_reports, BENCHMARK)
    _write_csv(table, reports / "allocator_comparison.csv")
    (reports / "allocator_comparison.txt").write_text(render_comparison(table), encoding="utf-8")
    return 0


def cmd_evolve(cfg: RunConfig, executor) -> int:
    r = load_returns(cfg)
    folds = build_folds(cfg, r)
    reports, logs = prepare_out(cfg)

    registry = build_registry(cfg)
    seeds = [registry.get(name) for name in dict.fromkeys(
        ["sharpe", "psr", "alpha_s1", "alpha_s2", "alpha_s3", "alpha_s4", *cfg.metrics])]
    endpoint = None
    if cfg.generator == "external":
        endpoint = LLMEndpoint(url=cfg.llm_url, timeout=cfg.llm_timeout, model=cfg.llm_model,
                               template_path=Path(cfg.prompt_template) if cfg.prompt_template else DEFAULT_TEMPLATE,
                               max_inflight=cfg.max_inflight)
    try:
        weights = FitnessWeights(*cfg.fitness_weights)
        ecfg = EvolutionConfig(
            population_size=cfg.population_size, n_generations=cfg.n_generations, top_k=cfg.top_k,
            crossover_count=cfg.crossover_count, mutation_count=cfg.mutation_count, weights=weights,
            seed=cfg.seed, generator=cfg.generator, endpoint=endpoint, r_f=cfg.rf,
            ndcg_fraction=cfg.ndcg_fraction,
        )
    except AlphaSharpeError as e:
        raise ConfigError(str(e))

    log = evolve(r, folds, ecfg, seeds, executor)
    (logs / "evolution.jsonl").write_text(log.to_jsonl(), encoding="utf-8")

    best = log.best()
    final = evaluate_metric(best.descriptor, r, folds, cfg.rf, executor, cfg.ndcg_fraction)
    summary = {
        "best": best.to_record(),
        "cross_validation": final.aggregates,
        "holdout": asdict(final.holdout) if final.holdout else None,
        "rounds": len(log.rounds) - 1,
        "final_population": [c.id for c in log.final_population()],
    }
    (reports / "evolution_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                    encoding="utf-8")
    logger.info(f"[CLI] Fittest descriptor: {best.descriptor.name} ({best.descriptor.kind}) "
                f"fitness={best.fitness:.4f}")
    return 0


def cmd_synth(cfg: RunConfig, executor) -> int:
    spec = (SyntheticSpec.from_json(cfg.synthetic, default_seed=cfg.seed)
            if cfg.synthetic else SyntheticSpec(seed=cfg.seed))
    r = generate_synthetic(spec)
    reports, _ = prepare_out(cfg)
    save_return_csv(r, reports / "synthetic.csv")
    save_return_cache(r, reports / "synthetic.asrm")
    logger.info(f"[CLI] Synthetic market {r.n_periods} x {r.n_assets} written to {reports}")
    return 0


COMMANDS = {
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "evolve": cmd_evolve,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------- parsing

def _float_list(value: str) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}")


def _name_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="KEY=VALUE config file")
    common.add_argument("--data", help="price CSV (or .asrm return cache)")
    common.add_argument("--synthetic", help="synthetic market spec JSON")
    common.add_argument("--rf", type=float, help="per-period log risk-free rate")
    common.add_argument("--metrics", type=_name_list, help="comma-separated metric names")
    common.add_argument("--fractions", type=_float_list, help="portfolio fractions, e.g. 0.1,0.25")
    common.add_argument("--holdout", type=float, help="holdout fraction of the sample")
    common.add_argument("--folds", type=int, help="number of CV folds")
    common.add_argument("--train-len", dest="train_len", type=int)
    common.add_argument("--future-len", dest="future_len", type=int)
    common.add_argument("--stride", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--entropy-mode", dest="entropy_mode", choices=["scalar", "per_asset"])
    common.add_argument("--generator", choices=["builtin", "external"])
    common.add_argument("--llm-url", dest="llm_url")
    common.add_argument("--llm-timeout", dest="llm_timeout", type=float)
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="alphasharpe", description="AlphaSharpe metric and portfolio toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(func.__doc__ or name).strip().splitlines()[0])
    return parser


OVERRIDE_KEYS = ("data", "synthetic", "rf", "metrics", "fractions", "holdout", "folds", "train_len",
                 "future_len", "stride", "seed", "threads", "out", "entropy_mode", "generator",
                 "llm_url", "llm_timeout")


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_run_config(args.config, {k: getattr(args, k) for k in OVERRIDE_KEYS})
        with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
            return COMMANDS[args.command](cfg, executor)
    except AlphaSharpeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
