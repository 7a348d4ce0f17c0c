"""
Run configuration: defaults < KEY=VALUE config file < command-line flags.

The config file uses the same KEY=VALUE syntax as .env files and is read
with python-dotenv.
"""
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from dotenv import dotenv_values

from backend.errors import ConfigError

logger = logging.getLogger(__name__)

BASELINE_METRICS = ["sharpe", "psr", "alpha_s1", "alpha_s2", "alpha_s3", "alpha_s4"]

# Figures reported for the proprietary 15-year, 3,246-asset US universe.
# Documentation only: they cannot be reproduced on synthetic data.
REFERENCE_RESULTS = {
    "ranking_spearman": {"sharpe": 0.130, "alpha_s4": 0.409},
    "alpha_s2_delta_sharpe_pct_at_25pct": 93.97,
    "alphasharpe_portfolio_vs_equal_weight": {"delta_sharpe_pct": 71.04, "delta_calmar_pct": 116.31},
}


def _floats(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _names(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _optional_str(value: str) -> Optional[str]:
    return value.strip() or None


@dataclass
class RunConfig:
    data: Optional[str] = None
    layout: str = "wide"
    synthetic: Optional[str] = None
    rf: float = 0.0
    frequency: int = 252
    missing_threshold: float = 0.10
    holdout: float = 0.2
    folds: int = 4
    train_len: int = 504
    future_len: int = 126
    stride: int = 126
    metrics: List[str] = field(default_factory=lambda: list(BASELINE_METRICS))
    metrics_file: Optional[str] = None
    fitness_weights: Tuple[float, ...] = (0.4, 0.3, 0.3)
    ndcg_fraction: float = 0.25
    fractions: Tuple[float, ...] = (0.10, 0.15, 0.20, 0.25)
    rank_mode: str = "prefix"
    lam: float = 1e-4
    epsilon: float = 1e-8
    entropy_mode: str = "scalar"
    out: str = "out"
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    annualize: bool = False
    generator: str = "builtin"
    llm_url: Optional[str] = None
    llm_timeout: float = 30.0
    llm_model: str = field(default_factory=lambda: os.getenv("ALPHASHARPE_LLM_MODEL", "gpt-4o-mini"))
    prompt_template: Optional[str] = None
    max_inflight: int = 2
    population_size: int = 24
    n_generations: int = 10
    top_k: int = 6
    crossover_count: int = 12
    mutation_count: int = 6

    def validate(self) -> "RunConfig":
        if self.data and self.synthetic:
            raise ConfigError("Give either a data file or a synthetic spec, not both")
        if self.layout not in ("wide", "long"):
            raise ConfigError(f"LAYOUT must be wide or long, got {self.layout!r}")
        if self.entropy_mode not in ("scalar", "per_asset"):
            raise ConfigError(f"ENTROPY_MODE must be scalar or per_asset, got {self.entropy_mode!r}")
        if self.generator not in ("builtin", "external"):
            raise ConfigError(f"GENERATOR must be builtin or external, got {self.generator!r}")
        if self.generator == "external" and not self.llm_url:
            raise ConfigError("GENERATOR=external needs LLM_URL")
        if self.rank_mode not in ("prefix", "folds"):
            raise ConfigError(f"RANK_MODE must be prefix or folds, got {self.rank_mode!r}")
        if len(self.fitness_weights) != 3:
            raise ConfigError("FITNESS_WEIGHTS needs three values (spearman,kendall,ndcg)")
        if any(not 0 < f <= 1 for f in self.fractions) or not self.fractions:
            raise ConfigError(f"FRACTIONS must lie in (0, 1], got {self.fractions}")
        if not 0 < self.ndcg_fraction <= 1:
            raise ConfigError(f"NDCG_FRACTION must lie in (0, 1], got {self.ndcg_fraction}")
        if self.threads < 1:
            raise ConfigError("THREADS must be >= 1")
        if not self.metrics:
            raise ConfigError("METRICS is empty")
        return self

    def resolved_text(self) -> str:
        """KEY=VALUE lines, sorted, round-trippable through load_run_config"""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if value is None:
                value = ""
            elif isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name.upper()}={value}")
        return "\n".join(lines) + "\n"


PARSERS: Dict[str, Callable[[str], Any]] = {
    "data": _optional_str, "layout": str.strip, "synthetic": _optional_str,
    "rf": float, "frequency": int, "missing_threshold": float, "holdout": float,
    "folds": int, "train_len": int, "future_len": int, "stride": int,
    "metrics": _names, "metrics_file": _optional_str, "fitness_weights": _floats,
    "ndcg_fraction": float, "fractions": _floats, "rank_mode": str.strip,
    "lam": float, "epsilon": float, "entropy_mode": str.strip, "out": str.strip,
    "seed": int, "threads": int, "annualize": _bool, "generator": str.strip,
    "llm_url": _optional_str, "llm_timeout": float, "llm_model": str.strip,
    "prompt_template": _optional_str, "max_inflight": int, "population_size": int,
    "n_generations": int, "top_k": int, "crossover_count": int, "mutation_count": int,
}
ALIASES = {"lambda": "lam"}


def parse_value(key: str, raw: str) -> Tuple[str, Any]:
    name = ALIASES.get(key.lower(), key.lower())
    if name not in PARSERS:
        raise ConfigError(f"Unknown config key {key!r}")
    try:
        return name, PARSERS[name](raw)
    except ValueError as e:
        raise ConfigError(f"Bad value for {key}: {raw!r} ({e})")


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the run configuration.

    Args:
        path: optional KEY=VALUE config file
        overrides: already-typed values from command-line flags (None = not given)
    """
    values: Dict[str, Any] = {}
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"Config file not found: {path}")
        for key, raw in dotenv_values(path).items():
            name, value = parse_value(key, raw if raw is not None else "")
            values[name] = value
        logger.info(f"[CONFIG] Loaded {len(values)} keys from {path}")
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = value
    try:
        return RunConfig(**values).validate()
    except TypeError as e:
        raise ConfigError(str(e))
