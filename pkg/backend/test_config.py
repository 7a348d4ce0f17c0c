"""
Tests for run configuration loading.
Run with: pytest backend/test_config.py
"""
import pytest

from backend.config import RunConfig, load_run_config, parse_value
from backend.errors import ConfigError


def test_defaults():
    cfg = load_run_config()
    assert cfg.metrics == ["sharpe", "psr", "alpha_s1", "alpha_s2", "alpha_s3", "alpha_s4"]
    assert cfg.fractions == (0.10, 0.15, 0.20, 0.25)
    assert (cfg.folds, cfg.train_len, cfg.future_len, cfg.stride) == (4, 504, 126, 126)
    assert cfg.generator == "builtin"


def test_file_values_and_flag_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment\n"
        "RF=0.0001\n"
        "METRICS=sharpe,alpha_s2\n"
        "FRACTIONS=0.1,0.2\n"
        "LAMBDA=0.001\n"
        "ANNUALIZE=yes\n"
        "SEED=5\n"
    )
    cfg = load_run_config(str(path), {"seed": 9, "rf": None})
    assert cfg.rf == 0.0001
    assert cfg.metrics == ["sharpe", "alpha_s2"]
    assert cfg.fractions == (0.1, 0.2)
    assert cfg.lam == 0.001
    assert cfg.annualize is True
    assert cfg.seed == 9


def test_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("WHATEVER=1\n")
    with pytest.raises(ConfigError, match="WHATEVER"):
        load_run_config(str(path))


def test_bad_value(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("FOLDS=many\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/run.cfg")


@pytest.mark.parametrize("overrides", [
    {"generator": "external"},
    {"entropy_mode": "vector"},
    {"fractions": (0.0,)},
    {"data": "prices.csv", "synthetic": "market.json"},
    {"threads": 0},
])
def test_invalid_combinations(overrides):
    with pytest.raises(ConfigError):
        load_run_config(None, overrides)


def test_resolved_text_round_trips(tmp_path):
    cfg = RunConfig(rf=0.0002, metrics=["alpha_s4"], threads=3, llm_url="http://llm.test/v1").validate()
    text = cfg.resolved_text()
    lines = text.splitlines()
    assert lines == sorted(lines)
    assert "LAM=0.0001" in lines
    path = tmp_path / "config.resolved"
    path.write_text(text)
    assert load_run_config(str(path)) == cfg


def test_parse_value_alias():
    assert parse_value("LAMBDA", "0.01") == ("lam", 0.01)
    assert parse_value("rank_mode", "folds") == ("rank_mode", "folds")
