"""
Data Service - price ingestion, log returns, cleaning, synthetic markets and
time-series fold geometry.
"""
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from backend.errors import (
    EmptyUniverseError,
    InputError,
    SizeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_FREQUENCY = 252
DEFAULT_MISSING_THRESHOLD = 0.10

CACHE_MAGIC = b"ASRM1\n"


def fraction_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), tolerant of binary rounding (0.1 * 30 -> 3, not 4)"""
    return max(0, math.ceil(fraction * n - 1e-9))


@dataclass
class PriceTable:
    timestamps: pd.DatetimeIndex
    assets: List[str]
    prices: np.ndarray  # [time x asset], NaN = missing

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float)
        if self.prices.shape != (len(self.timestamps), len(self.assets)):
            raise ValidationError(
                f"Price array shape {self.prices.shape} does not match "
                f"{len(self.timestamps)} dates x {len(self.assets)} assets"
            )
        if len(set(self.assets)) != len(self.assets):
            raise ValidationError("Asset identifiers must be unique")
        if len(self.timestamps) > 1 and not self.timestamps.is_monotonic_increasing:
            raise ValidationError("Timestamps must be strictly increasing")
        if self.timestamps.has_duplicates:
            raise ValidationError("Timestamps must be strictly increasing (duplicate date)")
        present = self.prices[~np.isnan(self.prices)]
        if np.any(present <= 0) or not np.all(np.isfinite(present)):
            raise ValidationError("Every present price must be finite and > 0")


@dataclass
class ReturnMatrix:
    timestamps: pd.DatetimeIndex
    assets: List[str]
    returns: np.ndarray  # [T x N] per-period log returns
    frequency: int = DEFAULT_FREQUENCY

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=float)
        if self.returns.ndim != 2 or self.returns.shape != (len(self.timestamps), len(self.assets)):
            raise ValidationError(
                f"Return array shape {self.returns.shape} does not match "
                f"{len(self.timestamps)} dates x {len(self.assets)} assets"
            )

    @property
    def n_periods(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def window(self, start: int, stop: int) -> "ReturnMatrix":
        """Rows [start, stop) as a new matrix sharing the asset list"""
        return ReturnMatrix(self.timestamps[start:stop], list(self.assets),
                            self.returns[start:stop], self.frequency)

    def select(self, assets: List[str]) -> "ReturnMatrix":
        index = {a: i for i, a in enumerate(self.assets)}
        missing = [a for a in assets if a not in index]
        if missing:
            raise ValidationError(f"Assets not in return matrix: {', '.join(missing)}")
        cols = [index[a] for a in assets]
        return ReturnMatrix(self.timestamps, list(assets), self.returns[:, cols], self.frequency)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.returns, index=self.timestamps, columns=self.assets)
        frame.index.name = "date"
        return frame


@dataclass(frozen=True)
class Fold:
    train: Tuple[int, int]   # [start, stop)
    future: Tuple[int, int]  # [start, stop)


@dataclass
class FoldSet:
    folds: List[Fold]
    holdout: Optional[Tuple[int, int]] = None
    n_periods: int = 0

    def fingerprint(self) -> str:
        """Stable hash of the fold geometry, used as a cache key component"""
        payload = json.dumps({
            "folds": [[list(f.train), list(f.future)] for f in self.folds],
            "holdout": list(self.holdout) if self.holdout else None,
            "n_periods": self.n_periods,
        }, sort_keys=True)
        return hashlib.sha1(payload.encode("utf-8")).hexdigest()

    @property
    def prefix_end(self) -> int:
        """End of the non-holdout prefix"""
        return self.holdout[0] if self.holdout else self.n_periods


@dataclass
class Regime:
    duration: int
    drift_mean: float
    drift_dispersion: float
    vol_mean: float
    vol_dispersion: float


def _default_regimes(n_periods: int) -> List[Regime]:
    calm = n_periods - n_periods // 5
    return [
        Regime(calm, drift_mean=3e-4, drift_dispersion=4e-4, vol_mean=0.015, vol_dispersion=0.005),
        # crash-like stress window at the end of the sample
        Regime(n_periods - calm, drift_mean=-1e-3, drift_dispersion=1e-3, vol_mean=0.035, vol_dispersion=0.01),
    ]


@dataclass
class SyntheticSpec:
    n_assets: int = 100
    n_periods: int = 1260
    regimes: List[Regime] = field(default_factory=list)
    tail_df: float = 4.0
    seed: int = 7

    def __post_init__(self):
        if not self.regimes:
            self.regimes = _default_regimes(self.n_periods)
        if self.n_assets < 1 or self.n_periods < 1:
            raise ValidationError("Synthetic spec needs at least one asset and one period")
        if sum(r.duration for r in self.regimes) != self.n_periods:
            raise ValidationError(
                f"Regime durations sum to {sum(r.duration for r in self.regimes)}, "
                f"expected n_periods={self.n_periods}"
            )
        if not self.tail_df > 2:
            raise ValidationError(f"tail_df must be > 2, got {self.tail_df}")
        for r in self.regimes:
            if r.duration < 0 or r.drift_dispersion < 0 or r.vol_dispersion < 0:
                raise ValidationError("Regime durations and dispersions must be >= 0")

    @classmethod
    def from_json(cls, path, default_seed: Optional[int] = None) -> "SyntheticSpec":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"Synthetic spec not found: {path}")
        except json.JSONDecodeError as e:
            raise InputError(f"Synthetic spec {path} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise InputError(f"Synthetic spec {path} must be a JSON object")
        if "seed" not in raw and default_seed is not None:
            raw["seed"] = default_seed
        try:
            regimes = [Regime(**r) for r in raw.pop("regimes", [])]
            return cls(regimes=regimes, **raw)
        except (TypeError, ValueError) as e:
            raise InputError(f"Synthetic spec {path}: {e}")


def _parse_dates(values: pd.Series, path) -> pd.Series:
    parsed = pd.to_datetime(values, errors="coerce")
    bad = parsed.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        # +2: header is line 1
        raise InputError(f"{path}: unparseable date {values.iloc[row]!r} on row {row + 2}")
    return parsed


def _parse_numbers(frame: pd.DataFrame, path) -> pd.DataFrame:
    out = {}
    for col in frame.columns:
        raw = frame[col]
        parsed = pd.to_numeric(raw, errors="coerce")
        bad = parsed.isna() & raw.notna() & (raw.astype(str).str.strip() != "")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise InputError(f"{path}: unparseable number {raw.iloc[row]!r} in column {col!r} on row {row + 2}")
        out[col] = parsed
    return pd.DataFrame(out, index=frame.index)


def load_price_csv(path, layout: str = "wide") -> PriceTable:
    """
    Read adjusted prices from CSV.

    Args:
        path: CSV file
        layout: "wide" (date column then one column per asset) or
                "long" (columns date,asset,price)
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"Price file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8-sig")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: {e}")

    if layout == "wide":
        if raw.shape[1] < 2:
            raise InputError(f"{path}: wide layout needs a date column and at least one asset column")
        dates = _parse_dates(raw.iloc[:, 0], path)
        values = _parse_numbers(raw.iloc[:, 1:], path)
        if dates.duplicated().any():
            dup = dates[dates.duplicated()].iloc[0]
            raise ValidationError(f"{path}: duplicate cell for date {dup.date()}")
        values.index = pd.DatetimeIndex(dates)
        values = values.sort_index()
    elif layout == "long":
        missing_cols = {"date", "asset", "price"} - set(raw.columns)
        if missing_cols:
            raise InputError(f"{path}: long layout needs columns date,asset,price (missing {sorted(missing_cols)})")
        dates = _parse_dates(raw["date"], path)
        prices = _parse_numbers(raw[["price"]], path)["price"]
        long = pd.DataFrame({"date": dates, "asset": raw["asset"].str.strip(), "price": prices})
        dup = long.duplicated(subset=["date", "asset"])
        if dup.any():
            row = long[dup].iloc[0]
            raise ValidationError(f"{path}: duplicate cell ({row['date'].date()}, {row['asset']})")
        assets = list(dict.fromkeys(long["asset"]))
        values = long.pivot(index="date", columns="asset", values="price").reindex(columns=assets).sort_index()
        values.index = pd.DatetimeIndex(values.index)
        values.columns = list(values.columns)
    else:
        raise InputError(f"Unknown CSV layout {layout!r} (expected wide or long)")

    present = values.to_numpy(dtype=float)
    nonpositive = ~np.isnan(present) & (present <= 0)
    if nonpositive.any():
        t, i = np.argwhere(nonpositive)[0]
        raise ValidationError(
            f"{path}: non-positive price {present[t, i]} for asset {values.columns[i]} on {values.index[t].date()}"
        )

    logger.info(f"[DATA] Loaded {path.name}: {values.shape[0]} dates x {values.shape[1]} assets ({layout})")
    return PriceTable(pd.DatetimeIndex(values.index), [str(c) for c in values.columns], present)


def to_log_returns(p: PriceTable, frequency: int = DEFAULT_FREQUENCY) -> ReturnMatrix:
    """returns[t] = ln(prices[t+1] / prices[t]); a missing price on either side leaves NaN"""
    if len(p.timestamps) < 2:
        raise SizeError(f"Need at least 2 price rows for returns, got {len(p.timestamps)}")
    with np.errstate(invalid="ignore"):
        returns = np.log(p.prices[1:] / p.prices[:-1])
    return ReturnMatrix(p.timestamps[1:], list(p.assets), returns, frequency)


def clean(r: ReturnMatrix, missing_threshold: float = DEFAULT_MISSING_THRESHOLD) -> ReturnMatrix:
    """
    Drop assets whose missing fraction exceeds the threshold, then zero-fill
    the remaining gaps. Non-finite entries count as missing.
    """
    if not 0.0 <= missing_threshold <= 1.0:
        raise ValidationError(f"Missing-data threshold must be in [0, 1], got {missing_threshold}")
    missing = ~np.isfinite(r.returns)
    if r.n_periods == 0:
        frac = np.zeros(r.n_assets)
    else:
        frac = missing.mean(axis=0)
    keep = frac <= missing_threshold
    dropped = [a for a, k in zip(r.assets, keep) if not k]
    if dropped:
        logger.info(f"[DATA] Dropping {len(dropped)} assets with missing fraction > {missing_threshold}")
    if not keep.any():
        raise EmptyUniverseError("All assets were dropped by the missing-data policy")
    returns = np.where(missing[:, keep], 0.0, r.returns[:, keep])
    return ReturnMatrix(r.timestamps, [a for a, k in zip(r.assets, keep) if k], returns, r.frequency)


def split_time_series(r: ReturnMatrix, holdout_frac: float, n_folds: int, train_len: int,
                      future_len: int, stride: int) -> FoldSet:
    """
    Rolling train/future windows over the non-holdout prefix.

    The holdout is the final ceil(holdout_frac * T) periods. Fold i trains on
    [i*stride, i*stride + train_len) and looks forward over the next future_len
    periods. Folds may overlap.
    """
    T = r.n_periods
    if not 0.0 <= holdout_frac < 1.0:
        raise SizeError(f"holdout_frac must be in [0, 1), got {holdout_frac}")
    if stride < 1 or train_len < 1 or future_len < 1 or n_folds < 0:
        raise SizeError("train_len, future_len and stride must be >= 1 and n_folds >= 0")
    n_holdout = fraction_count(holdout_frac, T)
    available = T - n_holdout
    required = (max(n_folds, 1) - 1) * stride + train_len + future_len
    if required > available:
        raise SizeError(
            f"{n_folds} folds of train {train_len} + future {future_len} with stride {stride} "
            f"need {required} periods, only {available} available before the holdout"
        )
    folds = []
    for i in range(n_folds):
        start = i * stride
        folds.append(Fold((start, start + train_len), (start + train_len, start + train_len + future_len)))
    holdout = (available, T) if n_holdout > 0 else None
    logger.debug(f"[DATA] {len(folds)} folds, holdout={holdout}")
    return FoldSet(folds, holdout, T)


def generate_synthetic(spec: SyntheticSpec) -> ReturnMatrix:
    """
    Regime-switching Student-t market. Per regime, each asset draws a drift and
    a volatility once; returns are drift + vol * t-noise scaled to unit variance.
    """
    rng = np.random.default_rng(spec.seed)
    scale = math.sqrt((spec.tail_df - 2.0) / spec.tail_df)
    blocks = []
    for regime in spec.regimes:
        drift = rng.normal(regime.drift_mean, regime.drift_dispersion, size=spec.n_assets)
        vol = np.abs(rng.normal(regime.vol_mean, regime.vol_dispersion, size=spec.n_assets))
        noise = rng.standard_t(spec.tail_df, size=(regime.duration, spec.n_assets)) * scale
        blocks.append(drift + vol * noise)
    returns = np.vstack(blocks) if blocks else np.empty((0, spec.n_assets))
    width = len(str(spec.n_assets))
    assets = [f"SYN{i:0{width}d}" for i in range(spec.n_assets)]
    timestamps = pd.bdate_range("2000-01-03", periods=spec.n_periods)
    return ReturnMatrix(timestamps, assets, returns, DEFAULT_FREQUENCY)


def save_return_csv(r: ReturnMatrix, path) -> None:
    frame = r.to_frame()
    frame.index = frame.index.strftime("%Y-%m-%d")
    frame.to_csv(path, lineterminator="\n")


def save_return_cache(r: ReturnMatrix, path) -> None:
    """Binary cache: magic, 8-byte header length, JSON header, raw float64 rows"""
    header = json.dumps({
        "assets": r.assets,
        "timestamps": [t.strftime("%Y-%m-%d") for t in r.timestamps],
        "frequency": r.frequency,
        "shape": list(r.returns.shape),
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(r.returns, dtype="<f8").tobytes())


def load_return_cache(path) -> ReturnMatrix:
    with open(path, "rb") as f:
        magic = f.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise InputError(f"{path}: not a return-matrix cache (bad magic {magic!r})")
        (length,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(length).decode("utf-8"))
        data = np.frombuffer(f.read(), dtype="<f8")
    shape = tuple(header["shape"])
    if data.size != shape[0] * shape[1]:
        raise InputError(f"{path}: truncated cache ({data.size} values, expected {shape[0] * shape[1]})")
    return ReturnMatrix(pd.DatetimeIndex(header["timestamps"]), header["assets"],
                        data.reshape(shape).astype(float), header["frequency"])
