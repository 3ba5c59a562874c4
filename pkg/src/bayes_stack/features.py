"""Data ingestion, calendar features, z-score normalization, and time splits."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from functools import singledispatch

import numpy as np
import pandas as pd

from .errors import DataError, DataWarning, SchemaError, SplitError

__all__ = [
    "TimeSeriesFrame",
    "RejectRecord",
    "ZScaler",
    "WEEKDAY_COLUMNS",
    "DEFAULT_SCHEMA",
    "load_csv",
    "weekday_dummies",
    "zscore_fit",
    "zscore_apply",
    "zscore_invert",
    "time_split",
    "write_rejects_csv",
]

WEEKDAY_COLUMNS = ("wd_mon", "wd_tue", "wd_wed", "wd_thu", "wd_fri", "wd_sat", "wd_sun")

# Canonical field -> expected CSV column. An optional DayOfWeek column is
# ignored; weekdays are recomputed from the date.
DEFAULT_SCHEMA = {"date": "Date", "store": "Store", "sales": "Sales", "promo": "Promo"}


@dataclass(frozen=True)
class RejectRecord:
    """One malformed input row: 1-based file line number plus the reason."""

    line: int
    reason: str


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Dated panel of (store, sales, promo) observations.

    Rows are sorted by (store, date); (date, store) pairs are unique; sales
    are nonnegative and promo is a 0/1 flag.
    """

    data: pd.DataFrame
    rejects: tuple[RejectRecord, ...] = field(default=())

    def __post_init__(self) -> None:
        df = self.data.copy()
        missing = [c for c in ("date", "store", "sales", "promo") if c not in df.columns]
        if missing:
            raise SchemaError(f"frame is missing columns: {', '.join(missing)}")
        df["date"] = pd.to_datetime(df["date"])
        df["store"] = df["store"].astype(str)
        df["sales"] = df["sales"].astype(float)
        df["promo"] = df["promo"].astype(float)
        if not np.all(np.isfinite(df["sales"])) or (df["sales"] < 0).any():
            raise DataError("sales must be finite and nonnegative")
        if not df["promo"].isin((0.0, 1.0)).all():
            raise DataError("promo must be 0 or 1")
        df["promo"] = df["promo"].astype(np.int64)
        dup = df.duplicated(subset=("date", "store"))
        if dup.any():
            first = df[dup].iloc[0]
            raise DataError(
                f"duplicate (date, store) pair: ({first['date'].date()}, {first['store']})"
            )
        df = df.sort_values(["store", "date"], kind="mergesort").reset_index(drop=True)
        object.__setattr__(self, "data", df[["date", "store", "sales", "promo"]])
        object.__setattr__(self, "rejects", tuple(self.rejects))

    @property
    def n_rows(self) -> int:
        return len(self.data)

    @property
    def dates(self) -> pd.Series:
        return self.data["date"]

    def stores(self) -> tuple[str, ...]:
        return tuple(sorted(self.data["store"].unique()))

    def for_store(self, store: str) -> "TimeSeriesFrame":
        sub = self.data[self.data["store"] == str(store)]
        if sub.empty:
            raise DataError(f"store {store!r} has no rows")
        return TimeSeriesFrame(sub.reset_index(drop=True))

    def filter_stores(self, stores) -> "TimeSeriesFrame":
        wanted = [str(s) for s in stores]
        present = set(self.data["store"])
        absent = [s for s in wanted if s not in present]
        if absent:
            warnings.warn(
                f"excluded stores with zero rows: {', '.join(absent)}", DataWarning
            )
        kept = [s for s in wanted if s in present]
        if not kept:
            raise DataError("no requested store has any rows")
        sub = self.data[self.data["store"].isin(kept)]
        return TimeSeriesFrame(sub.reset_index(drop=True))

    def truncate_store_history(self, store: str, keep_last: int) -> "TimeSeriesFrame":
        """Keep only the most recent ``keep_last`` rows of one store."""
        if keep_last < 1:
            raise DataError("keep_last must be >= 1")
        store = str(store)
        if store not in self.data["store"].values:
            raise DataError(f"store {store!r} has no rows")
        is_store = self.data["store"] == store
        tail = self.data[is_store].sort_values("date").tail(keep_last)
        out = pd.concat([self.data[~is_store], tail])
        return TimeSeriesFrame(out.reset_index(drop=True))


def load_csv(path, schema: dict[str, str] | None = None) -> TimeSeriesFrame:
    """Load a sales CSV into a typed frame, collecting malformed rows as rejects.

    Expected columns (remappable via ``schema``): Date in YYYY-MM-DD, Store,
    Sales, Promo. A missing required column is a schema error; a row that
    fails to parse becomes a reject record, not an error. Duplicate
    (date, store) pairs are a hard error.
    """
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    mapping = dict(DEFAULT_SCHEMA)
    mapping.update(schema or {})
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [col for col in mapping.values() if col not in raw.columns]
    if missing:
        raise SchemaError(f"missing required columns: {', '.join(missing)}")

    dates = pd.to_datetime(raw[mapping["date"]], format="%Y-%m-%d", errors="coerce")
    sales = pd.to_numeric(raw[mapping["sales"]], errors="coerce")
    promo = pd.to_numeric(raw[mapping["promo"]], errors="coerce")
    store = raw[mapping["store"]].str.strip()

    reasons = pd.Series("", index=raw.index, dtype=object)
    reasons[~promo.isin((0.0, 1.0))] = "invalid promo flag"
    reasons[~np.isfinite(sales) | (sales < 0)] = "invalid sales value"
    reasons[store == ""] = "missing store id"
    reasons[dates.isna()] = "unparseable date"

    bad = reasons != ""
    rejects = tuple(
        RejectRecord(line=int(i) + 2, reason=str(r)) for i, r in reasons[bad].items()
    )
    good = pd.DataFrame(
        {
            "date": dates[~bad],
            "store": store[~bad],
            "sales": sales[~bad],
            "promo": promo[~bad],
        }
    )
    if rejects:
        warnings.warn(f"rejected {len(rejects)} malformed rows", DataWarning)
    return TimeSeriesFrame(good, rejects=rejects)


def write_rejects_csv(rejects, path) -> None:
    pd.DataFrame(
        [(r.line, r.reason) for r in rejects], columns=["line", "reason"]
    ).to_csv(path, index=False)


def weekday_dummies(dates) -> pd.DataFrame:
    """One-hot weekday matrix, Monday in the first column through Sunday in the last."""
    idx = pd.DatetimeIndex(pd.to_datetime(dates))
    mat = np.zeros((len(idx), 7))
    if len(idx):
        mat[np.arange(len(idx)), idx.weekday] = 1.0
    return pd.DataFrame(mat, columns=list(WEEKDAY_COLUMNS))


@dataclass(frozen=True)
class ZScaler:
    """Per-column mean and sample standard deviation (denominator n-1)."""

    means: dict[str, float]
    sds: dict[str, float]

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(self.means)


def zscore_fit(data: pd.DataFrame, columns=None) -> ZScaler:
    cols = list(columns) if columns is not None else list(data.columns)
    means: dict[str, float] = {}
    sds: dict[str, float] = {}
    for col in cols:
        if col not in data.columns:
            raise DataError(f"column {col!r} not present")
        values = np.asarray(data[col], dtype=float)
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        if sd == 0.0:
            raise DataError(f"column {col!r} is constant (sd = 0); cannot z-score")
        means[col] = float(np.mean(values))
        sds[col] = sd
    return ZScaler(means=means, sds=sds)


def zscore_apply(scaler: ZScaler, data: pd.DataFrame) -> pd.DataFrame:
    out = data.copy()
    for col in scaler.columns:
        if col not in out.columns:
            raise DataError(f"column {col!r} not present")
        out[col] = (np.asarray(out[col], dtype=float) - scaler.means[col]) / scaler.sds[col]
    return out


def zscore_invert(scaler: ZScaler, data: pd.DataFrame) -> pd.DataFrame:
    out = data.copy()
    for col in scaler.columns:
        if col not in out.columns:
            raise DataError(f"column {col!r} not present")
        out[col] = np.asarray(out[col], dtype=float) * scaler.sds[col] + scaler.means[col]
    return out


@singledispatch
def time_split(obj, split_date):
    """Split by date: train gets rows strictly before ``split_date``, test the rest."""
    raise TypeError(f"time_split does not support {type(obj).__name__}")


@time_split.register
def _(obj: TimeSeriesFrame, split_date) -> tuple[TimeSeriesFrame, TimeSeriesFrame]:
    cutoff = pd.Timestamp(split_date)
    before = obj.data["date"] < cutoff
    n_train, n_test = int(before.sum()), int((~before).sum())
    if n_train == 0 or n_test == 0:
        raise SplitError(
            f"split at {cutoff.date()} leaves train={n_train}, test={n_test} rows"
        )
    return (
        TimeSeriesFrame(obj.data[before].reset_index(drop=True)),
        TimeSeriesFrame(obj.data[~before].reset_index(drop=True)),
    )
