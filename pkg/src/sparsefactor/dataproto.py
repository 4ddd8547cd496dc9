"""Leakage-safe panel construction from vintaged series.

Mixed-frequency series are stored as (reference_period, value,
release_timestamp) triples and mapped onto a trading calendar so that the
cell for day t only ever uses releases available by end-of-day t.  Forward
filling happens strictly post-release and a binary mask records the actual
release days.  Preprocessing, feature screening, and rolling-origin fold
construction all compute their statistics on the training range only.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import InvalidArgumentError

FREQUENCIES = ("daily", "weekly", "monthly", "quarterly")


@dataclass
class VintageSeries:
    series_id: str
    observations: list[tuple]  # (reference_period, value, release_timestamp)
    frequency: str = "daily"
    block: str = "default"

    def __post_init__(self):
        if self.frequency not in FREQUENCIES:
            raise InvalidArgumentError(f"frequency must be one of {FREQUENCIES}")
        obs = []
        for ref, val, rel in self.observations:
            ref_ts = pd.Timestamp(ref)
            rel_ts = pd.Timestamp(rel)
            if rel_ts.normalize() < ref_ts.normalize():
                raise InvalidArgumentError(
                    f"{self.series_id}: release {rel_ts} precedes reference period {ref_ts}")
            obs.append((ref_ts, float(val), rel_ts))
        # multiple vintages per reference period allowed, ordered by release
        obs.sort(key=lambda o: (o[2], o[0]))
        self.observations = obs


@dataclass
class ColumnMeta:
    series_id: str
    block: str = "default"
    lag_policy: str = "release-aware"


@dataclass
class AlignedPanel:
    calendar: np.ndarray  # datetime64[D], sorted unique trading dates
    values: np.ndarray    # (T, d), NaN before first release
    masks: np.ndarray     # (T, d) binary, 1 only on release days
    column_meta: list[ColumnMeta]
    notes: list[str] = field(default_factory=list)

    def column_index(self, series_id: str) -> int:
        for j, meta in enumerate(self.column_meta):
            if meta.series_id == series_id:
                return j
        raise InvalidArgumentError(f"unknown series {series_id}")


def _effective_day(release_ts: pd.Timestamp, calendar: np.ndarray) -> np.datetime64 | None:
    """Trading day on which a release becomes usable.

    A release at or before 23:59:59 on trading day t is available for day t;
    releases on non-trading days roll to the next trading day.
    """
    day = np.datetime64(release_ts.normalize(), "D")
    pos = np.searchsorted(calendar, day, side="left")
    if pos >= calendar.size:
        return None
    return calendar[pos]


def align(series: list[VintageSeries], calendar) -> AlignedPanel:
    """Point-in-time panel: each cell holds the latest release available by day t."""
    cal = np.array([np.datetime64(pd.Timestamp(c).normalize(), "D") for c in calendar])
    if cal.size == 0:
        raise InvalidArgumentError("empty calendar")
    if not (np.all(np.diff(cal) > np.timedelta64(0, "D"))):
        raise InvalidArgumentError("calendar must be sorted and unique")
    t_len, d = cal.size, len(series)
    values = np.full((t_len, d), np.nan)
    masks = np.zeros((t_len, d))
    notes: list[str] = []
    meta: list[ColumnMeta] = []
    for j, s in enumerate(series):
        meta.append(ColumnMeta(series_id=s.series_id, block=s.block))
        events = []  # (effective_day, release_ts, ref, value)
        for ref, val, rel in s.observations:
            eff = _effective_day(rel, cal)
            if eff is None:
                continue
            if np.datetime64(rel.normalize(), "D") != eff:
                notes.append(f"{s.series_id}: release {rel.date()} mapped to "
                             f"next trading day {eff}")
            events.append((eff, rel, ref, val))
        if not events:
            notes.append(f"{s.series_id}: no releases inside calendar, column all-missing")
            continue
        # later release wins within a day (point-in-time, no backfilling)
        events.sort(key=lambda e: (e[0], e[1]))
        for eff, rel, ref, val in events:
            start = int(np.searchsorted(cal, eff, side="left"))
            values[start:, j] = val
            masks[start, j] = 1.0
    return AlignedPanel(calendar=cal, values=values, masks=masks,
                        column_meta=meta, notes=notes)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldEntry:
    train_years: tuple[int, int]  # inclusive
    val_years: tuple[int, int]
    test_years: tuple[int, int]

    def __post_init__(self):
        if not (self.train_years[1] < self.val_years[0] <= self.val_years[1]
                < self.test_years[0]):
            raise InvalidArgumentError("fold ranges must be chronological")

    def row_masks(self, calendar: np.ndarray) -> dict[str, np.ndarray]:
        years = calendar.astype("datetime64[Y]").astype(int) + 1970
        return {
            "train": (years >= self.train_years[0]) & (years <= self.train_years[1]),
            "val": (years >= self.val_years[0]) & (years <= self.val_years[1]),
            "test": (years >= self.test_years[0]) & (years <= self.test_years[1]),
        }


@dataclass
class FoldSchedule:
    folds: list[FoldEntry]


def make_folds(panel: AlignedPanel, train_len: int = 6, val_len: int = 1,
               test_len: int = 1, step: int = 2) -> FoldSchedule:
    """Rolling-origin folds anchored so the last fold tests on the final year."""
    years = panel.calendar.astype("datetime64[Y]").astype(int) + 1970
    first, last = int(years.min()), int(years.max())
    span = train_len + val_len + test_len
    if last - first + 1 < span:
        raise InvalidArgumentError("panel span too short for one fold")
    folds = []
    test_end = last
    while test_end - span + 1 >= first:
        test_start = test_end - test_len + 1
        val_end = test_start - 1
        val_start = val_end - val_len + 1
        train_end = val_start - 1
        train_start = train_end - train_len + 1
        folds.append(FoldEntry((train_start, train_end), (val_start, val_end),
                               (test_start, test_end)))
        test_end -= step
    folds.reverse()
    return FoldSchedule(folds=folds)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessStats:
    kept_columns: list[int]
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    dropped_missing: list[str]
    dropped_constant: list[str]


def preprocess(panel: AlignedPanel, fold: FoldEntry,
               max_missing_frac: float = 0.4,
               winsor_tail: float = 0.001) -> tuple[AlignedPanel, PreprocessStats]:
    """Train-fold statistics only: drop sparse/constant columns, winsorize, z-score."""
    row_masks = fold.row_masks(panel.calendar)
    train = panel.values[row_masks["train"]]
    if train.shape[0] == 0:
        raise InvalidArgumentError("fold train range outside panel calendar")
    kept, dropped_missing, dropped_constant = [], [], []
    for j in range(panel.values.shape[1]):
        col = train[:, j]
        if np.mean(np.isnan(col)) > max_missing_frac:
            dropped_missing.append(panel.column_meta[j].series_id)
            continue
        if np.nanstd(col) == 0.0 or np.all(np.isnan(col)):
            dropped_constant.append(panel.column_meta[j].series_id)
            warnings.warn(f"dropping zero-variance column {panel.column_meta[j].series_id}")
            continue
        kept.append(j)
    if not kept:
        raise InvalidArgumentError("no columns survive preprocessing")
    sub_train = train[:, kept]
    lower = np.nanquantile(sub_train, winsor_tail, axis=0)
    upper = np.nanquantile(sub_train, 1.0 - winsor_tail, axis=0)
    clipped_train = np.clip(sub_train, lower, upper)
    mean = np.nanmean(clipped_train, axis=0)
    std = np.nanstd(clipped_train, axis=0)
    std = np.where(std == 0.0, 1.0, std)
    all_vals = np.clip(panel.values[:, kept], lower, upper)
    normed = (all_vals - mean) / std
    out = AlignedPanel(calendar=panel.calendar, values=normed,
                       masks=panel.masks[:, kept],
                       column_meta=[panel.column_meta[j] for j in kept],
                       notes=list(panel.notes))
    stats = PreprocessStats(kept_columns=kept, mean=mean, std=std, lower=lower,
                            upper=upper, dropped_missing=dropped_missing,
                            dropped_constant=dropped_constant)
    return out, stats


# ---------------------------------------------------------------------------
# screening


def mutual_information_binned(x: np.ndarray, y: np.ndarray, bins: int = 16) -> float:
    """Plug-in MI (nats) on an equal-frequency grid; NaN rows are ignored."""
    ok = ~(np.isnan(x) | np.isnan(y))
    x, y = x[ok], y[ok]
    if x.size < bins * 2 or np.std(x) == 0 or np.std(y) == 0:
        return 0.0
    qx = np.unique(np.quantile(x, np.linspace(0, 1, bins + 1)))
    qy = np.unique(np.quantile(y, np.linspace(0, 1, bins + 1)))
    if qx.size < 3 or qy.size < 3:
        return 0.0
    ix = np.clip(np.searchsorted(qx, x, side="right") - 1, 0, qx.size - 2)
    iy = np.clip(np.searchsorted(qy, y, side="right") - 1, 0, qy.size - 2)
    joint = np.zeros((qx.size - 1, qy.size - 1))
    np.add.at(joint, (ix, iy), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))


def screen_features(panel: AlignedPanel, targets: np.ndarray, fold: FoldEntry,
                    mi_threshold: float = 0.1,
                    corr_threshold: float = 0.85) -> list[int]:
    """Retained column indices after MI relevance and within-block redundancy screens."""
    train_rows = fold.row_masks(panel.calendar)["train"]
    x_train = panel.values[train_rows]
    y_train = np.atleast_2d(np.asarray(targets, float))[train_rows]
    if y_train.ndim == 1:
        y_train = y_train[:, None]
    retained = []
    for j in range(x_train.shape[1]):
        mi = max(mutual_information_binned(x_train[:, j], y_train[:, k])
                 for k in range(y_train.shape[1]))
        if mi > mi_threshold:
            retained.append(j)
    # within-block redundancy: drop the later column of any highly correlated pair
    final: list[int] = []
    for j in retained:
        block_j = panel.column_meta[j].block
        redundant = False
        for i in final:
            if panel.column_meta[i].block != block_j:
                continue
            a, b = x_train[:, i], x_train[:, j]
            ok = ~(np.isnan(a) | np.isnan(b))
            if ok.sum() < 3 or np.std(a[ok]) == 0 or np.std(b[ok]) == 0:
                continue
            if abs(np.corrcoef(a[ok], b[ok])[0, 1]) >= corr_threshold:
                redundant = True
                break
        if not redundant:
            final.append(j)
    return final


# ---------------------------------------------------------------------------
# audit


@dataclass
class AuditReport:
    num_cells: int
    violations: list[dict]
    mask_mismatches: list[dict]
    notes: list[str]

    @property
    def clean(self) -> bool:
        return not self.violations and not self.mask_mismatches

    def to_dict(self) -> dict:
        return {"num_cells": self.num_cells, "violations": self.violations,
                "mask_mismatches": self.mask_mismatches, "notes": self.notes,
                "clean": self.clean}


def audit_leakage(panel: AlignedPanel, series: list[VintageSeries]) -> AuditReport:
    """Brute-force recheck of every cell against the raw vintages."""
    cal = panel.calendar
    by_id = {s.series_id: s for s in series}
    violations, mask_mismatches = [], []
    for j, meta in enumerate(panel.column_meta):
        s = by_id.get(meta.series_id)
        if s is None:
            violations.append({"column": meta.series_id, "reason": "series missing"})
            continue
        events = []
        for ref, val, rel in s.observations:
            eff = _effective_day(rel, cal)
            if eff is not None:
                events.append((eff, rel, val))
        events.sort(key=lambda e: (e[0], e[1]))
        for t, day in enumerate(cal):
            usable = [e for e in events if e[0] <= day]
            expected = usable[-1][2] if usable else np.nan
            got = panel.values[t, j]
            same = (np.isnan(expected) and np.isnan(got)) or expected == got
            if not same:
                offender = None
                for ref, val, rel in s.observations:
                    if val == got:
                        offender = str(rel)
                        break
                violations.append({"date": str(day), "column": meta.series_id,
                                   "expected": None if np.isnan(expected) else expected,
                                   "got": None if np.isnan(got) else got,
                                   "offending_release": offender})
            expected_mask = float(any(e[0] == day for e in events))
            if expected_mask != panel.masks[t, j]:
                mask_mismatches.append({"date": str(day), "column": meta.series_id,
                                        "expected": expected_mask,
                                        "got": float(panel.masks[t, j])})
    return AuditReport(num_cells=cal.size * len(panel.column_meta),
                       violations=violations, mask_mismatches=mask_mismatches,
                       notes=list(panel.notes))


# ---------------------------------------------------------------------------
# CSV interfaces


def load_series_csv(path: str | Path, series_id: str | None = None,
                    frequency: str = "daily", block: str = "default") -> VintageSeries:
    """Columns: reference_period, value, release_timestamp."""
    df = pd.read_csv(path)
    required = {"reference_period", "value", "release_timestamp"}
    if not required.issubset(df.columns):
        raise InvalidArgumentError(f"series CSV must have columns {sorted(required)}")
    obs = [(r.reference_period, r.value, r.release_timestamp)
           for r in df.itertuples(index=False)]
    return VintageSeries(series_id=series_id or Path(path).stem,
                         observations=obs, frequency=frequency, block=block)


def load_calendar_csv(path: str | Path) -> dict[str, dict]:
    """Release-calendar CSV: series_id, frequency, lag_rule."""
    df = pd.read_csv(path)
    required = {"series_id", "frequency", "lag_rule"}
    if not required.issubset(df.columns):
        raise InvalidArgumentError(f"calendar CSV must have columns {sorted(required)}")
    return {r.series_id: {"frequency": r.frequency, "lag_rule": r.lag_rule}
            for r in df.itertuples(index=False)}


def write_panel(panel: AlignedPanel, out_dir: str | Path,
                audit: AuditReport | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = [m.series_id for m in panel.column_meta]
    idx = pd.DatetimeIndex(panel.calendar, name="date")
    pd.DataFrame(panel.values, index=idx, columns=cols).to_csv(out / "panel.csv")
    pd.DataFrame(panel.masks, index=idx, columns=cols).to_csv(out / "masks.csv")
    if audit is not None:
        (out / "audit.json").write_text(json.dumps(audit.to_dict(), indent=2))


def read_panel(in_dir: str | Path, blocks: dict[str, str] | None = None) -> AlignedPanel:
    out = Path(in_dir)
    values = pd.read_csv(out / "panel.csv", index_col="date", parse_dates=True)
    masks = pd.read_csv(out / "masks.csv", index_col="date", parse_dates=True)
    meta = [ColumnMeta(series_id=c, block=(blocks or {}).get(c, "default"))
            for c in values.columns]
    return AlignedPanel(calendar=values.index.values.astype("datetime64[D]"),
                        values=values.to_numpy(float), masks=masks.to_numpy(float),
                        column_meta=meta)


# ---------------------------------------------------------------------------
# golden fixture: three mixed-frequency features over January 2020


def worked_example() -> tuple[list[VintageSeries], list[pd.Timestamp]]:
    """Daily close, weekly inventory, monthly survey index over Jan 2020 weekdays.

    The weekly report released Wed Jan 15 (covering through Jan 10) enters
    the panel on Jan 15 and forward-fills through Jan 21.  The December
    survey value released Jan 2 persists through Jan 31; the January value
    is released Feb 3 and never appears before that.
    """
    weekdays = [d for d in pd.date_range("2020-01-01", "2020-02-05", freq="B")]
    close = VintageSeries(
        "copper_close",
        [(d, 100.0 + i, d + pd.Timedelta(hours=17)) for i, d in enumerate(weekdays)],
        frequency="daily", block="price")
    inventory = VintageSeries(
        "crude_inventory",
        [("2020-01-03", 430.0, "2020-01-08 10:30"),
         ("2020-01-10", 431.5, "2020-01-15 10:30"),
         ("2020-01-17", 428.9, "2020-01-22 10:30"),
         ("2020-01-24", 433.2, "2020-01-29 10:30")],
        frequency="weekly", block="fundamentals")
    survey = VintageSeries(
        "pmi_manufacturing",
        [("2019-12-31", 47.2, "2020-01-02 10:00"),
         ("2020-01-31", 50.9, "2020-02-03 10:00")],
        frequency="monthly", block="macro")
    return [close, inventory, survey], weekdays
