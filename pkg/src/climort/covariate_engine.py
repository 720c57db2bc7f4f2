"""Weekly fixed-effect covariates: scaled weather means, week classifiers, heat-index categories.

Computes the 13 covariate columns of the mortality model's linear
predictor from fused district-week weather, in this fixed order::

    scale_temp_max_mean, scale_temp_min_mean, scale_humidity_mean,
    strong_discomfort, severe_malaise, increased_risk, serious_risk,
    mild_week, hot_week, cold_week, super_cold_week, last_week_was_dry,
    elevation_km
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ValidationError
from .geo_graph import DistrictGraph

logger = logging.getLogger(__name__)

COVARIATE_NAMES = (
    "scale_temp_max_mean",
    "scale_temp_min_mean",
    "scale_humidity_mean",
    "strong_discomfort",
    "severe_malaise",
    "increased_risk",
    "serious_risk",
    "mild_week",
    "hot_week",
    "cold_week",
    "super_cold_week",
    "last_week_was_dry",
    "elevation_km",
)

HEAT_CATEGORIES = ("none", "strong_discomfort", "severe_malaise", "increased_risk", "serious_risk")

# Apparent-temperature grid: rows are air temperature 22..42 C, columns
# relative humidity 25..100 % in steps of 5.
HEAT_INDEX_TEMPS_C = np.arange(22, 43)
HEAT_INDEX_HUMIDITIES_PCT = np.arange(25, 101, 5)
HEAT_INDEX_VALUES = np.array([
    [22, 22, 22, 22, 23, 24, 25, 25, 26, 27, 27, 28, 29, 30, 30, 31],
    [23, 23, 23, 24, 25, 25, 26, 27, 28, 28, 29, 30, 31, 32, 32, 33],
    [24, 24, 24, 25, 26, 27, 28, 28, 29, 30, 31, 32, 33, 33, 34, 35],
    [25, 25, 26, 27, 27, 28, 29, 30, 31, 32, 33, 34, 34, 35, 36, 37],
    [26, 26, 27, 28, 29, 30, 31, 32, 33, 34, 34, 35, 36, 37, 38, 39],
    [27, 27, 28, 29, 30, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41],
    [28, 29, 30, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43],
    [29, 30, 31, 32, 33, 35, 36, 37, 38, 39, 40, 41, 42, 43, 45, 46],
    [30, 32, 33, 34, 35, 36, 37, 39, 40, 41, 42, 43, 45, 46, 47, 48],
    [32, 33, 34, 35, 37, 38, 39, 40, 42, 43, 44, 45, 47, 48, 49, 50],
    [33, 34, 36, 37, 38, 40, 41, 42, 44, 45, 46, 48, 49, 50, 52, 53],
    [34, 36, 37, 39, 40, 41, 43, 44, 46, 47, 48, 50, 51, 53, 54, 55],
    [36, 37, 39, 40, 42, 43, 45, 46, 48, 49, 51, 52, 54, 55, 57, 58],
    [37, 39, 40, 42, 44, 45, 47, 48, 50, 51, 53, 54, 56, 58, 59, 61],
    [39, 40, 42, 44, 45, 47, 49, 50, 52, 54, 55, 57, 59, 60, 62, 63],
    [40, 42, 44, 45, 47, 49, 51, 52, 54, 56, 58, 59, 61, 63, 65, 66],
    [42, 44, 45, 47, 49, 51, 53, 55, 56, 58, 60, 62, 64, 66, 67, 69],
    [43, 45, 47, 49, 51, 53, 55, 57, 59, 61, 63, 65, 66, 68, 70, 72],
    [45, 47, 49, 51, 53, 55, 57, 59, 61, 63, 65, 67, 69, 71, 73, 75],
    [46, 48, 51, 53, 55, 57, 59, 61, 64, 66, 68, 70, 72, 74, 76, 79],
    [48, 50, 52, 55, 57, 59, 62, 64, 66, 68, 71, 73, 75, 77, 80, 82],
], dtype=int)

# Category onsets on the index value scale; the four named bands are the
# danger levels strong discomfort / severe malaise / increased risk /
# serious risk. Values below the first onset carry no category.
HEAT_BAND_ONSETS = (35, 40, 46, 54)


@dataclass(frozen=True)
class HeatIndexTable:
    """Integer heat-index lookup grid with value-band categories."""

    temperatures_c: np.ndarray = field(default_factory=lambda: HEAT_INDEX_TEMPS_C.copy())
    humidities_pct: np.ndarray = field(default_factory=lambda: HEAT_INDEX_HUMIDITIES_PCT.copy())
    values: np.ndarray = field(default_factory=lambda: HEAT_INDEX_VALUES.copy())
    band_onsets: tuple[int, int, int, int] = HEAT_BAND_ONSETS

    def category_of(self, value: int) -> str:
        cat = "none"
        for onset, name in zip(self.band_onsets, HEAT_CATEGORIES[1:]):
            if value >= onset:
                cat = name
        return cat

    def lookup(self, temp_c: float, humidity_pct: float) -> int:
        if not (math.isfinite(temp_c) and math.isfinite(humidity_pct)):
            raise ValidationError(
                f"heat index needs finite inputs, got temp={temp_c}, humidity={humidity_pct}")
        # nearest grid cell, halves rounded up, clamped to the table range
        ti = int(math.floor(temp_c + 0.5)) - int(self.temperatures_c[0])
        ti = min(max(ti, 0), len(self.temperatures_c) - 1)
        hi = int(math.floor(humidity_pct / 5.0 + 0.5)) - int(self.humidities_pct[0]) // 5
        hi = min(max(hi, 0), len(self.humidities_pct) - 1)
        return int(self.values[ti, hi])


DEFAULT_HEAT_TABLE = HeatIndexTable()


def heat_index(temp_c: float, humidity_pct: float,
               table: HeatIndexTable = DEFAULT_HEAT_TABLE) -> tuple[int, str]:
    """Look up the heat-index value and its danger category.

    Inputs are rounded to the nearest table cell (1 C temperature rows,
    5 % humidity columns) and clamped to the table bounds.
    """
    value = table.lookup(temp_c, humidity_pct)
    return value, table.category_of(value)


# ---------------------------------------------------------------------------
# week classifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeekClassifierConfig:
    """Thresholds and run lengths for the weekly indicator definitions."""

    hot_tmin_above_c: float = 18.0
    hot_run: int = 3
    cold_tmin_below_c: float = 0.0
    cold_run: int = 3
    super_cold_tmin_below_c: float = -5.0
    super_cold_run: int = 2
    mild_tmean_low_c: float = 2.0    # open interval (low, high)
    mild_tmean_high_c: float = 9.0
    mild_run: int = 3
    dry_run: int = 3
    dry_hot_tmean_above_c: float = 21.8   # 95th percentile of daily means
    dry_cold_tmean_below_c: float = -5.0  # 5th percentile of daily means
    dry_percentile_mode: str = "per_day"  # each dry day must pass, or "run_mean"


@dataclass(frozen=True)
class WeekFlags:
    hot_week: int
    cold_week: int
    super_cold_week: int
    mild_week: int
    dry_period: int
    last_week_was_dry: int
    short_trace: bool = False


def _has_run(mask: np.ndarray, run: int) -> bool:
    streak = 0
    for hit in mask:
        streak = streak + 1 if hit else 0
        if streak >= run:
            return True
    return False


def _dry_run(precip, tmean, run, threshold, above, mode):
    precip = np.asarray(precip, dtype=float)
    tmean = np.asarray(tmean, dtype=float)
    dry = precip == 0.0
    if mode == "per_day":
        extreme = tmean > threshold if above else tmean < threshold
        return _has_run(dry & extreme, run)
    if mode == "run_mean":
        for start in range(len(dry) - run + 1):
            window = slice(start, start + run)
            if np.all(dry[window]):
                m = float(np.mean(tmean[window]))
                if (m > threshold) if above else (m < threshold):
                    return True
        return False
    raise ValidationError(f"unknown dry_percentile_mode {mode!r}")


def classify_week(tmin_daily, tmean_daily, precip_daily, prev_week_dry_period: bool,
                  config: WeekClassifierConfig = WeekClassifierConfig()) -> WeekFlags:
    """Classify one week of daily traces into the binary indicator set.

    hot: >= 3 consecutive days with minimum temperature above 18 C;
    cold: >= 3 consecutive days below 0 C; super cold: >= 2 consecutive
    days below -5 C; mild: >= 3 consecutive days with mean temperature
    strictly between 2 and 9 C. A dry period is >= 3 consecutive days
    without precipitation whose mean temperatures sit beyond the hot or
    the cold percentile threshold; the week after a dry period carries
    last_week_was_dry (passed in via `prev_week_dry_period`).

    Traces shorter than a tested run length yield indicator 0 for that
    test and mark the result as `short_trace`.
    """
    tmin = np.asarray(tmin_daily, dtype=float)
    tmean = np.asarray(tmean_daily, dtype=float)
    precip = np.asarray(precip_daily, dtype=float)
    n = len(tmin)
    if len(tmean) != n or len(precip) != n:
        raise ValidationError("daily traces must have equal length")
    max_run = max(config.hot_run, config.cold_run, config.super_cold_run,
                  config.mild_run, config.dry_run)
    short = n < max_run
    if short:
        logger.warning("trace of %d days is shorter than the longest tested run (%d)", n, max_run)
    hot = _has_run(tmin > config.hot_tmin_above_c, config.hot_run)
    cold = _has_run(tmin < config.cold_tmin_below_c, config.cold_run)
    super_cold = _has_run(tmin < config.super_cold_tmin_below_c, config.super_cold_run)
    mild = _has_run((tmean > config.mild_tmean_low_c) & (tmean < config.mild_tmean_high_c),
                    config.mild_run)
    dry = (_dry_run(precip, tmean, config.dry_run, config.dry_hot_tmean_above_c,
                    True, config.dry_percentile_mode)
           or _dry_run(precip, tmean, config.dry_run, config.dry_cold_tmean_below_c,
                       False, config.dry_percentile_mode))
    return WeekFlags(int(hot), int(cold), int(super_cold), int(mild), int(dry),
                     int(bool(prev_week_dry_period)), short)


def classify_heat_week(tmean_daily, humidity_daily,
                       table: HeatIndexTable = DEFAULT_HEAT_TABLE) -> dict[str, int]:
    """Set each heat-index category indicator if at least one day hits its band.

    The categories are not mutually exclusive across a week: a week may
    hit several bands on different days.
    """
    tmean = np.asarray(tmean_daily, dtype=float)
    humidity = np.asarray(humidity_daily, dtype=float)
    if len(tmean) != len(humidity):
        raise ValidationError("daily traces must have equal length")
    hits = {name: 0 for name in HEAT_CATEGORIES[1:]}
    for t, h in zip(tmean, humidity):
        _, cat = heat_index(t, h, table)
        if cat != "none":
            hits[cat] = 1
    return hits


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardization:
    mean: float
    sd: float

    def apply(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.sd

    def invert(self, values):
        return np.asarray(values, dtype=float) * self.sd + self.mean


def standardize(values) -> tuple[np.ndarray, Standardization]:
    """Center and scale to unit sample standard deviation (divisor n-1).

    The (mean, sd) pair is returned for persistence so new data can be
    mapped onto the training scale.
    """
    arr = np.asarray(values, dtype=float)
    mean = float(np.mean(arr))
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    if not np.isfinite(sd) or sd <= 0.0:
        raise ValidationError("cannot standardize a zero-variance column")
    record = Standardization(mean, sd)
    return record.apply(arr), record


# ---------------------------------------------------------------------------
# design matrix
# ---------------------------------------------------------------------------

@dataclass
class DesignMatrix:
    """Per-(district, week) covariate rows in model column order.

    Rows are ordered district-major, week-minor; `row_of` maps a
    (district_id, (iso_year, iso_week)) key to its row index.
    """

    district_ids: tuple[str, ...]
    weeks: tuple[tuple[int, int], ...]
    values: np.ndarray
    standardization: dict[str, Standardization]

    def __post_init__(self):
        expected = (len(self.district_ids) * len(self.weeks), len(COVARIATE_NAMES))
        if self.values.shape != expected:
            raise ValidationError(f"design matrix shape {self.values.shape}, expected {expected}")
        self._index = {
            (d, w): i * len(self.weeks) + j
            for i, d in enumerate(self.district_ids)
            for j, w in enumerate(self.weeks)
        }

    def row_of(self, district_id: str, week: tuple[int, int]) -> int:
        key = (district_id, week)
        if key not in self._index:
            raise ValidationError(f"no design row for district {district_id!r}, week {week}")
        return self._index[key]


def build_design_matrix(weather, graph: DistrictGraph,
                        table: HeatIndexTable = DEFAULT_HEAT_TABLE,
                        config: WeekClassifierConfig = WeekClassifierConfig(),
                        recompute_percentiles: bool = False) -> DesignMatrix:
    """Turn fused district-week weather into the 13-column design matrix.

    `weather` is the district-week output of the ingestion stage; every
    district of the graph must be covered for the same set of weeks.
    The three continuous columns are standardized over the whole corpus;
    elevation enters in kilometres. The dry-period lag is evaluated
    sequentially in week order within each district.
    """
    by_key = {(w.district_id, (w.iso_year, w.iso_week)): w for w in weather}
    weeks = sorted({(w.iso_year, w.iso_week) for w in weather})
    if not weeks:
        raise ValidationError("no weather rows")
    for d in graph.district_ids:
        for wk in weeks:
            if (d, wk) not in by_key:
                raise ValidationError(f"missing weather for district {d!r}, week {wk}")

    if recompute_percentiles:
        all_tmean = np.concatenate([np.asarray(w.daily["temp_mean_c"]) for w in weather])
        config = WeekClassifierConfig(
            **{**asdict(config),
               "dry_hot_tmean_above_c": float(np.percentile(all_tmean, 95)),
               "dry_cold_tmean_below_c": float(np.percentile(all_tmean, 5))})

    n_rows = len(graph.district_ids) * len(weeks)
    values = np.zeros((n_rows, len(COVARIATE_NAMES)))
    col = {name: k for k, name in enumerate(COVARIATE_NAMES)}

    row = 0
    for di, district in enumerate(graph.district_ids):
        prev_dry = False
        for wk in weeks:
            w = by_key[(district, wk)]
            flags = classify_week(w.daily["temp_min_c"], w.daily["temp_mean_c"],
                                  w.daily["precip_sum_mm"], prev_dry, config)
            heat = classify_heat_week(w.daily["temp_mean_c"], w.daily["humidity_mean_pct"], table)
            values[row, col["scale_temp_max_mean"]] = w.temp_max_weekly_mean_c
            values[row, col["scale_temp_min_mean"]] = w.temp_min_weekly_mean_c
            values[row, col["scale_humidity_mean"]] = w.humidity_weekly_mean_pct
            for name in HEAT_CATEGORIES[1:]:
                values[row, col[name]] = heat[name]
            values[row, col["mild_week"]] = flags.mild_week
            values[row, col["hot_week"]] = flags.hot_week
            values[row, col["cold_week"]] = flags.cold_week
            values[row, col["super_cold_week"]] = flags.super_cold_week
            values[row, col["last_week_was_dry"]] = flags.last_week_was_dry
            values[row, col["elevation_km"]] = graph.elevation_m[di] / 1000.0
            prev_dry = bool(flags.dry_period)
            row += 1

    standardization = {}
    for name in ("scale_temp_max_mean", "scale_temp_min_mean", "scale_humidity_mean"):
        values[:, col[name]], standardization[name] = standardize(values[:, col[name]])
    return DesignMatrix(tuple(graph.district_ids), tuple(weeks), values, standardization)


def write_design_csv(path, design: DesignMatrix, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["district_id", "iso_year", "iso_week", *COVARIATE_NAMES])
        row = 0
        for d in design.district_ids:
            for (year, week) in design.weeks:
                writer.writerow([d, year, week, *[repr(float(v)) for v in design.values[row]]])
                row += 1


def read_design_csv(path, standardization_path=None) -> DesignMatrix:
    rows = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        needed = {"district_id", "iso_year", "iso_week", *COVARIATE_NAMES}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ValidationError(f"{path}: design CSV is missing required columns")
        for rec in reader:
            rows.append((rec["district_id"], (int(rec["iso_year"]), int(rec["iso_week"])),
                         [float(rec[name]) for name in COVARIATE_NAMES]))
    if not rows:
        raise ValidationError(f"{path}: empty design CSV")
    district_ids = tuple(dict.fromkeys(r[0] for r in rows))
    weeks = tuple(sorted({r[1] for r in rows}))
    values = np.zeros((len(district_ids) * len(weeks), len(COVARIATE_NAMES)))
    index = {(d, w): i * len(weeks) + j
             for i, d in enumerate(district_ids) for j, w in enumerate(weeks)}
    seen = set()
    for d, w, vals in rows:
        key = (d, w)
        if key not in index:
            raise ValidationError(f"{path}: unexpected design row {key}")
        values[index[key]] = vals
        seen.add(key)
    if len(seen) != len(index):
        raise ValidationError(f"{path}: design CSV does not cover every (district, week)")
    standardization = {}
    if standardization_path is not None:
        with open(standardization_path) as fh:
            raw = json.load(fh)
        standardization = {name: Standardization(rec["mean"], rec["sd"])
                           for name, rec in raw.items() if isinstance(rec, dict)}
    return DesignMatrix(district_ids, weeks, values, standardization)


def write_standardization_json(path, design: DesignMatrix, config_hash: str | None = None) -> None:
    payload = {name: {"mean": rec.mean, "sd": rec.sd}
               for name, rec in sorted(design.standardization.items())}
    if config_hash is not None:
        payload["config_hash"] = config_hash
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
