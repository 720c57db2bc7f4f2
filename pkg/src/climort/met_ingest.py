"""Station weather ingestion: imputation, weekly aggregation, district fusion.

Daily station records are imputed by month-stratified resampling,
aggregated to ISO calendar weeks, and fused onto districts either by
averaging the stations inside each district (with a k-nearest-neighbour
fallback for districts without stations) or by state-level averaging.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, replace

import numpy as np

from .errors import ImputationError, ValidationError
from .geo_graph import DistrictGraph

WEATHER_VARIABLES = ("temp_mean_c", "temp_min_c", "temp_max_c",
                     "humidity_mean_pct", "precip_sum_mm")


@dataclass(frozen=True)
class DailyStationRecord:
    """One station-day of weather; any measured value may be missing (None)."""

    station_id: str
    date: dt.date
    temp_mean_c: float | None
    temp_min_c: float | None
    temp_max_c: float | None
    humidity_mean_pct: float | None
    precip_sum_mm: float | None
    x_km: float
    y_km: float


def validate_record(rec: DailyStationRecord) -> None:
    """Range and ordering checks applied to measured (pre-imputation) records.

    Imputation draws each variable independently, so imputed triples are
    not re-checked for min <= mean <= max ordering.
    """
    tmin, tmean, tmax = rec.temp_min_c, rec.temp_mean_c, rec.temp_max_c
    if tmin is not None and tmean is not None and tmax is not None:
        if not tmin <= tmean <= tmax:
            raise ValidationError(
                f"station {rec.station_id} {rec.date}: "
                f"temperatures not ordered (min {tmin}, mean {tmean}, max {tmax})")
    if rec.humidity_mean_pct is not None and not 0.0 <= rec.humidity_mean_pct <= 100.0:
        raise ValidationError(
            f"station {rec.station_id} {rec.date}: humidity {rec.humidity_mean_pct} "
            "outside [0, 100]")
    if rec.precip_sum_mm is not None and rec.precip_sum_mm < 0.0:
        raise ValidationError(
            f"station {rec.station_id} {rec.date}: negative precipitation")


def _parse_optional(text):
    text = text.strip()
    return None if text == "" else float(text)


def read_station_csv(path) -> list[DailyStationRecord]:
    """Read daily station records; empty fields mean missing values."""
    records = []
    locations: dict[str, tuple[float, float]] = {}
    with open(path, newline="") as fh:
        if not fh.readline().startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        needed = {"station_id", "date", *WEATHER_VARIABLES, "x_km", "y_km"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ValidationError(f"{path}: station CSV needs columns {sorted(needed)}")
        seen = set()
        for ln, row in enumerate(reader, start=2):
            try:
                rec = DailyStationRecord(
                    station_id=row["station_id"],
                    date=dt.date.fromisoformat(row["date"]),
                    temp_mean_c=_parse_optional(row["temp_mean_c"]),
                    temp_min_c=_parse_optional(row["temp_min_c"]),
                    temp_max_c=_parse_optional(row["temp_max_c"]),
                    humidity_mean_pct=_parse_optional(row["humidity_mean_pct"]),
                    precip_sum_mm=_parse_optional(row["precip_sum_mm"]),
                    x_km=float(row["x_km"]),
                    y_km=float(row["y_km"]),
                )
                validate_record(rec)
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{ln}: {exc}") from exc
            key = (rec.station_id, rec.date)
            if key in seen:
                raise ValidationError(f"{path}:{ln}: duplicate record for {key}")
            seen.add(key)
            loc = (rec.x_km, rec.y_km)
            if locations.setdefault(rec.station_id, loc) != loc:
                raise ValidationError(f"{path}:{ln}: station {rec.station_id} changed location")
            records.append(rec)
    if not records:
        raise ValidationError(f"{path}: no station records")
    return records


def read_station_lookup(path) -> dict[str, str]:
    """Read the station -> district assignment CSV."""
    lookup = {}
    with open(path, newline="") as fh:
        if not fh.readline().startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"station_id", "district_id"}.issubset(reader.fieldnames):
            raise ValidationError(f"{path}: lookup CSV needs station_id,district_id")
        for ln, row in enumerate(reader, start=2):
            sid = row["station_id"]
            if sid in lookup:
                raise ValidationError(f"{path}:{ln}: duplicate station {sid!r}")
            lookup[sid] = row["district_id"]
    if not lookup:
        raise ValidationError(f"{path}: empty lookup")
    return lookup


def station_locations(records: list[DailyStationRecord]) -> dict[str, tuple[float, float]]:
    return {r.station_id: (r.x_km, r.y_km) for r in records}


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------

def impute_missing_daily(records: list[DailyStationRecord], seed: int) -> list[DailyStationRecord]:
    """Fill missing daily values by month-stratified resampling.

    Each missing value is drawn uniformly with replacement from the same
    station's observed values for the same calendar month, pooled across
    years. Observed values are passed through untouched, output order
    matches input order, and results are reproducible for a fixed seed.
    """
    donors: dict[tuple[str, str, int], list[float]] = {}
    for rec in records:
        for var in WEATHER_VARIABLES:
            val = getattr(rec, var)
            if val is not None:
                donors.setdefault((rec.station_id, var, rec.date.month), []).append(val)

    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        changes = {}
        for var in WEATHER_VARIABLES:
            if getattr(rec, var) is not None:
                continue
            pool = donors.get((rec.station_id, var, rec.date.month))
            if not pool:
                raise ImputationError(
                    f"no observed values to impute {var} for station {rec.station_id} "
                    f"in calendar month {rec.date.month}")
            changes[var] = pool[int(rng.integers(len(pool)))]
        out.append(replace(rec, **changes) if changes else rec)
    return out


def count_missing(records: list[DailyStationRecord]) -> dict[str, int]:
    counts = {var: 0 for var in WEATHER_VARIABLES}
    for rec in records:
        for var in WEATHER_VARIABLES:
            if getattr(rec, var) is None:
                counts[var] += 1
    return counts


# ---------------------------------------------------------------------------
# weekly aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeeklyStationSummary:
    """Weekly means plus the underlying daily traces for one station."""

    station_id: str
    iso_year: int
    iso_week: int
    temp_min_weekly_mean_c: float
    temp_max_weekly_mean_c: float
    humidity_weekly_mean_pct: float
    daily: dict[str, np.ndarray]
    n_days: int
    partial: bool


def aggregate_weekly(records: list[DailyStationRecord]) -> list[WeeklyStationSummary]:
    """Aggregate imputed daily records to ISO-week summaries per station.

    Weekly means are arithmetic means of the daily values. Weeks with
    fewer than seven days (horizon edges) use the available days and are
    flagged as partial.
    """
    groups: dict[tuple[str, int, int], list[DailyStationRecord]] = {}
    for rec in records:
        for var in WEATHER_VARIABLES:
            if getattr(rec, var) is None:
                raise ValidationError(
                    f"station {rec.station_id} {rec.date}: {var} still missing; impute first")
        year, week, _ = rec.date.isocalendar()
        groups.setdefault((rec.station_id, year, week), []).append(rec)

    out = []
    for (sid, year, week) in sorted(groups):
        days = sorted(groups[(sid, year, week)], key=lambda r: r.date)
        daily = {var: np.array([getattr(r, var) for r in days]) for var in WEATHER_VARIABLES}
        out.append(WeeklyStationSummary(
            station_id=sid, iso_year=year, iso_week=week,
            temp_min_weekly_mean_c=float(np.mean(daily["temp_min_c"])),
            temp_max_weekly_mean_c=float(np.mean(daily["temp_max_c"])),
            humidity_weekly_mean_pct=float(np.mean(daily["humidity_mean_pct"])),
            daily=daily, n_days=len(days), partial=len(days) < 7))
    return out


# ---------------------------------------------------------------------------
# fusion onto districts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeeklyDistrictWeather:
    """Fused district-week weather: weekly means plus daily traces."""

    district_id: str
    iso_year: int
    iso_week: int
    temp_min_weekly_mean_c: float
    temp_max_weekly_mean_c: float
    humidity_weekly_mean_pct: float
    daily: dict[str, np.ndarray]
    n_days: int
    partial: bool
    source: str
    n_source_stations: int


def _mean_of_stations(summaries: list[WeeklyStationSummary]) -> tuple[dict, int, bool]:
    n_days = {s.n_days for s in summaries}
    if len(n_days) != 1:
        raise ValidationError(
            f"stations disagree on day count within week "
            f"{summaries[0].iso_year}-W{summaries[0].iso_week:02d}")
    ordered = sorted(summaries, key=lambda s: s.station_id)  # fixed reduction order
    daily = {var: np.mean([s.daily[var] for s in ordered], axis=0) for var in WEATHER_VARIABLES}
    return daily, n_days.pop(), any(s.partial for s in ordered)


def _knn_station_ids(centroid, locations, candidates, k):
    if k < 1:
        raise ValidationError("k must be at least 1")
    if k > len(candidates):
        raise ValidationError(f"k={k} larger than the {len(candidates)} available stations")
    ordered = sorted(candidates)
    dist = np.array([np.hypot(locations[s][0] - centroid[0], locations[s][1] - centroid[1])
                     for s in ordered])
    kth = np.sort(dist)[k - 1]
    # include every station tied with the k-th distance
    cut = kth * (1.0 + 1e-12) + 1e-12
    return [s for s, d in zip(ordered, dist) if d <= cut]


def fuse_to_districts(weekly: list[WeeklyStationSummary], graph: DistrictGraph,
                      locations: dict[str, tuple[float, float]], lookup: dict[str, str],
                      mode: str = "district", k: int = 3) -> list[WeeklyDistrictWeather]:
    """Assign station weather to every district for every week.

    In "district" mode a district's values are the mean over its own
    stations; districts without stations receive the mean of the k
    stations nearest to their centroid (ties at the k-th distance are
    all included). In "state" mode every district inherits its federal
    state's station mean, which requires state ids on the graph. Either
    way the output covers every (district, week) pair.
    """
    if mode not in ("district", "state"):
        raise ValidationError(f"unknown fusion mode {mode!r}")
    for sid in sorted({s.station_id for s in weekly}):
        if sid not in lookup:
            raise ValidationError(f"station {sid!r} missing from the district lookup")
        if sid not in locations:
            raise ValidationError(f"station {sid!r} has no location")
        if lookup[sid] not in graph.index:
            raise ValidationError(f"station {sid!r} maps to unknown district {lookup[sid]!r}")
    if mode == "state" and graph.state_ids is None:
        raise ValidationError("state fusion mode needs state_id in the district attributes")

    by_week: dict[tuple[int, int], dict[str, WeeklyStationSummary]] = {}
    for s in weekly:
        by_week.setdefault((s.iso_year, s.iso_week), {})[s.station_id] = s

    out = []
    for (year, week) in sorted(by_week):
        stations = by_week[(year, week)]
        if mode == "district":
            per_district: dict[str, list[WeeklyStationSummary]] = {}
            for sid, summary in stations.items():
                per_district.setdefault(lookup[sid], []).append(summary)
            for d in graph.district_ids:
                if d in per_district:
                    chosen, source = per_district[d], "stations"
                else:
                    centroid = graph.centroid_km[graph.index[d]]
                    ids = _knn_station_ids(centroid, locations, list(stations), k)
                    chosen, source = [stations[s] for s in ids], "knn"
                daily, n_days, partial = _mean_of_stations(chosen)
                out.append(_make_district_row(d, year, week, daily, n_days, partial,
                                              source, len(chosen)))
        else:
            state_of = {d: graph.state_ids[i] for i, d in enumerate(graph.district_ids)}
            per_state: dict[str, list[WeeklyStationSummary]] = {}
            for sid, summary in stations.items():
                per_state.setdefault(state_of[lookup[sid]], []).append(summary)
            for d in graph.district_ids:
                state = state_of[d]
                if state not in per_state:
                    raise ValidationError(
                        f"state {state!r} has no stations in week {year}-W{week:02d}")
                daily, n_days, partial = _mean_of_stations(per_state[state])
                out.append(_make_district_row(d, year, week, daily, n_days, partial,
                                              "state", len(per_state[state])))
    return out


def _make_district_row(district, year, week, daily, n_days, partial, source, n_stations):
    return WeeklyDistrictWeather(
        district_id=district, iso_year=year, iso_week=week,
        temp_min_weekly_mean_c=float(np.mean(daily["temp_min_c"])),
        temp_max_weekly_mean_c=float(np.mean(daily["temp_max_c"])),
        humidity_weekly_mean_pct=float(np.mean(daily["humidity_mean_pct"])),
        daily=daily, n_days=n_days, partial=partial,
        source=source, n_source_stations=n_stations)


def write_weekly_weather_csv(path, rows: list[WeeklyDistrictWeather],
                             header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["district_id", "iso_year", "iso_week",
                         "temp_min_weekly_mean_c", "temp_max_weekly_mean_c",
                         "humidity_weekly_mean_pct", "n_days", "partial",
                         "source", "n_source_stations"])
        for r in sorted(rows, key=lambda r: (r.district_id, r.iso_year, r.iso_week)):
            writer.writerow([r.district_id, r.iso_year, r.iso_week,
                             repr(r.temp_min_weekly_mean_c), repr(r.temp_max_weekly_mean_c),
                             repr(r.humidity_weekly_mean_pct), r.n_days, int(r.partial),
                             r.source, r.n_source_stations])
