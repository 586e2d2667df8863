"""County tables: census metrics, JHU case/death series, rates and panels."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

# canonical column for each DSL metric symbol
METRIC_COLUMNS: dict[str, str] = {
    "Den": "den", "NW": "nw", "Inc": "inc", "Pov": "pov", "Uemp": "uemp",
    "Uins": "uins", "Emp": "emp", "Lab": "lab", "Tran": "tran", "MC": "mc",
    "SC": "sc", "GI": "gi", "Com": "com",
}
FRACTION_FIELDS = ("nw", "pov", "uemp", "uins", "emp", "lab", "tran", "sc", "gi")
CENSUS_FIELDS = (
    "fips", "state", "population", "den", "nw", "inc", "pov", "uemp",
    "uins", "emp", "lab", "tran", "mc", "sc", "gi",
)
DEFAULT_SCHEMA: dict[str, str] = {f: f for f in CENSUS_FIELDS}
DEFAULT_PANEL_COVARIATES = ("den", "uemp", "inc", "nw")


class SchemaError(ValueError):
    """A required column is absent from an input file."""

    def __init__(self, column: str, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"missing column {column!r}{where}")
        self.column = column


class FormatError(ValueError):
    pass


class PanelError(ValueError):
    pass


def normalize_fips(raw) -> str | None:
    """Five-digit zero-padded county code, or None if unusable."""
    if raw is None:
        return None
    text = str(raw).strip()
    if not text or text.lower() == "nan":
        return None
    try:
        code = int(float(text))
    except ValueError:
        return None
    if code <= 0:
        return None
    return f"{code:05d}"


# ---------------------------------------------------------------- regions, phases

@dataclass(frozen=True)
class RegionSpec:
    label: str
    states: frozenset[str]

    def __post_init__(self):
        if not self.states:
            raise ValueError(f"region {self.label!r} has no states")
        object.__setattr__(self, "states", frozenset(self.states))


REGIONS: dict[str, RegionSpec] = {
    "east": RegionSpec("East Coast", frozenset({
        "District of Columbia", "New Jersey", "Rhode Island", "Massachusetts",
        "Connecticut", "Maryland", "Delaware", "New York",
    })),
    "south": RegionSpec("Southern States", frozenset({
        "Alabama", "Arkansas", "Florida", "Georgia", "Kentucky", "Louisiana",
        "Mississippi", "North Carolina", "Oklahoma", "South Carolina",
        "Tennessee", "Texas", "Virginia", "West Virginia",
    })),
    "west": RegionSpec("West Coast", frozenset({"California", "Oregon", "Washington"})),
}


@dataclass(frozen=True)
class PhaseWindow:
    start: dt.date
    end: dt.date
    label: str = ""

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("phase start must precede its end")


PHASES: dict[str, PhaseWindow] = {
    "I": PhaseWindow(dt.date(2020, 2, 1), dt.date(2020, 7, 15), "Phase I"),
    "II": PhaseWindow(dt.date(2020, 7, 16), dt.date(2021, 1, 15), "Phase II"),
}


def resolve_region(spec: str | Sequence[str]) -> RegionSpec:
    """Built-in key (``east``/``south``/``west``) or an explicit state list."""
    if isinstance(spec, str):
        key = spec.strip().lower()
        for k, region in REGIONS.items():
            if key in (k, region.label.lower()):
                return region
        raise ValueError(f"unknown region {spec!r}; use one of {sorted(REGIONS)} or a state list")
    return RegionSpec("custom", frozenset(spec))


def resolve_phase(spec) -> PhaseWindow:
    if isinstance(spec, PhaseWindow):
        return spec
    if isinstance(spec, str):
        key = spec.strip().upper().replace("PHASE", "").strip()
        if key in PHASES:
            return PHASES[key]
        raise ValueError(f"unknown phase {spec!r}; use I, II or explicit dates")
    start, end = spec
    return PhaseWindow(dt.date.fromisoformat(str(start)), dt.date.fromisoformat(str(end)), f"{start}..{end}")


# ---------------------------------------------------------------- census

@dataclass
class IngestResult:
    table: pd.DataFrame
    rejects: list[dict] = field(default_factory=list)


def _check_record(rec: dict) -> str | None:
    for f in FRACTION_FIELDS:
        if not 0.0 <= rec[f] <= 1.0:
            return f"fraction out of range: {f}={rec[f]}"
    if rec["population"] < 1:
        return "population must be >= 1"
    if rec["den"] <= 0:
        return "density must be positive"
    if rec["mc"] < 0:
        return "mean commute must be >= 0"
    if rec["inc"] < 0:
        return "income must be >= 0"
    if "com" in rec and not (isinstance(rec["com"], float) and math.isnan(rec["com"])):
        if not 0.0 <= rec["com"] <= 1.0:
            return f"fraction out of range: com={rec['com']}"
    return None


def load_census(path, schema: Mapping[str, str] | None = None) -> IngestResult:
    """Validated county metrics plus a report of rejected rows.

    ``schema`` maps each canonical field to a column of the file; a ``com``
    entry is optional. Line numbers in the rejects report count the header
    as line 1.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    for f in CENSUS_FIELDS:
        if f not in schema:
            raise SchemaError(f)
    fields = list(CENSUS_FIELDS) + (["com"] if "com" in schema else [])

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for f in fields:
            if schema[f] not in header:
                raise SchemaError(schema[f], path)
        records, rejects, seen = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            fips = normalize_fips(row[schema["fips"]])
            if fips is None:
                rejects.append({"line": lineno, "fips": row[schema["fips"]], "reason": "invalid fips"})
                continue
            rec = {"fips": fips, "state": row[schema["state"]].strip()}
            reason = None
            for f in fields[2:]:
                raw = (row[schema[f]] or "").strip()
                if raw == "":
                    reason = f"missing value: {f}"
                    break
                try:
                    rec[f] = float(raw)
                except ValueError:
                    reason = f"unparseable numeric: {f}={raw!r}"
                    break
            if reason is None:
                reason = _check_record(rec)
            if reason is None and fips in seen:
                reason = "duplicate fips"
            if reason is not None:
                rejects.append({"line": lineno, "fips": fips, "reason": reason})
                continue
            seen.add(fips)
            records.append(rec)
    table = pd.DataFrame.from_records(records, columns=fields)
    table["population"] = table["population"].astype(float)
    if rejects:
        log.warning("%d census rows rejected", len(rejects))
    return IngestResult(table, rejects)


def merge_comorbidity(records: pd.DataFrame, path, fips_column: str = "fips",
                      value_column: str = "com") -> IngestResult:
    """Left-join the comorbidity fraction; unmatched counties get ``com_missing``."""
    raw = pd.read_csv(path, dtype={fips_column: str})
    for col in (fips_column, value_column):
        if col not in raw.columns:
            raise SchemaError(col, path)
    rejects = []
    values = {}
    for lineno, (f, v) in enumerate(zip(raw[fips_column], raw[value_column]), start=2):
        fips = normalize_fips(f)
        try:
            v = float(v)
        except (TypeError, ValueError):
            v = float("nan")
        if fips is None or not (0.0 <= v <= 1.0):
            rejects.append({"line": lineno, "fips": str(f), "reason": "invalid comorbidity row"})
            continue
        values[fips] = v
    out = records.copy()
    out["com"] = out["fips"].map(values).astype(float)
    out["com_missing"] = out["com"].isna()
    return IngestResult(out, rejects)


def analysis_table(records: pd.DataFrame, exclude_missing_comorbidity: bool = True) -> pd.DataFrame:
    if exclude_missing_comorbidity and "com_missing" in records:
        return records[~records["com_missing"]].reset_index(drop=True)
    return records


def filter_region(records: pd.DataFrame, region: RegionSpec) -> pd.DataFrame:
    out = records[records["state"].isin(region.states)].reset_index(drop=True)
    if out.empty:
        warnings.warn(f"no counties found for region {region.label!r}", stacklevel=2)
    return out


# ---------------------------------------------------------------- JHU series

@dataclass
class PrevalenceSeries:
    fips: str
    dates: list[dt.date]
    cum_confirmed: np.ndarray
    cum_deaths: np.ndarray | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("dates must be strictly increasing")
        if len(self.cum_confirmed) != len(self.dates):
            raise ValueError("series length does not match dates")
        if self.cum_deaths is not None and len(self.cum_deaths) != len(self.dates):
            raise ValueError("deaths length does not match dates")

    def counts(self, endpoint: str) -> np.ndarray:
        if endpoint == "confirmed":
            return self.cum_confirmed
        if endpoint == "deaths":
            if self.cum_deaths is None:
                raise ValueError(f"no death series for county {self.fips}")
            return self.cum_deaths
        raise ValueError(f"unknown endpoint {endpoint!r}")


def _parse_jhu_date(text: str) -> dt.date | None:
    try:
        return dt.datetime.strptime(text.strip(), "%m/%d/%y").date()
    except ValueError:
        return None


def clamp_cumulative(values: Iterable[float]) -> tuple[np.ndarray, int]:
    """Forward clamp ``cum[t] = max(cum[t], cum[t-1])``; returns (series, repairs)."""
    arr = np.asarray(list(values), dtype=float)
    fixed = np.maximum.accumulate(arr) if arr.size else arr
    return fixed, int((fixed != arr).sum())


@dataclass
class JhuTable:
    series: dict[str, PrevalenceSeries]
    dates: list[dt.date]
    repairs: dict[str, int] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)

    @property
    def total_repairs(self) -> int:
        return sum(self.repairs.values())


def _read_jhu_wide(path, fips_column="FIPS"):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path} is empty")
        if fips_column not in header:
            raise SchemaError(fips_column, path)
        date_cols = [(i, d) for i, h in enumerate(header) if (d := _parse_jhu_date(h)) is not None]
        if not date_cols:
            raise FormatError(f"{path} has no date columns (expected M/D/YY headers)")
        fcol = header.index(fips_column)
        rows, skipped = {}, []
        for lineno, row in enumerate(reader, start=2):
            fips = normalize_fips(row[fcol] if fcol < len(row) else None)
            if fips is None:
                skipped.append(lineno)
                continue
            vals = []
            for i, _ in date_cols:
                cell = row[i].strip() if i < len(row) else ""
                vals.append(float(cell) if cell else 0.0)
            rows[fips] = vals
    if skipped:
        warnings.warn(f"{len(skipped)} row(s) without a usable FIPS skipped in {path}", stacklevel=3)
    return [d for _, d in date_cols], rows, skipped


def load_jhu(confirmed_path, deaths_path=None, fips_column: str = "FIPS") -> JhuTable:
    """Per-county cumulative series from JHU wide-format CSVs.

    Dips in cumulative counts are repaired by forward clamping; the number
    of repaired entries per county is kept in ``repairs``.
    """
    dates, conf, skipped = _read_jhu_wide(confirmed_path, fips_column)
    deaths = None
    if deaths_path is not None:
        ddates, deaths, dskipped = _read_jhu_wide(deaths_path, fips_column)
        if ddates != dates:
            raise FormatError("confirmed and deaths files have different date columns")
        skipped += dskipped
    order = sorted(range(len(dates)), key=lambda i: dates[i])
    dates = [dates[i] for i in order]
    series, repairs = {}, {}
    for fips, vals in conf.items():
        c, nc = clamp_cumulative(vals[i] for i in order)
        dser = None
        nd = 0
        if deaths is not None:
            if fips not in deaths:
                warnings.warn(f"county {fips} has no death series; skipped", stacklevel=2)
                continue
            dser, nd = clamp_cumulative(deaths[fips][i] for i in order)
        series[fips] = PrevalenceSeries(fips, dates, c, dser)
        if nc + nd:
            repairs[fips] = nc + nd
    if repairs:
        log.info("repaired %d non-monotone entries in %d counties", sum(repairs.values()), len(repairs))
    return JhuTable(series, dates, repairs, skipped)


def write_jhu(table: JhuTable, path, endpoint: str = "confirmed") -> None:
    """Write one endpoint back out in JHU wide format."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["FIPS"] + [f"{d.month}/{d.day}/{d.strftime('%y')}" for d in table.dates])
        for fips in sorted(table.series):
            vals = table.series[fips].counts(endpoint)
            w.writerow([fips] + [f"{v:.0f}" if float(v).is_integer() else repr(float(v)) for v in vals])


# ---------------------------------------------------------------- rates and panels

def _value_on_or_before(series: PrevalenceSeries, counts: np.ndarray, day: dt.date) -> float:
    """Cumulative count at the latest date <= ``day``; zero before the series starts."""
    idx = np.searchsorted(np.array(series.dates, dtype="datetime64[D]"), np.datetime64(day), side="right") - 1
    return 0.0 if idx < 0 else float(counts[idx])


def compute_rate(series: PrevalenceSeries, population: float, window: PhaseWindow,
                 endpoint: str = "confirmed") -> float:
    """New cases (or deaths) in the window per 100,000 residents."""
    if population <= 0:
        raise ValueError("population must be positive")
    if window.end < series.dates[0] or window.start > series.dates[-1]:
        raise ValueError("window lies outside the series date range")
    counts = series.counts(endpoint)
    before = _value_on_or_before(series, counts, window.start - dt.timedelta(days=1))
    at_end = _value_on_or_before(series, counts, window.end)
    return (at_end - before) * 1e5 / population


def rate_table(records: pd.DataFrame, jhu: JhuTable, window: PhaseWindow,
               endpoint: str = "confirmed") -> pd.DataFrame:
    """Records joined with their rate for the window; counties without series dropped."""
    rates = []
    for fips, pop in zip(records["fips"], records["population"]):
        s = jhu.series.get(fips)
        rates.append(np.nan if s is None else compute_rate(s, pop, window, endpoint))
    out = records.copy()
    out["rate"] = rates
    missing = int(out["rate"].isna().sum())
    if missing:
        warnings.warn(f"{missing} counties have no prevalence series and were dropped", stacklevel=2)
    return out.dropna(subset=["rate"]).reset_index(drop=True)


def build_panel(jhu: JhuTable, census: pd.DataFrame, region: RegionSpec, phase: PhaseWindow,
                covariates: Sequence[str] = DEFAULT_PANEL_COVARIATES,
                endpoint: str = "confirmed") -> pd.DataFrame:
    """Balanced weekly county panel with a log response and z-scored covariates.

    Week ``k`` covers days ``start + 7k .. start + 7k + 6``; only full weeks
    inside the phase are used. ``y = log10(weekly per-100k + 1)``.
    """
    covariates = [METRIC_COLUMNS.get(c, c) for c in covariates]
    for c in covariates:
        if c not in METRIC_COLUMNS.values():
            raise ValueError(f"{c!r} is not a metric")
        if c not in census.columns:
            raise SchemaError(c)
    n_weeks = ((phase.end - phase.start).days + 1) // 7
    if n_weeks < 1:
        raise PanelError("phase is shorter than one week")
    week_ends = [phase.start + dt.timedelta(days=7 * k + 6) for k in range(n_weeks)]

    regional = filter_region(census, region)
    rows, clamped = [], 0
    for rec in regional.itertuples(index=False):
        s = jhu.series.get(rec.fips)
        if s is None or s.dates[0] > phase.start - dt.timedelta(days=1) or s.dates[-1] < week_ends[-1]:
            continue
        counts = s.counts(endpoint)
        cum = [_value_on_or_before(s, counts, phase.start - dt.timedelta(days=1))]
        cum += [_value_on_or_before(s, counts, d) for d in week_ends]
        weekly = np.diff(cum)
        clamped += int((weekly < 0).sum())
        weekly = np.maximum(weekly, 0.0)
        y = np.log10(weekly / rec.population * 1e5 + 1.0)
        for k in range(n_weeks):
            rows.append([rec.fips, k, y[k]] + [getattr(rec, c) for c in covariates])
    if clamped:
        log.warning("%d negative weekly differences clamped to zero", clamped)
    panel = pd.DataFrame(rows, columns=["fips", "week", "y"] + covariates)
    if panel["fips"].nunique() < 2:
        raise PanelError("fewer than two counties remain after balancing the panel")
    for c in covariates:
        col = panel[c].to_numpy(dtype=float)
        sd = col.std()
        if sd == 0:
            raise PanelError(f"covariate {c!r} is constant across the panel")
        panel[c] = (col - col.mean()) / sd
    return panel


def write_report(path, **sections) -> None:
    with open(path, "w") as fh:
        json.dump(sections, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
