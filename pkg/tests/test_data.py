import datetime as dt
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from chainshap.data import (
    CENSUS_FIELDS, PHASES, REGIONS, FormatError, PanelError, PhaseWindow, PrevalenceSeries, RegionSpec,
    SchemaError, build_panel, clamp_cumulative, compute_rate, filter_region, load_census, load_jhu,
    merge_comorbidity, normalize_fips, resolve_phase, resolve_region, write_jhu,
)

HEADER = ",".join(CENSUS_FIELDS)
# fips,state,population,den,nw,inc,pov,uemp,uins,emp,lab,tran,mc,sc,gi
ROWS = [
    "1001,Alabama,55000,36.1,0.25,58000,0.15,0.04,0.09,0.55,0.41,0.01,26.2,0.16,0.45",
    "01003,Alabama,220000,51.2,0,61000,0,0.03,0.1,0.58,0.38,0.002,27.5,0.21,0",
    "48201,Texas,4700000,1100.5,0.7,64000,0.16,0.05,0.22,0.6,0.45,0.03,30.1,0.1,0.49",
]


def write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_three_row_fixture_round_trip(tmp_path):
    res = load_census(write(tmp_path / "c.csv", [HEADER, *ROWS]))
    assert res.rejects == []
    t = res.table
    assert list(t["fips"]) == ["01001", "01003", "48201"]
    assert list(t["state"]) == ["Alabama", "Alabama", "Texas"]
    assert t.loc[2, "population"] == 4_700_000
    assert t.loc[0, "den"] == 36.1 and t.loc[2, "mc"] == 30.1
    # second row is the all-zero-fraction boundary case
    assert t.loc[1, ["nw", "pov", "gi"]].tolist() == [0.0, 0.0, 0.0]


def test_fraction_out_of_range_rejected(tmp_path):
    bad = ROWS[0].replace(",0.15,", ",1.2,", 1)
    res = load_census(write(tmp_path / "c.csv", [HEADER, bad, ROWS[2]]))
    assert len(res.table) == 1
    assert res.rejects[0]["line"] == 2
    assert "fraction out of range" in res.rejects[0]["reason"]
    assert "pov" in res.rejects[0]["reason"]


def test_unparseable_numeric_has_line(tmp_path):
    bad = ROWS[2].replace("1100.5", "dense")
    res = load_census(write(tmp_path / "c.csv", [HEADER, ROWS[0], bad]))
    assert res.rejects == [{"line": 3, "fips": "48201", "reason": "unparseable numeric: den='dense'"}]


def test_duplicate_and_missing_values(tmp_path):
    res = load_census(write(tmp_path / "c.csv", [HEADER, ROWS[0], ROWS[0], ROWS[1].replace(",27.5", ",")]))
    reasons = [r["reason"] for r in res.rejects]
    assert reasons == ["duplicate fips", "missing value: mc"]
    assert len(res.table) == 1


def test_missing_column_named(tmp_path):
    header = HEADER.replace(",uins", ",uninsured")
    with pytest.raises(SchemaError, match="uins"):
        load_census(write(tmp_path / "c.csv", [header, *ROWS]))


def test_custom_schema(tmp_path):
    header = HEADER.replace("den", "density_km2")
    schema = {f: f for f in CENSUS_FIELDS}
    schema["den"] = "density_km2"
    res = load_census(write(tmp_path / "c.csv", [header, *ROWS]), schema)
    assert res.table.loc[0, "den"] == 36.1


def test_fips_normalisation():
    assert normalize_fips("1001") == "01001"
    assert normalize_fips(1001.0) == "01001"
    assert normalize_fips("") is None and normalize_fips("nan") is None and normalize_fips("abc") is None


# ---- comorbidity

def test_merge_comorbidity_fixture(tmp_path):
    census = load_census(write(tmp_path / "c.csv", [HEADER, *ROWS])).table
    com = write(tmp_path / "com.csv", ["fips,com", "1001,0.31", "48201,0.27"])
    res = merge_comorbidity(census, com)
    t = res.table
    assert t["com_missing"].tolist() == [False, True, False]
    assert t.loc[0, "com"] == 0.31 and math.isnan(t.loc[1, "com"])


# ---- JHU

def jhu_lines(rows, dates=("1/22/20", "1/23/20", "1/24/20", "1/25/20")):
    return ["UID,FIPS,Admin2," + ",".join(dates)] + rows


def test_clamp_rule():
    s, n = clamp_cumulative([0, 5, 3, 7])
    assert s.tolist() == [0, 5, 5, 7] and n == 1
    s, n = clamp_cumulative([0, 0, 0])
    assert s.tolist() == [0, 0, 0] and n == 0


def test_two_county_fixture(tmp_path):
    p = write(tmp_path / "j.csv", jhu_lines(["1,1001.0,Autauga,0,2,2,9", "2,48201,Harris,10,40,35,80"]))
    t = load_jhu(p)
    assert sorted(t.series) == ["01001", "48201"]
    assert t.series["01001"].cum_confirmed.tolist() == [0, 2, 2, 9]
    assert t.series["48201"].cum_confirmed.tolist() == [10, 40, 40, 80]
    assert t.repairs == {"48201": 1}
    assert t.dates[0] == dt.date(2020, 1, 22)


def test_missing_fips_skipped_with_warning(tmp_path):
    p = write(tmp_path / "j.csv", jhu_lines(["1,1001,A,0,1,2,3", "2,,Unassigned,0,0,0,0"]))
    with pytest.warns(UserWarning, match="FIPS"):
        t = load_jhu(p)
    assert t.skipped == [3]


def test_no_date_columns(tmp_path):
    p = write(tmp_path / "j.csv", ["UID,FIPS,Admin2", "1,1001,A"])
    with pytest.raises(FormatError):
        load_jhu(p)


def test_cleaning_idempotent(tmp_path):
    p = write(tmp_path / "j.csv", jhu_lines(["1,1001,A,0,5,3,7", "2,1003,B,4,2,1,9"]))
    first = load_jhu(p)
    assert first.total_repairs == 3
    write_jhu(first, tmp_path / "clean.csv")
    again = load_jhu(tmp_path / "clean.csv")
    assert again.total_repairs == 0
    for f in first.series:
        np.testing.assert_array_equal(first.series[f].cum_confirmed, again.series[f].cum_confirmed)


# ---- rates

def series(values, start=dt.date(2020, 1, 1)):
    dates = [start + dt.timedelta(days=i) for i in range(len(values))]
    return PrevalenceSeries("01001", dates, np.asarray(values, float), np.asarray(values, float) / 10)


def test_rate_hand_arithmetic():
    s = series([100, 100, 150, 350, 350])
    w = PhaseWindow(dt.date(2020, 1, 2), dt.date(2020, 1, 4))
    assert compute_rate(s, 50_000, w) == 500.0
    assert compute_rate(s, 50_000, w, "deaths") == 50.0


def test_rate_simple_cases():
    s = series([0, 0, 500])
    w = PhaseWindow(dt.date(2020, 1, 1), dt.date(2020, 1, 3))
    assert compute_rate(s, 100_000, w) == 500.0
    assert compute_rate(series([7, 7, 7]), 1000, PhaseWindow(dt.date(2020, 1, 2), dt.date(2020, 1, 3))) == 0.0
    # a window opening on the first reported day counts everything reported
    assert compute_rate(series([7, 7, 7]), 1000, w) == 700.0


def test_rate_nearest_prior_date():
    s = series([0, 10, 20, 30])
    w = PhaseWindow(dt.date(2020, 1, 2), dt.date(2020, 3, 1))
    assert compute_rate(s, 1e5, w) == 30.0


def test_rate_bad_population():
    with pytest.raises(ValueError):
        compute_rate(series([0, 1]), 0, PhaseWindow(dt.date(2020, 1, 1), dt.date(2020, 1, 2)))


@settings(max_examples=100)
@given(st.lists(st.integers(0, 50), min_size=6, max_size=40), st.data())
def test_rate_additive(increments, data):
    s = series(np.cumsum(increments))
    n = len(increments)
    a = data.draw(st.integers(0, n - 4))
    b = data.draw(st.integers(a + 1, n - 3))
    c = data.draw(st.integers(b + 2, n - 1))
    day = lambda k: s.dates[k]
    w1, w2 = PhaseWindow(day(a), day(b)), PhaseWindow(day(b + 1), day(c))
    whole = PhaseWindow(day(a), day(c))
    assert compute_rate(s, 1234.0, whole) == pytest.approx(compute_rate(s, 1234.0, w1) + compute_rate(s, 1234.0, w2),
                                                           rel=1e-12, abs=1e-9)


# ---- regions and phases

def test_builtin_regions():
    assert len(REGIONS["east"].states) == 8
    assert len(REGIONS["south"].states) == 14
    assert REGIONS["west"].states == {"California", "Oregon", "Washington"}
    keys = list(REGIONS)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            assert not REGIONS[a].states & REGIONS[b].states


def test_empty_region_rejected():
    with pytest.raises(ValueError):
        RegionSpec("nothing", frozenset())


def test_filter_region():
    t = pd.DataFrame({"fips": ["1", "2", "3"], "state": ["California", "Texas", "Oregon"]})
    assert filter_region(t, REGIONS["west"])["state"].tolist() == ["California", "Oregon"]
    with pytest.warns(UserWarning):
        assert filter_region(t, REGIONS["east"]).empty


def test_phase_dates_and_resolution():
    assert PHASES["I"].start == dt.date(2020, 2, 1) and PHASES["I"].end == dt.date(2020, 7, 15)
    assert PHASES["II"].start == dt.date(2020, 7, 16) and PHASES["II"].end == dt.date(2021, 1, 15)
    assert resolve_phase("phase II") is PHASES["II"]
    assert resolve_phase(("2020-03-01", "2020-04-01")).end == dt.date(2020, 4, 1)
    assert resolve_region(["Texas"]).states == {"Texas"}
    with pytest.raises(ValueError):
        PhaseWindow(dt.date(2020, 5, 1), dt.date(2020, 5, 1))


# ---- panel

def panel_fixture():
    """Three counties, daily series over 4 weeks plus one lead-in day."""
    start = dt.date(2020, 3, 1)
    dates = [start - dt.timedelta(days=1) + dt.timedelta(days=i) for i in range(29)]
    weekly = {"00001": [0, 99, 9, 999], "00002": [4, 0, 16, 2], "00003": [10, 10, 10, 10]}
    pops = {"00001": 100_000, "00002": 50_000, "00003": 10_000}
    series = {}
    for fips, w in weekly.items():
        cum = np.full(29, 17.0)  # 17 cases reported before the phase
        for k, n in enumerate(w):
            cum[1 + 7 * k + 6:] += n  # all of week k's cases land on its last day
        s = PrevalenceSeries(fips, dates, cum)
        series[fips] = s
    from chainshap.data import JhuTable

    jhu = JhuTable(series, dates)
    census = pd.DataFrame({
        "fips": list(weekly), "state": ["Texas"] * 3, "population": [pops[f] for f in weekly],
        "den": [10.0, 20.0, 60.0], "uemp": [0.1, 0.2, 0.3], "inc": [1.0, 2.0, 4.0], "nw": [0.5, 0.2, 0.2],
    })
    return jhu, census, PhaseWindow(start, start + dt.timedelta(days=27)), pops, weekly


def test_panel_hand_computed():
    jhu, census, phase, pops, weekly = panel_fixture()
    p = build_panel(jhu, census, REGIONS["south"], phase)
    assert p.groupby("fips")["week"].apply(list).tolist() == [[0, 1, 2, 3]] * 3
    y1 = p[p.fips == "00001"]["y"].to_numpy()
    # 0 -> 0; 99 per 100k -> 2; 9 -> 1; 999 -> 3
    np.testing.assert_allclose(y1, [0.0, 2.0, 1.0, 3.0], atol=1e-12)
    y2 = p[p.fips == "00002"]["y"].to_numpy()
    np.testing.assert_allclose(y2, np.log10(np.array([4, 0, 16, 2]) / 50_000 * 1e5 + 1), atol=1e-12)
    # den z-score over the 12 panel rows: values 10, 20, 60 each repeated 4 times
    mean, sd = 30.0, math.sqrt(((10 - 30) ** 2 + (20 - 30) ** 2 + (60 - 30) ** 2) / 3)
    np.testing.assert_allclose(p[p.fips == "00003"]["den"], (60 - mean) / sd, atol=1e-12)
    for c in ("den", "uemp", "inc", "nw"):
        assert abs(p[c].mean()) < 1e-9 and abs(p[c].std(ddof=0) - 1) < 1e-9
        assert abs(p[c].sum()) < 1e-9


def test_panel_drops_short_series_and_clamps():
    jhu, census, phase, *_ = panel_fixture()
    s = jhu.series["00003"]
    jhu.series["00003"] = PrevalenceSeries("00003", s.dates[:20], s.cum_confirmed[:20])
    p = build_panel(jhu, census, REGIONS["south"], phase)
    assert sorted(p.fips.unique()) == ["00001", "00002"]


def test_panel_needs_two_counties():
    jhu, census, phase, *_ = panel_fixture()
    with pytest.raises(PanelError):
        build_panel(jhu, census.iloc[:1], REGIONS["south"], phase)
