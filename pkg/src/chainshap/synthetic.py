"""Synthetic county fixtures in the same file formats as the real inputs."""
from __future__ import annotations

import csv
import datetime as dt
from pathlib import Path

import numpy as np

from .data import CENSUS_FIELDS, REGIONS

START = dt.date(2020, 1, 22)
END = dt.date(2021, 1, 20)


def _jhu_header(dates):
    return ["UID", "FIPS", "Admin2", "Province_State"] + [f"{d.month}/{d.day}/{d.strftime('%y')}" for d in dates]


def make_counties(n: int, seed: int = 0, region: str = "south") -> list[dict]:
    """County metric records with a mild correlation structure."""
    rng = np.random.default_rng(seed)
    states = sorted(REGIONS[region].states)
    latent = rng.normal(size=(n, 3))
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    recs = []
    for i in range(n):
        a, b, c = latent[i]
        recs.append({
            "fips": f"{(i % 50 + 1) * 1000 + i // 50 + 1:05d}",
            "state": states[i % len(states)],
            "population": int(rng.integers(5_000, 500_000)),
            "den": round(float(np.exp(3.0 + 1.2 * a + 0.3 * rng.normal())), 4),
            "nw": round(float(sig(-0.8 + 0.9 * b)), 5),
            "inc": round(float(30_000 * np.exp(0.25 * c - 0.1 * b)), 2),
            "pov": round(float(sig(-1.8 + 0.5 * b - 0.5 * c)), 5),
            "uemp": round(float(sig(-3.0 + 0.4 * b - 0.2 * c)), 5),
            "uins": round(float(sig(-2.2 + 0.3 * b - 0.3 * c)), 5),
            "emp": round(float(sig(0.0 + 0.4 * c - 0.2 * b)), 5),
            "lab": round(float(sig(-0.9 - 0.3 * c + 0.2 * rng.normal())), 5),
            "tran": round(float(sig(-2.5 + 0.6 * a + 0.2 * rng.normal())), 5),
            "mc": round(float(22 + 4 * a + 2 * rng.normal()), 3),
            "sc": round(float(sig(-1.5 - 0.3 * a + 0.2 * rng.normal())), 5),
            "gi": round(float(sig(-0.2 + 0.2 * c + 0.1 * rng.normal())), 5),
            "com": round(float(sig(-0.5 + 0.3 * b + 0.1 * rng.normal())), 5),
        })
    return recs


def write_fixture_trio(directory, n: int = 40, seed: int = 0, region: str = "south",
                       drop_comorbidity: int = 1, noiseless: bool = False) -> dict[str, Path]:
    """Census, JHU confirmed/deaths and comorbidity CSVs for ``n`` counties.

    Weekly case growth depends on density and non-white fraction so that the
    fitted models have signal to explain. With ``noiseless`` the daily counts
    are their expected values, making each county's rate an exact function
    of its metrics.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed + 1)
    recs = make_counties(n, seed, region)
    dates = [START + dt.timedelta(days=k) for k in range((END - START).days + 1)]

    paths = {
        "census": directory / "census.csv",
        "jhu_confirmed": directory / "jhu_confirmed.csv",
        "jhu_deaths": directory / "jhu_deaths.csv",
        "comorbidity": directory / "comorbidity.csv",
    }
    with open(paths["census"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CENSUS_FIELDS)
        for r in recs:
            w.writerow([r[f] for f in CENSUS_FIELDS])
    with open(paths["comorbidity"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fips", "com"])
        for r in recs[: len(recs) - drop_comorbidity]:
            w.writerow([r["fips"], r["com"]])

    t = np.arange(len(dates))
    conf_rows, death_rows = [], []
    for i, r in enumerate(recs):
        z_den = (np.log(r["den"]) - 3.0) / 1.2
        intensity = 2e-5 * np.exp(0.4 * z_den + 1.5 * (r["nw"] - 0.3))
        expected = r["population"] * intensity * (1 + np.sin(t / 40.0) ** 2)
        if noiseless:
            cum = np.round(np.cumsum(expected), 6)
            deaths = np.round(cum * 0.015, 6)
        else:
            daily = rng.poisson(expected)
            cum = np.cumsum(daily)
            deaths = np.cumsum(rng.binomial(daily, 0.015))
        conf_rows.append([84000000 + i, r["fips"], f"County {i}", r["state"], *cum.tolist()])
        death_rows.append([84000000 + i, r["fips"], f"County {i}", r["state"], *deaths.tolist()])
    # one data correction dip and one row without FIPS, as in the real files
    if not noiseless:
        conf_rows[0][4 + 30] = max(0, conf_rows[0][4 + 29] - 3)
    conf_rows.append([84099999, "", "Unassigned", recs[0]["state"]] + [0] * len(dates))
    death_rows.append([84099999, "", "Unassigned", recs[0]["state"]] + [0] * len(dates))
    for key, rows in (("jhu_confirmed", conf_rows), ("jhu_deaths", death_rows)):
        with open(paths[key], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_jhu_header(dates))
            w.writerows(rows)
    return paths
