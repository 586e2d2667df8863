"""Random-effects panel regression and residual diagnostics."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

ALPHA = 0.05

TABLE_LABELS = {"den": "Density", "uemp": "Unemployment", "inc": "Income", "nw": "Non-White"}


class RankError(ValueError):
    def __init__(self, columns: Sequence[str]):
        super().__init__("design matrix is rank deficient; collinear columns: " + ", ".join(columns))
        self.columns = list(columns)


def _collinear_columns(X: np.ndarray, tol: float = 1e-10) -> list[int]:
    """Columns that are linear combinations of earlier ones."""
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        return []
    rank = int((diag > tol * diag[0]).sum())
    return sorted(int(p) for p in piv[rank:])


def _ols(X, y):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta, y - X @ beta


@dataclass
class REFit:
    names: list[str]
    coefficients: np.ndarray
    se_clustered: np.ndarray
    p_values: np.ndarray
    theta: float
    sigma2_u: float
    sigma2_e: float
    n_obs: int
    n_clusters: int
    n_periods: int
    # quasi-demeaned design, response and residuals, kept for SEs and DW
    X_star: np.ndarray = field(repr=False, default=None)
    y_star: np.ndarray = field(repr=False, default=None)
    resid_star: np.ndarray = field(repr=False, default=None)
    groups: np.ndarray = field(repr=False, default=None)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def marks(self) -> list[str]:
        return [significance_mark(p) for p in self.p_values]

    def to_dict(self) -> dict:
        return {
            "coefficients": {n: float(b) for n, b in zip(self.names, self.coefficients)},
            "se_clustered": {n: float(s) for n, s in zip(self.names, self.se_clustered)},
            "p_values": {n: float(p) for n, p in zip(self.names, self.p_values)},
            "theta": self.theta,
            "sigma2_u": self.sigma2_u,
            "sigma2_e": self.sigma2_e,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "n_periods": self.n_periods,
        }


def significance_mark(p: float) -> str:
    if p < 0.01:
        return "¹"
    if p < 0.05:
        return "²"
    return ""


def _panel_arrays(panel: pd.DataFrame, covariates, y, entity, time):
    panel = panel.sort_values([entity, time], kind="stable")
    counts = panel.groupby(entity, sort=False).size()
    if counts.nunique() != 1:
        raise ValueError("panel is not balanced")
    T = int(counts.iloc[0])
    G = int(counts.size)
    if G < 2:
        raise ValueError("need at least two clusters")
    if T < 2:
        raise ValueError("need at least two periods per cluster to identify variance components")
    Xv = panel[list(covariates)].to_numpy(dtype=float)
    yv = panel[y].to_numpy(dtype=float)
    groups = np.repeat(np.arange(G), T)
    return Xv.reshape(G, T, -1), yv.reshape(G, T), groups, T, G


def fit_random_effects(panel: pd.DataFrame, covariates: Sequence[str] | None = None, y: str = "y",
                       entity: str = "fips", time: str = "week") -> REFit:
    """Swamy-Arora random-effects GLS with county-clustered standard errors."""
    if covariates is None:
        covariates = [c for c in panel.columns if c not in (y, entity, time)]
    covariates = list(covariates)
    X3, Y2, groups, T, G = _panel_arrays(panel, covariates, y, entity, time)
    N = G * T
    K = len(covariates) + 1

    full = np.column_stack([np.ones(N), X3.reshape(N, -1)])
    bad = _collinear_columns(full)
    if bad:
        names = ["const"] + covariates
        raise RankError([names[j] for j in bad])

    # within: deviations from cluster means, time-varying regressors only
    Xw = (X3 - X3.mean(axis=1, keepdims=True)).reshape(N, -1)
    yw = (Y2 - Y2.mean(axis=1, keepdims=True)).reshape(N)
    varying = [j for j in range(Xw.shape[1]) if np.abs(Xw[:, j]).max() > 1e-12 * max(1.0, np.abs(X3[..., j]).max())]
    if varying:
        _, ew = _ols(Xw[:, varying], yw)
    else:
        ew = yw
    sigma2_e = float(ew @ ew) / (N - G - len(varying))

    # between: cluster means with intercept
    Xb = np.column_stack([np.ones(G), X3.mean(axis=1)])
    _, eb = _ols(Xb, Y2.mean(axis=1))
    if G - K <= 0:
        raise ValueError("too few clusters for the between regression")
    sigma2_b = float(eb @ eb) / (G - K)
    sigma2_u = sigma2_b - sigma2_e / T
    if sigma2_u < 0:
        warnings.warn("negative random-effect variance estimate clamped to 0 (pooled OLS)", stacklevel=2)
        sigma2_u = 0.0
    denom = sigma2_e + T * sigma2_u
    theta = 1.0 - math.sqrt(sigma2_e / denom) if denom > 0 else 0.0
    theta = min(max(theta, 0.0), 1.0)

    return _gls_fit(X3, Y2, groups, T, G, covariates, theta, sigma2_u, sigma2_e)


def _gls_fit(X3, Y2, groups, T, G, covariates, theta, sigma2_u, sigma2_e) -> REFit:
    N = G * T
    Xs = (X3 - theta * X3.mean(axis=1, keepdims=True)).reshape(N, -1)
    Xs = np.column_stack([np.full(N, 1.0 - theta), Xs])
    ys = (Y2 - theta * Y2.mean(axis=1, keepdims=True)).reshape(N)
    beta, resid = _ols(Xs, ys)
    fit = REFit(
        names=["const"] + list(covariates),
        coefficients=beta,
        se_clustered=np.zeros_like(beta),
        p_values=np.ones_like(beta),
        theta=float(theta),
        sigma2_u=float(sigma2_u),
        sigma2_e=float(sigma2_e),
        n_obs=N,
        n_clusters=G,
        n_periods=T,
        X_star=Xs,
        y_star=ys,
        resid_star=resid,
        groups=groups,
    )
    fit.se_clustered = clustered_se(fit)
    tstat = beta / fit.se_clustered
    fit.p_values = 2.0 * stats.t.sf(np.abs(tstat), df=G - 1)
    return fit


def pooled_ols(panel: pd.DataFrame, covariates: Sequence[str], y: str = "y",
               entity: str = "fips", time: str = "week") -> REFit:
    """Same estimator with ``theta = 0``."""
    X3, Y2, groups, T, G = _panel_arrays(panel, list(covariates), y, entity, time)
    return _gls_fit(X3, Y2, groups, T, G, list(covariates), 0.0, 0.0, float("nan"))


def clustered_se(fit: REFit) -> np.ndarray:
    """Cluster-robust sandwich SEs on the quasi-demeaned data.

    Uses the small-sample factor ``G/(G-1) * (N-1)/(N-K)``.
    """
    X, e, g = fit.X_star, fit.resid_star, fit.groups
    G = int(g.max()) + 1
    if G < 2:
        raise ValueError("clustered standard errors need at least two clusters")
    N, K = X.shape
    bread = np.linalg.inv(X.T @ X)
    scores = np.zeros((G, K))
    np.add.at(scores, g, X * e[:, None])
    meat = scores.T @ scores
    factor = G / (G - 1) * (N - 1) / (N - K)
    cov = factor * bread @ meat @ bread
    return np.sqrt(np.diag(cov))


def conventional_se(fit: REFit) -> np.ndarray:
    """Homoscedastic OLS SEs on the same (quasi-demeaned) data."""
    X, e = fit.X_star, fit.resid_star
    N, K = X.shape
    s2 = float(e @ e) / (N - K)
    return np.sqrt(np.diag(s2 * np.linalg.inv(X.T @ X)))


# ---------------------------------------------------------------- diagnostics

@dataclass
class DiagnosticResult:
    name: str
    statistic: float
    p_value: float | None
    df: int | None
    verdict: str

    def to_dict(self) -> dict:
        return {"name": self.name, "statistic": self.statistic, "p_value": self.p_value,
                "df": self.df, "verdict": self.verdict}


def _strip_constant(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and X.shape[1] > 1:
        X = X.T
    keep = [j for j in range(X.shape[1]) if np.ptp(X[:, j]) > 0]
    return X[:, keep]


def _lm_test(name, target, Z, n):
    """n * R^2 of ``target`` on ``[1, Z]`` with collinear terms dropped."""
    design = np.column_stack([np.ones(n), Z])
    bad = _collinear_columns(design)
    if bad:
        warnings.warn(f"{name}: dropped {len(bad)} collinear auxiliary term(s)", stacklevel=3)
        design = np.delete(design, bad, axis=1)
    df = design.shape[1] - 1
    if np.ptp(target) == 0 or df == 0:
        return 0.0, df
    _, resid = _ols(design, target)
    ss_tot = float(((target - target.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot
    return n * r2, df


def _verdict(p):
    return "reject homoscedasticity" if p < ALPHA else "fail to reject"


def white_test(residuals, X) -> DiagnosticResult:
    """LM test of e^2 on regressors, their squares and cross products."""
    e = np.asarray(residuals, dtype=float)
    Z = _strip_constant(X)
    n, k = Z.shape
    terms = [Z[:, i] for i in range(k)]
    terms += [Z[:, i] * Z[:, j] for i in range(k) for j in range(i, k)]
    lm, df = _lm_test("White test", e ** 2, np.column_stack(terms) if terms else np.zeros((n, 0)), n)
    p = float(stats.chi2.sf(lm, df)) if df else 1.0
    if lm == 0.0:
        p = 1.0
    return DiagnosticResult("White", float(lm), p, df, _verdict(p))


def breusch_pagan(residuals, X, studentized: bool = True) -> DiagnosticResult:
    """Breusch-Pagan test; Koenker's studentized n*R^2 form by default."""
    e = np.asarray(residuals, dtype=float)
    Z = _strip_constant(X)
    n = Z.shape[0]
    e2 = e ** 2
    if studentized:
        lm, df = _lm_test("Breusch-Pagan", e2, Z, n)
    else:
        sigma2 = e2.mean()
        if sigma2 == 0:
            lm, df = 0.0, Z.shape[1]
        else:
            g = e2 / sigma2
            design = np.column_stack([np.ones(n), Z])
            beta, _ = _ols(design, g)
            ess = float(((design @ beta - g.mean()) ** 2).sum())
            lm, df = ess / 2.0, design.shape[1] - 1
    p = float(stats.chi2.sf(lm, df)) if df else 1.0
    if lm == 0.0:
        p = 1.0
    return DiagnosticResult("Breusch-Pagan", float(lm), p, df, _verdict(p))


def durbin_watson(residuals, groups=None) -> DiagnosticResult:
    """Pooled Durbin-Watson over clusters of time-ordered residuals.

    ``residuals`` is either a list of per-cluster arrays or a flat array
    with a parallel ``groups`` label array (rows in time order per group).
    """
    if groups is not None:
        e = np.asarray(residuals, dtype=float)
        g = np.asarray(groups)
        clusters = [e[g == k] for k in pd.unique(g)]
    elif isinstance(residuals, np.ndarray) and residuals.ndim == 1:
        clusters = [residuals]
    else:
        clusters = [np.asarray(r, dtype=float) for r in residuals]
    if any(c.size < 2 for c in clusters):
        raise ValueError("each cluster needs at least two residuals")
    num = sum(float((np.diff(c) ** 2).sum()) for c in clusters)
    den = sum(float((c ** 2).sum()) for c in clusters)
    if den == 0:
        return DiagnosticResult("Durbin-Watson", float("nan"), None, None, "undefined (all residuals zero)")
    dw = num / den
    if dw < 1.0:
        verdict = "positive autocorrelation"
    elif dw > 3.0:
        verdict = "negative autocorrelation"
    else:
        verdict = "no strong autocorrelation"
    return DiagnosticResult("Durbin-Watson", dw, None, None, verdict)


def panel_diagnostics(panel: pd.DataFrame, covariates: Sequence[str], fit: REFit | None = None,
                      y: str = "y", entity: str = "fips", time: str = "week") -> dict[str, DiagnosticResult]:
    """White and BP on pooled-OLS residuals, DW on the RE quasi-demeaned residuals."""
    pooled = pooled_ols(panel, covariates, y, entity, time)
    Xraw = pooled.X_star[:, 1:]
    fit = fit or fit_random_effects(panel, covariates, y, entity, time)
    return {
        "white": white_test(pooled.resid_star, Xraw),
        "breusch_pagan": breusch_pagan(pooled.resid_star, Xraw),
        "durbin_watson": durbin_watson(fit.resid_star, fit.groups),
    }


# ---------------------------------------------------------------- Table-1 style report

def table_rows(fit: REFit, labels: dict[str, str] | None = None) -> list[tuple[str, str]]:
    labels = {**TABLE_LABELS, **(labels or {})}
    rows = []
    order = [n for n in fit.names if n != "const"] + ["const"]
    for name in order:
        j = fit.names.index(name)
        label = "constant" if name == "const" else labels.get(name, name)
        rows.append((label, f"{fit.coefficients[j]:.3f} ({fit.se_clustered[j]:.3f}){significance_mark(fit.p_values[j])}"))
    rows.append(("Observations", f"{fit.n_obs:,}"))
    rows.append(("no. of counties", f"{fit.n_clusters:,}"))
    return rows


def format_table(fit: REFit, diagnostics: dict[str, DiagnosticResult] | None = None,
                 title: str = "") -> str:
    rows = table_rows(fit)
    width = max(len(r[0]) for r in rows) + 2
    lines = [title] if title else []
    lines.append(f"{'Variables':<{width}}Estimate (robust SE)")
    lines += [f"{label:<{width}}{cell}" for label, cell in rows]
    lines.append("p-values marked as: ¹ p<0.01, ² p<0.05")
    if diagnostics:
        lines.append("")
        lines.append("Diagnostics")
        for d in diagnostics.values():
            p = "" if d.p_value is None else f", p={d.p_value:.4g}"
            df = "" if d.df is None else f", df={d.df}"
            lines.append(f"  {d.name}: {d.statistic:.4g}{p}{df} -> {d.verdict}")
    return "\n".join(lines) + "\n"


def table_frame(fit: REFit) -> pd.DataFrame:
    rows = []
    for label, cell in table_rows(fit):
        rows.append({"variable": label, "cell": cell})
    return pd.DataFrame(rows)


def write_econ_json(path, fit: REFit, diagnostics: dict[str, DiagnosticResult]) -> None:
    payload = {"fit": fit.to_dict(), "diagnostics": {k: v.to_dict() for k, v in diagnostics.items()},
               "table": [list(r) for r in table_rows(fit)]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
