"""Command-line workflow: ingest -> fit -> explain / robustness -> econ -> report.

Every subcommand reads the same run configuration (a YAML file given by
``--config`` or ``$CHAINSHAP_CONFIG``) and writes into one output directory.
Flags override config values.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .analysis import correlation_network, global_importance, robustness_study, write_json
from .data import (
    DEFAULT_PANEL_COVARIATES, METRIC_COLUMNS, FormatError, PanelError, SchemaError,
    analysis_table, build_panel, filter_region, load_census, load_jhu, merge_comorbidity,
    rate_table, resolve_phase, resolve_region, write_jhu, write_report,
)
from .econometrics import RankError, fit_random_effects, format_table, panel_diagnostics, table_frame, write_econ_json
from .gbdt import GbdtParams, TreeEnsemble, fit_ensemble
from .ordering import METRICS, OrderingError, resolve_ordering
from .plots import importance_bar_svg, robustness_strip_svg
from .shapley import ShapleyConfig, explain_dataset, fit_distribution

log = logging.getLogger("chainshap")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ENV = "CHAINSHAP_CONFIG"
MIN_COUNTIES = 10

STAGE_FILES = {
    "ingest": ["census_validated.csv", "jhu_confirmed_clean.csv", "ingest_report.json"],
    "fit": ["design.csv", "model.json", "fit_summary.json"],
    "explain": ["shap.csv", "shap_meta.json", "importance.json", "importance.csv", "importance.svg", "network.csv"],
    "robustness": ["robustness.csv", "robustness.json", "robustness.svg"],
    "econ": ["econ_table.txt", "econ_table.csv", "econ.json"],
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    census: str | None = None
    census_schema: dict | None = None
    jhu_confirmed: str | None = None
    jhu_deaths: str | None = None
    comorbidity: str | None = None
    exclude_missing_comorbidity: bool = True
    region: object = "south"
    phase: object = "I"
    endpoint: str = "confirmed"
    ordering: str = "CO1"
    features: list = field(default_factory=lambda: list(METRICS))
    gbdt: dict = field(default_factory=dict)
    shapley: dict = field(default_factory=dict)
    econ_covariates: list = field(default_factory=lambda: list(DEFAULT_PANEL_COVARIATES))
    network_threshold: float = 0.3
    n_perms: int = 20
    out: str = "chainshap-out"
    seed: int = 0
    threads: int = 1

    def snapshot(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=str))


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return cfg
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    base = Path(path).resolve().parent
    data = raw.pop("data", {}) or {}
    for key in ("census", "jhu_confirmed", "jhu_deaths", "comorbidity"):
        if data.get(key):
            p = Path(data[key])
            setattr(cfg, key, str(p if p.is_absolute() else base / p))
    if "census_schema" in data:
        cfg.census_schema = data["census_schema"]
    if "exclude_missing_comorbidity" in data:
        cfg.exclude_missing_comorbidity = bool(data["exclude_missing_comorbidity"])
    if "econ" in raw:
        cfg.econ_covariates = list((raw.pop("econ") or {}).get("covariates", cfg.econ_covariates))
    analysis = raw.pop("analysis", {}) or {}
    cfg.network_threshold = float(analysis.get("network_threshold", cfg.network_threshold))
    cfg.n_perms = int(analysis.get("n_perms", cfg.n_perms))
    for key, value in raw.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    if raw.get("out") and not Path(raw["out"]).is_absolute():
        cfg.out = str(base / raw["out"])
    return cfg


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    for name in ("region", "phase", "endpoint", "ordering", "seed", "out", "n_perms", "threads"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "n_mc", None) is not None:
        cfg.shapley = {**cfg.shapley, "n_mc": args.n_mc}
    return cfg


@dataclass
class Resolved:
    cfg: RunConfig
    out: Path
    region: object
    phase: object
    ordering: object
    features: list
    columns: list
    gbdt: GbdtParams
    shapley: ShapleyConfig


def validate(cfg: RunConfig, stage: str) -> Resolved:
    """Resolve and check the whole config before any output is written."""
    try:
        region = resolve_region(cfg.region)
        phase = resolve_phase(cfg.phase)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.endpoint not in ("confirmed", "deaths"):
        raise ConfigError("endpoint must be 'confirmed' or 'deaths'")
    unknown = [f for f in cfg.features if f not in METRIC_COLUMNS]
    if unknown:
        raise ConfigError("unknown features: " + ", ".join(unknown))
    try:
        ordering = resolve_ordering(str(cfg.ordering), cfg.features)
    except OrderingError as exc:
        raise ConfigError(f"ordering: {exc}") from exc
    try:
        gbdt = GbdtParams(**cfg.gbdt)
        shap = ShapleyConfig(**{"seed": int(cfg.seed), "n_jobs": int(cfg.threads), **cfg.shapley})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if int(cfg.threads) < 1 or int(cfg.n_perms) < 1:
        raise ConfigError("threads and n_perms must be >= 1")
    if stage == "ingest":
        for key in ("census", "jhu_confirmed"):
            if not getattr(cfg, key):
                raise ConfigError(f"data.{key} is required")
        for key in ("census", "jhu_confirmed", "jhu_deaths", "comorbidity"):
            p = getattr(cfg, key)
            if p and not Path(p).is_file():
                raise ConfigError(f"data.{key} not found: {p}")
        if "Com" in cfg.features and not cfg.comorbidity and "com" not in (cfg.census_schema or {}):
            raise ConfigError("feature Com needs data.comorbidity (or drop Com from features and ordering)")
    if stage == "fit" and cfg.endpoint == "deaths" and not cfg.jhu_deaths:
        raise ConfigError("endpoint 'deaths' needs data.jhu_deaths")
    out = Path(cfg.out)
    needs = {"fit": "ingest", "econ": "ingest", "explain": "fit", "robustness": "fit"}.get(stage)
    if needs:
        missing = [f for f in STAGE_FILES[needs] if not (out / f).is_file()]
        if missing:
            raise ConfigError(f"run '{needs}' first; missing {', '.join(missing)} in {out}")
    columns = [METRIC_COLUMNS[f] for f in cfg.features]
    return Resolved(cfg, out, region, phase, ordering, list(cfg.features), columns, gbdt, shap)


# ---------------------------------------------------------------- manifest

def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json"


def update_manifest(r: Resolved, stage: str, files: list[str], summary: dict | None = None) -> dict:
    path = _manifest_path(r.out)
    manifest = json.loads(path.read_text()) if path.is_file() else {}
    manifest["software"] = {"name": "chainshap", "version": __version__}
    manifest["config"] = r.cfg.snapshot()
    stages = manifest.setdefault("stages", {})
    stages[stage] = {
        "completed_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "files": {f: sha256(r.out / f) for f in files},
        "summary": summary or {},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- stages

def _read_census(out: Path) -> pd.DataFrame:
    return pd.read_csv(out / "census_validated.csv", dtype={"fips": str})


def _read_jhu(out: Path, deaths: bool):
    dpath = out / "jhu_deaths_clean.csv"
    return load_jhu(out / "jhu_confirmed_clean.csv", dpath if deaths and dpath.is_file() else None)


def cmd_ingest(r: Resolved) -> int:
    cfg = r.cfg
    census = load_census(cfg.census, cfg.census_schema)
    table, rejects = census.table, list(census.rejects)
    com_rejects = []
    if cfg.comorbidity:
        merged = merge_comorbidity(table, cfg.comorbidity)
        table, com_rejects = merged.table, merged.rejects
    jhu = load_jhu(cfg.jhu_confirmed, cfg.jhu_deaths)

    r.out.mkdir(parents=True, exist_ok=True)
    table.to_csv(r.out / "census_validated.csv", index=False, float_format="%.10g")
    write_jhu(jhu, r.out / "jhu_confirmed_clean.csv", "confirmed")
    files = list(STAGE_FILES["ingest"])
    if cfg.jhu_deaths:
        write_jhu(jhu, r.out / "jhu_deaths_clean.csv", "deaths")
        files.append("jhu_deaths_clean.csv")
    flagged = sorted(table.loc[table["com_missing"], "fips"]) if "com_missing" in table else []
    write_report(
        r.out / "ingest_report.json",
        census={"accepted": int(len(table)), "rejects": rejects},
        comorbidity={"rejects": com_rejects, "unmatched_counties": flagged},
        jhu={"counties": len(jhu.series), "repairs": jhu.repairs, "total_repairs": jhu.total_repairs,
             "skipped_lines": jhu.skipped},
    )
    update_manifest(r, "ingest", files, {"counties": int(len(table)), "rejects": len(rejects),
                                         "jhu_repairs": jhu.total_repairs})
    print(f"ingest: {len(table)} counties accepted, {len(rejects)} rejected, "
          f"{jhu.total_repairs} cumulative-count repairs")
    return EXIT_OK


def _design(r: Resolved) -> pd.DataFrame:
    census = analysis_table(_read_census(r.out), r.cfg.exclude_missing_comorbidity)
    missing = [c for c in r.columns if c not in census.columns]
    if missing:
        raise SchemaError(missing[0])
    regional = filter_region(census, r.region)
    jhu = _read_jhu(r.out, r.cfg.endpoint == "deaths")
    rates = rate_table(regional, jhu, r.phase, r.cfg.endpoint)
    return rates[["fips", "state"] + r.columns + ["rate"]]


def cmd_fit(r: Resolved) -> int:
    design = _design(r)
    if len(design) < MIN_COUNTIES:
        raise FormatError(f"only {len(design)} counties in region/phase; at least {MIN_COUNTIES} needed")
    X = design[r.columns].to_numpy(float)
    y = design["rate"].to_numpy(float)
    model = fit_ensemble(X, y, r.gbdt, seed=int(r.cfg.seed), n_jobs=int(r.cfg.threads),
                         feature_names=r.features)
    design.to_csv(r.out / "design.csv", index=False, float_format="%.10g")
    model.save(r.out / "model.json")
    summary = {"region": r.region.label, "phase": r.phase.label, "endpoint": r.cfg.endpoint,
               "n_counties": int(len(design)), "r2_mean": model.r2_mean, "r2_se": model.r2_se,
               "n_learners": len(model.learners)}
    write_json(r.out / "fit_summary.json", summary)
    update_manifest(r, "fit", STAGE_FILES["fit"], summary)
    print(f"fit: R^2 = {model.r2_mean:.3f} ± {model.r2_se:.3f} over {len(model.learners)} learners "
          f"({len(design)} counties, {r.cfg.endpoint})")
    return EXIT_OK


def _load_fit(r: Resolved):
    design = pd.read_csv(r.out / "design.csv", dtype={"fips": str})
    model = TreeEnsemble.load(r.out / "model.json")
    if list(model.feature_names) != r.features:
        raise ConfigError("features differ from those the model was fit on; rerun 'fit'")
    return design, model


def cmd_explain(r: Resolved) -> int:
    design, model = _load_fit(r)
    X = design[r.columns].to_numpy(float)
    dist = fit_distribution(X, r.shapley.distribution, r.shapley.bandwidth)
    sm = explain_dataset(model.predict, X, r.ordering, dist, r.shapley)
    meta = {"region": r.region.label, "phase": r.phase.label, "ordering": r.ordering.to_text(),
            "endpoint": r.cfg.endpoint}
    report = global_importance(sm, X, r.features, meta)
    net = correlation_network(X, design["rate"].to_numpy(float), r.cfg.network_threshold, r.features)

    sm.to_csv(r.out / "shap.csv", index=design["fips"])
    sm.write_metadata(r.out / "shap_meta.json")
    write_json(r.out / "importance.json", report.to_dict())
    report.to_frame().to_csv(r.out / "importance.csv", index=False, float_format="%.10g")
    title = f"{r.region.label}, {r.phase.label}: {r.ordering.to_text()}"
    (r.out / "importance.svg").write_text(importance_bar_svg(report, title))
    net.to_frame().to_csv(r.out / "network.csv", index=False, float_format="%.10g")
    eff = sm.metadata()["efficiency_residual"]
    update_manifest(r, "explain", STAGE_FILES["explain"], {"efficiency_residual": eff, **meta})
    print(f"explain: {len(X)} counties; efficiency residual max {eff['max_abs']:.3g} "
          f"(sigma_MC {eff['sigma_mc']:.3g})")
    for row in report.to_frame().sort_values("s_index").itertuples():
        print(f"  {row.s_index:>2}  {row.feature:<5} {row.mean_abs_shap:.4g}  {row.sign}")
    return EXIT_OK


def cmd_robustness(r: Resolved) -> int:
    design, model = _load_fit(r)
    X = design[r.columns].to_numpy(float)
    dist = fit_distribution(X, r.shapley.distribution, r.shapley.bandwidth)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = robustness_study(model.predict, X, r.ordering, dist, r.shapley, int(r.cfg.n_perms),
                               n_jobs=int(r.cfg.threads))
    rep.long_frame().to_csv(r.out / "robustness.csv", index=False)
    write_json(r.out / "robustness.json", rep.to_dict())
    (r.out / "robustness.svg").write_text(robustness_strip_svg(rep, f"{r.region.label}, {r.phase.label}"))
    spread = {f: int(np.ptp(rep.s_index[:, j])) for j, f in enumerate(rep.features)}
    update_manifest(r, "robustness", STAGE_FILES["robustness"], {"n_perms": int(r.cfg.n_perms), "s_index_range": spread})
    print(f"robustness: {rep.s_index.shape[0]} shuffled orderings")
    for j, f in enumerate(rep.features):
        print(f"  {f:<5} base S_I {rep.reference[j]:>2}  range {rep.s_index[:, j].min()}-{rep.s_index[:, j].max()}")
    return EXIT_OK


def cmd_econ(r: Resolved) -> int:
    census = analysis_table(_read_census(r.out), r.cfg.exclude_missing_comorbidity)
    jhu = _read_jhu(r.out, r.cfg.endpoint == "deaths")
    covs = [METRIC_COLUMNS.get(c, c) for c in r.cfg.econ_covariates]
    panel = build_panel(jhu, census, r.region, r.phase, covs, r.cfg.endpoint)
    if panel.groupby("fips").size().nunique() != 1:
        raise PanelError("panel is unbalanced after cleaning; change the date range")
    fit = fit_random_effects(panel, covs)
    diags = panel_diagnostics(panel, covs, fit)
    text = format_table(fit, diags, f"{r.region.label}, {r.phase.label} (random effects, county-clustered SE)")
    (r.out / "econ_table.txt").write_text(text)
    table_frame(fit).to_csv(r.out / "econ_table.csv", index=False)
    write_econ_json(r.out / "econ.json", fit, diags)
    update_manifest(r, "econ", STAGE_FILES["econ"], {"n_obs": fit.n_obs, "n_clusters": fit.n_clusters})
    print(text, end="")
    return EXIT_OK


def cmd_report(r: Resolved) -> int:
    r.out.mkdir(parents=True, exist_ok=True)
    path = _manifest_path(r.out)
    manifest = json.loads(path.read_text()) if path.is_file() else {}
    manifest["software"] = {"name": "chainshap", "version": __version__}
    manifest.setdefault("config", r.cfg.snapshot())
    stages = manifest.setdefault("stages", {})
    absent = []
    for stage, files in STAGE_FILES.items():
        present = [f for f in files if (r.out / f).is_file()]
        if not present:
            absent.append(stage)
            stages.pop(stage, None)
            continue
        entry = stages.setdefault(stage, {"summary": {}})
        entry["files"] = {f: sha256(r.out / f) for f in sorted(present)}
    manifest["absent_stages"] = absent
    manifest["generated_at"] = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    lines = ["# chainshap run summary", "", f"Output directory: `{r.out}`", ""]
    for stage, entry in stages.items():
        lines.append(f"## {stage}")
        for f, digest in entry["files"].items():
            lines.append(f"- [{f}]({f}) `{digest[:12]}`")
        for k, v in entry.get("summary", {}).items():
            if not isinstance(v, dict):
                lines.append(f"- {k}: {v}")
        lines.append("")
    if absent:
        lines.append("Absent stages: " + ", ".join(absent))
    (r.out / "summary.md").write_text("\n".join(lines) + "\n")
    n_files = sum(len(e["files"]) for e in stages.values())
    print(f"report: {n_files} files listed in manifest.json")
    if absent:
        print("warning: absent stages: " + ", ".join(absent), file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "fit": cmd_fit, "explain": cmd_explain,
    "robustness": cmd_robustness, "econ": cmd_econ, "report": cmd_report,
}
HELP = {
    "ingest": "validate census/JHU/comorbidity inputs and write clean tables",
    "fit": "train the bagged GBDT ensemble on the region/phase rates",
    "explain": "causal Shapley values, importance ranking and correlation network",
    "robustness": "Shapley Index spread over shuffled component orders",
    "econ": "random-effects panel regression with diagnostics",
    "report": "manifest with checksums plus summary.md",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainshap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML run config (default: ${CONFIG_ENV})")
    common.add_argument("--region", help="east | south | west")
    common.add_argument("--phase", help="I | II")
    common.add_argument("--endpoint", choices=["confirmed", "deaths"])
    common.add_argument("--ordering", help="built-in label (CO1, CO2, CO3) or bracket DSL string")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--n-perms", dest="n_perms", type=int)
    common.add_argument("--n-mc", dest="n_mc", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    fx = sub.add_parser("make-fixtures", help="write a synthetic census/JHU/comorbidity trio")
    fx.add_argument("directory")
    fx.add_argument("--counties", type=int, default=40)
    fx.add_argument("--seed", type=int, default=0)
    fx.add_argument("--noiseless", action="store_true", help="expected counts instead of Poisson draws")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "make-fixtures":
        from .synthetic import write_fixture_trio

        paths = write_fixture_trio(args.directory, args.counties, args.seed, noiseless=args.noiseless)
        for k, p in paths.items():
            print(f"{k}: {p}")
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with warnings.catch_warnings():
        warnings.showwarning = _show_warning
        return _run(args)


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def _run(args) -> int:
    try:
        cfg = apply_flags(load_config(args.config), args)
        resolved = validate(cfg, args.command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](resolved)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (np.linalg.LinAlgError, RankError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, FormatError, PanelError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
