"""Importance summaries, ordering-robustness studies and correlation networks."""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .ordering import CausalOrdering, shuffle_components
from .shapley import ShapleyConfig, ShapleyMatrix, explain_dataset

NEUTRAL_BAND = 0.05


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def effect_sign(x: np.ndarray, phi: np.ndarray, band: float = NEUTRAL_BAND) -> str:
    """'+', '-' or 'neutral' from the correlation of a feature with its attributions."""
    r = _pearson(np.asarray(x, float), np.asarray(phi, float))
    if not np.isfinite(r) or abs(r) < band:
        return "neutral"
    return "+" if r > 0 else "-"


def shapley_index(mean_abs: Sequence[float]) -> np.ndarray:
    """Rank 1 for the largest mean |phi|; ties go to the earlier feature."""
    mean_abs = np.asarray(mean_abs, dtype=float)
    order = np.lexsort((np.arange(mean_abs.size), -mean_abs))
    ranks = np.empty(mean_abs.size, dtype=int)
    ranks[order] = np.arange(1, mean_abs.size + 1)
    return ranks


@dataclass
class ImportanceReport:
    features: tuple[str, ...]
    mean_abs_shap: np.ndarray
    sign: list[str]
    s_index: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "feature": list(self.features),
            "mean_abs_shap": self.mean_abs_shap,
            "sign": self.sign,
            "s_index": self.s_index,
        })

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "features": [
                {"feature": f, "mean_abs_shap": float(m), "sign": s, "s_index": int(i)}
                for f, m, s, i in zip(self.features, self.mean_abs_shap, self.sign, self.s_index)
            ],
        }


def global_importance(shap: ShapleyMatrix | np.ndarray, X, features: Sequence[str] | None = None,
                      meta: dict | None = None) -> ImportanceReport:
    values = shap.values if isinstance(shap, ShapleyMatrix) else np.asarray(shap, dtype=float)
    if features is None:
        features = shap.feature_names if isinstance(shap, ShapleyMatrix) else tuple(f"x{i}" for i in range(values.shape[1]))
    X = np.asarray(X, dtype=float)
    if X.shape != values.shape:
        raise ValueError("Shapley matrix and X must have the same shape")
    mean_abs = np.abs(values).mean(axis=0)
    signs = [effect_sign(X[:, i], values[:, i]) for i in range(values.shape[1])]
    return ImportanceReport(tuple(features), mean_abs, signs, shapley_index(mean_abs), dict(meta or {}))


@dataclass
class RobustnessReport:
    features: tuple[str, ...]
    s_index: np.ndarray          # (n_perms, n_features)
    reference: np.ndarray        # S_I under the base ordering
    orderings: list[str]
    base_ordering: str = ""

    def long_frame(self) -> pd.DataFrame:
        """Violin data: one row per (feature, permutation)."""
        rows = [
            (f, p, int(self.s_index[p, j]))
            for j, f in enumerate(self.features)
            for p in range(self.s_index.shape[0])
        ]
        return pd.DataFrame(rows, columns=["feature", "permutation", "s_index"])

    def to_dict(self) -> dict:
        return {
            "base_ordering": self.base_ordering,
            "orderings": self.orderings,
            "features": list(self.features),
            "reference_s_index": [int(v) for v in self.reference],
            "s_index": self.s_index.astype(int).tolist(),
        }


def robustness_study(f, X, base_ordering: CausalOrdering, dist, config: ShapleyConfig,
                     n_perms: int = 20, n_jobs: int = 1) -> RobustnessReport:
    """S_I of every feature across random rearrangements of the base ordering.

    Run ``k`` uses seed stream ``(config.seed, k + 1)``; the base ordering
    uses ``config.seed`` unchanged.
    """
    X = np.asarray(X, dtype=float)
    shuffled = shuffle_components(base_ordering, n_perms, config.seed)

    def run(ordering, seed):
        sm = explain_dataset(f, X, ordering, dist, replace(config, seed=seed))
        return global_importance(sm, X).s_index

    seeds = [int(np.random.SeedSequence([config.seed, k + 1]).generate_state(1)[0]) for k in range(n_perms)]
    reference = run(base_ordering, config.seed)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            ranks = list(pool.map(run, shuffled, seeds))
    else:
        ranks = [run(o, s) for o, s in zip(shuffled, seeds)]
    return RobustnessReport(
        tuple(base_ordering.feature_universe),
        np.vstack(ranks),
        reference,
        [o.to_text() for o in shuffled],
        base_ordering.to_text(),
    )


@dataclass
class CorrelationNetwork:
    nodes: list[str]
    edges: list[tuple[str, str, float]]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.edges, columns=["source", "target", "r"])


def correlation_network(X, y, threshold: float = 0.3, features: Sequence[str] | None = None,
                        target: str = "rate") -> CorrelationNetwork:
    """Pearson edges among features and between each feature and the target."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    features = list(features) if features is not None else [f"x{i}" for i in range(X.shape[1])]
    names = features + [target]
    data = np.column_stack([X, y])
    flat = [j for j in range(data.shape[1]) if np.ptp(data[:, j]) == 0]
    if flat:
        warnings.warn("zero-variance columns omitted from network: " + ", ".join(names[j] for j in flat), stacklevel=2)
    edges = []
    for a in range(data.shape[1]):
        for b in range(a + 1, data.shape[1]):
            if a in flat or b in flat:
                continue
            r = _pearson(data[:, a], data[:, b])
            if abs(r) >= threshold:
                edges.append((names[a], names[b], r))
    return CorrelationNetwork(names, edges)


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
