"""Causal Shapley values over a partial causal ordering.

The characteristic value of a coalition ``S`` is the expected prediction
under the intervention ``do(X_S = x_S)``. Out-of-coalition features are
filled component by component along the chain graph: a component's missing
features are drawn conditional on every feature of the earlier components
and, unless the component is flagged as confounded, on its own in-coalition
features.

Monte Carlo draws are common random numbers across instances: the stream
for a coalition depends only on ``(seed, coalition mask)``. Explaining one
row alone therefore gives the same answer as explaining it inside a larger
batch, and duplicated rows receive identical attributions.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from .ordering import CausalOrdering

log = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]

MAX_EXACT_FEATURES = 16


class ShapleySizeError(ValueError):
    pass


def coalition_weight(s: int, d: int) -> float:
    """Shapley kernel ``s! (d-s-1)! / d!`` computed in log space."""
    if not 0 <= s <= d - 1:
        raise ValueError(f"coalition size {s} out of range for {d} features")
    return float(np.exp(gammaln(s + 1) + gammaln(d - s) - gammaln(d + 1)))


def _ridge(mat: np.ndarray, what: str) -> np.ndarray:
    d = mat.shape[0]
    if d == 0:
        return mat
    eps = 1e-8 * max(np.trace(mat), 1e-300) / d
    log.info("ridge-regularizing singular %s covariance (eps=%.3g)", what, eps)
    return mat + eps * np.eye(d)


def _stable_cholesky(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return np.linalg.cholesky(_ridge(mat, what))


# ---------------------------------------------------------------- models

class GaussianModel:
    """Multivariate normal with analytic conditionals."""

    kind = "gaussian"

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-9 * max(1.0, np.abs(self.cov).max()):
            raise ValueError("covariance must be positive semi-definite")

    @classmethod
    def fit(cls, X: np.ndarray) -> "GaussianModel":
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), np.cov(X, rowvar=False, bias=False).reshape(X.shape[1], X.shape[1]))

    def plan_step(self, out_idx: np.ndarray, cond_idx: np.ndarray):
        s_oo = self.cov[np.ix_(out_idx, out_idx)]
        if cond_idx.size == 0:
            return None, _stable_cholesky(s_oo, "marginal")
        s_oc = self.cov[np.ix_(out_idx, cond_idx)]
        s_cc = self.cov[np.ix_(cond_idx, cond_idx)]
        try:
            if np.linalg.cond(s_cc) > 1e12:
                raise np.linalg.LinAlgError
            gain = np.linalg.solve(s_cc, s_oc.T).T
        except np.linalg.LinAlgError:
            gain = np.linalg.solve(_ridge(s_cc, "conditioning"), s_oc.T).T
        cond_cov = s_oo - gain @ s_oc.T
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        return gain, _stable_cholesky(cond_cov, "conditional")

    def fill(self, W, out_idx, cond_idx, step, rng, fixed):
        gain, chol = step
        _, n_inst, n = W.shape
        # antithetic pairs: draw j and draw j + n//2 use z and -z at every chain step
        half = n // 2
        z = rng.standard_normal((n - half, out_idx.size))
        z = np.concatenate([z, -z[:half]]) if half else z
        noise = (z @ chol.T + self.mean[out_idx]).T
        if gain is None:
            W[out_idx] = noise[:, None, :]
            return
        offset = (gain @ self.mean[cond_idx])[:, None, None]
        if fixed:
            # conditioning columns were never sampled: one shift per instance
            shift = gain @ W[cond_idx, :, 0]
            W[out_idx] = shift[:, :, None] + noise[:, None, :] - offset
        else:
            shift = gain @ W[cond_idx].reshape(cond_idx.size, -1)
            W[out_idx] = shift.reshape(out_idx.size, n_inst, n) + noise[:, None, :] - offset

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class EmpiricalModel:
    """Resample reference rows weighted by a scaled Mahalanobis distance.

    Weight of reference row ``r`` given conditioning values ``c`` on columns
    ``C`` is ``exp(-D^2 / (2 * bandwidth^2))`` with
    ``D^2 = (c - r_C)' Sigma_CC^{-1} (c - r_C) / |C|``.
    """

    kind = "empirical"

    def __init__(self, reference_data, bandwidth: float = 0.1):
        self.reference_data = np.atleast_2d(np.asarray(reference_data, dtype=float))
        if self.reference_data.shape[0] == 0:
            raise ValueError("reference data must be nonempty")
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.bandwidth = float(bandwidth)
        ref = self.reference_data
        self.mean = ref.mean(axis=0)
        self.cov = np.atleast_2d(np.cov(ref, rowvar=False)) if ref.shape[0] > 1 else np.eye(ref.shape[1])

    @classmethod
    def fit(cls, X: np.ndarray, bandwidth: float = 0.1) -> "EmpiricalModel":
        return cls(X, bandwidth)

    def plan_step(self, out_idx, cond_idx):
        if cond_idx.size == 0:
            return None
        s_cc = self.cov[np.ix_(cond_idx, cond_idx)]
        try:
            if np.linalg.cond(s_cc) > 1e12:
                raise np.linalg.LinAlgError
            prec = np.linalg.inv(s_cc)
        except np.linalg.LinAlgError:
            prec = np.linalg.inv(_ridge(s_cc, "conditioning"))
        return np.linalg.cholesky(0.5 * (prec + prec.T))

    def fill(self, W, out_idx, cond_idx, step, rng, fixed):
        ref = self.reference_data
        n_ref = ref.shape[0]
        _, n_inst, n = W.shape
        u = rng.random(n)
        if step is None:
            pick = np.minimum((u * n_ref).astype(int), n_ref - 1)
            W[out_idx] = ref[pick][:, out_idx].T[:, None, :]
            return
        # whitened coordinates turn Mahalanobis distance into Euclidean distance
        wr = ref[:, cond_idx] @ step
        wr2 = (wr ** 2).sum(-1)
        chunk = max(1, 4_000_000 // (n * n_ref))
        for lo in range(0, n_inst, chunk):
            wc = np.moveaxis(W[cond_idx, lo:lo + chunk], 0, -1) @ step
            d2 = ((wc ** 2).sum(-1)[..., None] - 2.0 * wc @ wr.T + wr2) / cond_idx.size
            logw = -np.maximum(d2, 0.0) / (2.0 * self.bandwidth ** 2)
            w = np.exp(logw - logw.max(axis=-1, keepdims=True))
            cdf = np.cumsum(w, axis=-1)
            target = u[None, :, None] * cdf[..., -1:]
            pick = np.minimum((cdf < target).sum(axis=-1), n_ref - 1)
            W[out_idx, lo:lo + chunk] = np.moveaxis(ref[pick][..., out_idx], -1, 0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_reference": int(self.reference_data.shape[0]),
                "bandwidth": self.bandwidth}


class DiscreteModel:
    """Explicit joint probability table over finite supports.

    Interventional expectations are computed exactly by summing over every
    completion of the missing features, so no sampling is involved. When a
    conditioning event has probability zero the step falls back to the
    marginal of the missing features.
    """

    kind = "discrete"

    def __init__(self, supports: Sequence[Sequence[float]], pmf):
        self.supports = [np.asarray(s, dtype=float) for s in supports]
        self.pmf = np.asarray(pmf, dtype=float)
        if self.pmf.shape != tuple(len(s) for s in self.supports):
            raise ValueError("pmf shape must match supports")
        if (self.pmf < 0).any() or not np.isclose(self.pmf.sum(), 1.0):
            raise ValueError("pmf must be nonnegative and sum to one")
        self._marginals: dict[tuple[int, ...], np.ndarray] = {}

    def marginal(self, keep: tuple[int, ...]) -> np.ndarray:
        keep = tuple(sorted(keep))
        if keep not in self._marginals:
            drop = tuple(a for a in range(self.pmf.ndim) if a not in keep)
            self._marginals[keep] = self.pmf.sum(axis=drop)
        return self._marginals[keep]

    def prob(self, idx: Sequence[int], cols: Sequence[int]) -> float:
        """P(X_cols = support values at idx[cols])."""
        cols = tuple(sorted(cols))
        if not cols:
            return 1.0
        return float(self.marginal(cols)[tuple(idx[c] for c in cols)])

    def index_of(self, x: np.ndarray) -> list[int]:
        out = []
        for j, v in enumerate(x):
            hit = np.flatnonzero(self.supports[j] == v)
            if hit.size == 0:
                raise ValueError(f"value {v} of feature {j} not in its support")
            out.append(int(hit[0]))
        return out

    def expectation(self, f: PredictFn, x: np.ndarray, mask: int, groups) -> float:
        d = len(self.supports)
        base = self.index_of(x)
        missing = [j for j in range(d) if not mask >> j & 1]
        steps = []
        earlier: list[int] = []
        for idx, confounded in groups:
            comp = [int(j) for j in idx]
            out = [j for j in comp if j in missing]
            if out:
                cond = list(earlier) + ([] if confounded else [j for j in comp if j not in missing])
                steps.append((out, cond))
            earlier.extend(comp)
        completions = []
        weights = []
        for combo in itertools.product(*(range(len(self.supports[j])) for j in missing)):
            full = list(base)
            for j, k in zip(missing, combo):
                full[j] = k
            w = 1.0
            for out, cond in steps:
                denom = self.prob(full, cond)
                if denom > 0:
                    w *= self.prob(full, out + cond) / denom
                else:
                    w *= self.prob(full, out)
            completions.append([self.supports[j][full[j]] for j in range(d)])
            weights.append(w)
        values = np.asarray(f(np.asarray(completions, dtype=float)), dtype=float)
        return float(np.dot(weights, values))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "supports": [s.tolist() for s in self.supports],
                "pmf": self.pmf.tolist()}


def fit_distribution(X: np.ndarray, kind: str = "gaussian", bandwidth: float = 0.1):
    if kind == "gaussian":
        return GaussianModel.fit(X)
    if kind == "empirical":
        return EmpiricalModel.fit(X, bandwidth)
    raise ValueError(f"unknown distribution kind {kind!r}")


# ---------------------------------------------------------------- engine

@dataclass
class ShapleyConfig:
    n_mc: int = 256
    coalition_mode: str = "exact"
    n_permutations: int = 64
    seed: int = 0
    n_jobs: int = 1
    distribution: str = "gaussian"
    bandwidth: float = 0.1

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.coalition_mode not in ("exact", "permutation"):
            raise ValueError("coalition_mode must be 'exact' or 'permutation'")
        if self.coalition_mode == "permutation" and self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")


@dataclass
class ShapleyMatrix:
    values: np.ndarray
    base_value: float
    predictions: np.ndarray
    feature_names: tuple[str, ...]
    base_se: float = 0.0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residual_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ordering: str = ""
    config: dict = field(default_factory=dict)

    def efficiency_ok(self, k: float = 4.0) -> np.ndarray:
        """Per-row check ``|residual| < k * sigma`` (exact rows need 1e-9)."""
        tol = np.maximum(k * self.residual_sigma, 1e-9)
        return np.abs(self.residuals) < tol

    def to_csv(self, path, index: Sequence[str] | None = None) -> None:
        import pandas as pd

        frame = pd.DataFrame(self.values, columns=list(self.feature_names))
        frame.insert(0, "id", list(index) if index is not None else range(len(frame)))
        frame.to_csv(path, index=False, float_format="%.10g")

    def metadata(self) -> dict:
        res = np.abs(self.residuals)
        return {
            "ordering": self.ordering,
            "config": self.config,
            "features": list(self.feature_names),
            "n_instances": int(self.values.shape[0]),
            "base_value": float(self.base_value),
            "base_se": float(self.base_se),
            "efficiency_residual": {
                "max_abs": float(res.max()) if res.size else 0.0,
                "mean_abs": float(res.mean()) if res.size else 0.0,
                "sigma_mc": float(self.residual_sigma.max()) if self.residual_sigma.size else 0.0,
                "fraction_within_4_sigma": float(self.efficiency_ok().mean()) if res.size else 1.0,
            },
        }

    def write_metadata(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _coalition_plan(mask: int, groups, dist):
    steps = []
    earlier: list[int] = []
    for idx, confounded in groups:
        out = np.array([j for j in idx if not mask >> int(j) & 1], dtype=int)
        if out.size:
            inside = [int(j) for j in idx if mask >> int(j) & 1]
            cond = np.array(earlier + ([] if confounded else inside), dtype=int)
            steps.append((out, cond, dist.plan_step(out, cond)))
        earlier.extend(int(j) for j in idx)
    return steps


def _complete(X: np.ndarray, mask: int, groups, dist, n: int, rng) -> np.ndarray:
    """Interventional completions in feature-major layout ``(d, n_instances, n)``."""
    W = np.empty((X.shape[1], X.shape[0], n))
    W[:] = X.T[:, :, None]
    for out, cond, step in _coalition_plan(mask, groups, dist):
        fixed = all(mask >> int(j) & 1 for j in cond)
        dist.fill(W, out, cond, step, rng, fixed)
    return W


def _rng_for(seed: int, mask: int) -> np.random.Generator:
    return np.random.default_rng([seed, mask & 0xFFFFFFFF, mask >> 32])


def _mask_of(S, universe: Sequence[str]) -> int:
    mask = 0
    for s in S:
        j = universe.index(s) if isinstance(s, str) else int(s)
        mask |= 1 << j
    return mask


def sample_interventional(x, S, ordering: CausalOrdering, dist, n: int, seed: int) -> np.ndarray:
    """``n`` completed feature vectors for ``x`` with ``S`` held fixed.

    ``S`` may contain feature names or column indices.
    """
    x = np.asarray(x, dtype=float)
    mask = _mask_of(S, list(ordering.feature_universe))
    W = _complete(x[None, :], mask, ordering.index_groups(), dist, n, _rng_for(seed, mask))
    return W[:, 0, :].T.copy()


def _mc_se(pred: np.ndarray, antithetic: bool) -> np.ndarray:
    """Standard error of the row means of ``pred`` (instances x draws)."""
    n = pred.shape[1]
    half = n // 2
    if antithetic and half >= 2:
        # independent units are the pair means; an odd leftover draw is ignored here
        units = 0.5 * (pred[:, :half] + pred[:, n - half:])
        return units.std(axis=1, ddof=1) / math.sqrt(half)
    if n > 1:
        return pred.std(axis=1, ddof=1) / math.sqrt(n)
    return np.zeros(pred.shape[0])


def _values_for_masks(f, X, masks, groups, dist, config):
    """v(S) and its MC standard error for each mask, across all instances."""
    full = (1 << X.shape[1]) - 1
    n_inst = X.shape[0]

    def one(mask):
        if mask == full:
            return np.asarray(f(X), dtype=float), np.zeros(n_inst)
        if dist.kind == "discrete":
            v = np.array([dist.expectation(f, x, mask, groups) for x in X])
            return v, np.zeros(n_inst)
        n = config.n_mc
        W = _complete(X, mask, groups, dist, n, _rng_for(config.seed, mask))
        pred = np.asarray(f(W.reshape(X.shape[1], -1).T), dtype=float).reshape(n_inst, n)
        se = _mc_se(pred, antithetic=dist.kind == "gaussian")
        return pred.mean(axis=1), se

    if config.n_jobs > 1 and len(masks) > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(one, masks))
    else:
        results = [one(m) for m in masks]
    values = np.stack([r[0] for r in results])
    ses = np.stack([r[1] for r in results])
    return values, ses


def char_value(f: PredictFn, x, S, ordering: CausalOrdering, dist, config: ShapleyConfig) -> float:
    x = np.asarray(x, dtype=float)
    mask = _mask_of(S, list(ordering.feature_universe))
    v, _ = _values_for_masks(f, x[None, :], [mask], ordering.index_groups(), dist, config)
    return float(v[0, 0])


def _popcounts(n_masks: int) -> np.ndarray:
    m = np.arange(n_masks, dtype=np.int64)
    counts = np.zeros(n_masks, dtype=np.int64)
    while m.any():
        counts += m & 1
        m >>= 1
    return counts


def _exact(f, X, groups, dist, config):
    d = X.shape[1]
    if d > MAX_EXACT_FEATURES:
        raise ShapleySizeError(
            f"exact mode supports at most {MAX_EXACT_FEATURES} features (got {d}); use coalition_mode='permutation'"
        )
    n_masks = 1 << d
    V, SE = _values_for_masks(f, X, list(range(n_masks)), groups, dist, config)
    sizes = _popcounts(n_masks)
    weights = np.array([coalition_weight(s, d) for s in range(d)])
    phi = np.zeros((X.shape[0], d))
    all_masks = np.arange(n_masks)
    for i in range(d):
        without = all_masks[(all_masks >> i & 1) == 0]
        w = weights[sizes[without]]
        phi[:, i] = w @ (V[without | (1 << i)] - V[without])
    return phi, V[0], SE[0], V[-1]


def _permutation(f, X, groups, dist, config):
    d = X.shape[1]
    rng = np.random.default_rng([config.seed, 0x5EED])
    perms = [rng.permutation(d) for _ in range(config.n_permutations)]
    masks = {0: 0, (1 << d) - 1: 0}
    for perm in perms:
        m = 0
        for j in perm:
            m |= 1 << int(j)
            masks.setdefault(m, 0)
    order = sorted(masks)
    V, SE = _values_for_masks(f, X, order, groups, dist, config)
    row = {m: k for k, m in enumerate(order)}
    phi = np.zeros((X.shape[0], d))
    for perm in perms:
        m = 0
        for j in perm:
            nxt = m | 1 << int(j)
            phi[:, j] += V[row[nxt]] - V[row[m]]
            m = nxt
    phi /= len(perms)
    return phi, V[row[0]], SE[row[0]], V[row[(1 << d) - 1]]


def explain_dataset(f: PredictFn, X, ordering: CausalOrdering, dist, config: ShapleyConfig) -> ShapleyMatrix:
    """Causal Shapley values for every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("no instances to explain")
    if X.shape[1] != len(ordering.feature_universe):
        raise ValueError("X columns do not match the ordering's feature universe")
    groups = ordering.index_groups()
    if config.coalition_mode == "exact":
        phi, v_empty, se_empty, v_full = _exact(f, X, groups, dist, config)
    else:
        phi, v_empty, se_empty, v_full = _permutation(f, X, groups, dist, config)
    # the empty-coalition draws do not depend on x, so every row shares them
    base = float(v_empty[0])
    base_se = float(se_empty[0])
    residuals = phi.sum(axis=1) - (v_full - base)
    sigma = np.sqrt(se_empty ** 2 + base_se ** 2)
    return ShapleyMatrix(
        values=phi,
        base_value=base,
        predictions=v_full,
        feature_names=tuple(ordering.feature_universe),
        base_se=base_se,
        residuals=residuals,
        residual_sigma=sigma,
        ordering=ordering.to_text(),
        # thread count is an execution detail; keep it out of the artifacts
        config={k: v for k, v in asdict(config).items() if k != "n_jobs"},
    )


def shapley_values(f: PredictFn, x, ordering: CausalOrdering, dist, config: ShapleyConfig):
    """Attribution vector and base value for a single instance."""
    sm = explain_dataset(f, np.asarray(x, dtype=float)[None, :], ordering, dist, config)
    return sm.values[0], sm.base_value
