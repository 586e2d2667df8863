"""Second-order gradient-boosted regression trees and a bagged ensemble.

Trees use exact greedy split search over sorted unique feature values. Among
equal-gain splits the lowest feature index wins, then the lowest threshold.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

log = logging.getLogger(__name__)

LEAF = -1


@dataclass
class GbdtParams:
    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    n_learners: int = 50
    bag_fraction: float = 1.0
    train_fraction: float = 0.7

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.n_learners < 1:
            raise ValueError("n_trees, n_learners must be >= 1 and max_depth >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("regularization terms must be nonnegative")
        if not 0 < self.train_fraction < 1 or self.bag_fraction <= 0:
            raise ValueError("train_fraction must lie in (0, 1) and bag_fraction be positive")


@dataclass
class Tree:
    """Flat binary tree. ``feature[k] == -1`` marks node ``k`` as a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=float),
        )


def _best_split(X, order, g, h, lam, min_child_weight):
    """Best (gain, feature, threshold) for one node, or None.

    ``order`` holds the node's global row indices sorted by each column.
    """
    n, d = order.shape
    if n < 2:
        return None
    xs = X[order, np.arange(d)]
    gl = np.cumsum(g[order], axis=0)[:-1]
    hl = np.cumsum(h[order], axis=0)[:-1]
    G, H = g[order[:, 0]].sum(), h[order[:, 0]].sum()
    gr, hr = G - gl, H - hl
    valid = (xs[1:] > xs[:-1]) & (hl >= min_child_weight) & (hr >= min_child_weight)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - G ** 2 / (H + lam))
    gain = np.where(valid, gain, -np.inf)
    best = gain.max()
    if not np.isfinite(best):
        return None
    # lowest feature first, then the lowest split position within it
    feats, positions = np.nonzero((gain == best).T)
    feat, pos = feats[0], positions[0]
    return best, int(feat), 0.5 * (xs[pos, feat] + xs[pos + 1, feat])


def fit_tree(X: np.ndarray, grad: np.ndarray, hess: np.ndarray, params: GbdtParams,
             order: np.ndarray | None = None) -> Tree:
    """Greedy depth-wise tree on gradient statistics.

    ``order`` is an optional column-wise stable argsort of ``X``; boosting
    passes it in so the sort happens once per booster instead of per node.
    """
    X = np.asarray(X, dtype=float)
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    if grad.shape != hess.shape or grad.shape[0] != X.shape[0]:
        raise ValueError("grad, hess and X must have the same number of rows")
    if (hess < 0).any():
        raise ValueError("hessian must be nonnegative")
    if order is None:
        order = np.argsort(X, axis=0, kind="stable")
    lam = params.reg_lambda
    n, d = X.shape

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(0.0)
        return len(feature) - 1

    def leaf_weight(rows):
        G, H = grad[rows].sum(), hess[rows].sum()
        return -G / (H + lam) if H + lam > 0 else 0.0

    def grow(node, rows, node_order, depth):
        value[node] = leaf_weight(rows)
        if depth >= params.max_depth or rows.size < 2:
            return
        found = _best_split(X, node_order, grad, hess, lam, params.min_child_weight)
        if found is None:
            return
        gain, feat, thr = found
        if gain - params.gamma <= 0:
            return
        goes_left = np.zeros(n, dtype=bool)
        goes_left[rows] = X[rows, feat] < thr
        feature[node], threshold[node] = feat, thr
        lnode = new_node()
        rnode = new_node()
        left[node], right[node] = lnode, rnode
        sel = goes_left[node_order]
        m = int(goes_left[rows].sum())
        left_order = node_order.T[sel.T].reshape(d, m).T
        right_order = node_order.T[~sel.T].reshape(d, rows.size - m).T
        grow(lnode, rows[goes_left[rows]], left_order, depth + 1)
        grow(rnode, rows[~goes_left[rows]], right_order, depth + 1)

    root = new_node()
    if n:
        grow(root, np.arange(n), order, 0)
    else:
        value[root] = 0.0
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=float),
    )


@numba.njit(cache=True)
def _forest_kernel(X, feature, threshold, left, right, value, roots, tree_learner,
                   base, rate, n_learners, out):
    for i in range(X.shape[0]):
        total = 0.0
        t = 0
        for b in range(n_learners):
            acc = base[b]
            while t < roots.size and tree_learner[t] == b:
                k = roots[t]
                while feature[k] >= 0:
                    if X[i, feature[k]] < threshold[k]:
                        k = left[k]
                    else:
                        k = right[k]
                acc += rate[b] * value[k]
                t += 1
            total += acc
        out[i] = total / n_learners


class _PackedForest:
    """All trees of one or more boosters in flat arrays for compiled traversal."""

    def __init__(self, boosters):
        feature, threshold, left, right, value, roots, owner = [], [], [], [], [], [], []
        offset = 0
        for b, booster in enumerate(boosters):
            for tree in booster.trees:
                roots.append(offset)
                owner.append(b)
                feature.append(tree.feature)
                threshold.append(tree.threshold)
                left.append(np.where(tree.left >= 0, tree.left + offset, LEAF))
                right.append(np.where(tree.right >= 0, tree.right + offset, LEAF))
                value.append(tree.value)
                offset += tree.n_nodes
        cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)
        self.feature = cat(feature, np.int64)
        self.threshold = cat(threshold, np.float64)
        self.left = cat(left, np.int64)
        self.right = cat(right, np.int64)
        self.value = cat(value, np.float64)
        self.roots = np.asarray(roots, dtype=np.int64)
        self.owner = np.asarray(owner, dtype=np.int64)
        self.base = np.asarray([b.base_score for b in boosters], dtype=np.float64)
        self.rate = np.asarray([b.learning_rate for b in boosters], dtype=np.float64)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.empty(X.shape[0])
        _forest_kernel(X, self.feature, self.threshold, self.left, self.right, self.value,
                       self.roots, self.owner, self.base, self.rate, self.base.size, out)
        return out


@dataclass
class Booster:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    n_features: int
    train_loss: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = _check_arity(X, self.n_features)
        packed = self.__dict__.get("_packed")
        if packed is None or packed[0] != len(self.trees):
            packed = (len(self.trees), _PackedForest([self]))
            self.__dict__["_packed"] = packed
        return packed[1].predict(X)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Booster":
        return cls([Tree.from_dict(t) for t in d["trees"]], float(d["learning_rate"]),
                   float(d["base_score"]), int(d["n_features"]))


def _check_arity(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def fit_booster(X, y, params: GbdtParams, seed: int = 0) -> Booster:
    """Squared-error boosting from ``base_score = mean(y)``.

    ``seed`` is accepted for interface symmetry; exact greedy fitting is
    deterministic and uses no randomness.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0] or y.shape[0] < 2:
        raise ValueError("need at least two rows with matching X and y")
    base = float(y.mean())
    pred = np.full(y.shape, base)
    hess = np.ones_like(y)
    order = np.argsort(X, axis=0, kind="stable")
    trees, losses = [], [float(np.mean((pred - y) ** 2))]
    for _ in range(params.n_trees):
        tree = fit_tree(X, pred - y, hess, params, order)
        trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
        losses.append(float(np.mean((pred - y) ** 2)))
    return Booster(trees, params.learning_rate, base, X.shape[1], losses)


def r_squared(pred, truth) -> float:
    """``1 - SS_res / SS_tot``; NaN when the truth is constant."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or truth.size < 2:
        raise ValueError("pred and truth need equal lengths >= 2")
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(((truth - pred) ** 2).sum()) / ss_tot


@dataclass
class TreeEnsemble:
    learners: list[Booster]
    r2_scores: list[float]
    params: GbdtParams | None = None
    feature_names: tuple[str, ...] = ()

    @property
    def n_features(self) -> int:
        return self.learners[0].n_features

    @property
    def _valid_r2(self) -> np.ndarray:
        r2 = np.asarray(self.r2_scores, dtype=float)
        return r2[np.isfinite(r2)]

    @property
    def r2_mean(self) -> float:
        valid = self._valid_r2
        return float(valid.mean()) if valid.size else float("nan")

    @property
    def r2_se(self) -> float:
        """Standard error of the mean R^2; 0.0 by convention for one learner."""
        valid = self._valid_r2
        if valid.size < 2:
            return 0.0
        return float(valid.std(ddof=1) / math.sqrt(valid.size))

    def predict(self, X) -> np.ndarray:
        """Mean of the learners' predictions."""
        X = _check_arity(X, self.n_features)
        if "_packed" not in self.__dict__:
            self.__dict__["_packed"] = _PackedForest(self.learners)
        return self.__dict__["_packed"].predict(X)

    __call__ = predict

    def to_dict(self) -> dict:
        return {
            "params": asdict(self.params) if self.params else None,
            "feature_names": list(self.feature_names),
            "r2_scores": [None if not math.isfinite(r) else r for r in self.r2_scores],
            "r2_mean": None if math.isnan(self.r2_mean) else self.r2_mean,
            "r2_se": self.r2_se,
            "learners": [b.to_dict() for b in self.learners],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        params = GbdtParams(**d["params"]) if d.get("params") else None
        r2 = [float("nan") if r is None else float(r) for r in d["r2_scores"]]
        return cls([Booster.from_dict(b) for b in d["learners"]], r2, params,
                   tuple(d.get("feature_names", ())))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TreeEnsemble":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def predict(model, x) -> np.ndarray | float:
    """Prediction of a booster or ensemble; a scalar for a single vector."""
    x = np.asarray(x, dtype=float)
    out = model.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def _fit_learner(X, y, params: GbdtParams, seed: int, index: int):
    rng = np.random.default_rng([seed, index])
    n = X.shape[0]
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * (1.0 - params.train_fraction))))
    test, train_pool = perm[:n_test], perm[n_test:]
    size = max(2, int(round(train_pool.size * params.bag_fraction)))
    train = rng.choice(train_pool, size=size, replace=True)
    booster = fit_booster(X[train], y[train], params, seed)
    truth = y[test]
    if truth.size < 2 or np.ptp(truth) == 0:
        return booster, float("nan")
    return booster, r_squared(booster.predict(X[test]), truth)


def fit_ensemble(X, y, params: GbdtParams, seed: int = 0, n_jobs: int = 1,
                 feature_names=()) -> TreeEnsemble:
    """Bagged boosters, each scored on its own untouched hold-out rows.

    Every learner permutes the rows with its own stream ``(seed, index)``,
    holds out ``1 - train_fraction`` of them, and fits on a bootstrap
    resample of the rest.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 10:
        raise ValueError("fit_ensemble needs at least 10 rows")
    jobs = range(params.n_learners)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            fitted = list(pool.map(lambda i: _fit_learner(X, y, params, seed, i), jobs))
    else:
        fitted = [_fit_learner(X, y, params, seed, i) for i in jobs]
    r2 = [r for _, r in fitted]
    undefined = sum(1 for r in r2 if not math.isfinite(r))
    if undefined:
        warnings.warn(f"{undefined} learner(s) had a constant hold-out target; R^2 excluded", stacklevel=2)
    return TreeEnsemble([b for b, _ in fitted], r2, params, tuple(feature_names))
