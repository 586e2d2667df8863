"""Reference implementations used only by the tests.

Nothing here imports the engine internals; each oracle is written from the
textbook definition with exact rational arithmetic or explicit matrices.
"""
from __future__ import annotations

import itertools
from fractions import Fraction
from math import factorial

import numpy as np


# --- d=3 binary fixture -------------------------------------------------------

# joint pmf over (x0, x1, x2) in {0,1}^3, no zero cells; keys are outcomes
PMF = {
    (0, 0, 0): Fraction(3, 40), (0, 0, 1): Fraction(5, 40),
    (0, 1, 0): Fraction(2, 40), (0, 1, 1): Fraction(6, 40),
    (1, 0, 0): Fraction(7, 40), (1, 0, 1): Fraction(1, 40),
    (1, 1, 0): Fraction(4, 40), (1, 1, 1): Fraction(12, 40),
}
TABLE = {
    (0, 0, 0): Fraction(0), (0, 0, 1): Fraction(3),
    (0, 1, 0): Fraction(-2), (0, 1, 1): Fraction(7, 2),
    (1, 0, 0): Fraction(1), (1, 0, 1): Fraction(5),
    (1, 1, 0): Fraction(9, 4), (1, 1, 1): Fraction(-1),
}


def pmf_array(pmf=PMF) -> np.ndarray:
    arr = np.zeros((2, 2, 2))
    for k, p in pmf.items():
        arr[k] = float(p)
    return arr


def lookup(table=TABLE):
    """Vectorised lookup-table model for the engine."""
    def f(X):
        X = np.asarray(X, dtype=int)
        return np.array([float(table[tuple(row)]) for row in X])
    return f


def _prob(pmf, fixed: dict[int, int]) -> Fraction:
    return sum((p for k, p in pmf.items() if all(k[j] == v for j, v in fixed.items())), Fraction(0))


def _interventional_value(pmf, table, x, S, components):
    """E[f | do(X_S = x_S)] by summing over every completion of the rest.

    ``components`` is a list of (features, confounded).
    """
    d = len(x)
    rest = [j for j in range(d) if j not in S]
    total = Fraction(0)
    for combo in itertools.product((0, 1), repeat=len(rest)):
        z = list(x)
        for j, v in zip(rest, combo):
            z[j] = v
        weight = Fraction(1)
        before: list[int] = []
        for feats, confounded in components:
            out = [j for j in feats if j in rest]
            if out:
                given = before + ([] if confounded else [j for j in feats if j in S])
                den = _prob(pmf, {j: z[j] for j in given})
                num = _prob(pmf, {j: z[j] for j in out + given})
                weight *= num / den
            before += list(feats)
        total += weight * table[tuple(z)]
    return total


def marginal_value(pmf, table, x, S):
    """Marginal SHAP game: rest drawn from its joint marginal, ignoring x_S."""
    d = len(x)
    rest = [j for j in range(d) if j not in S]
    total = Fraction(0)
    for k, p in pmf.items():
        z = tuple(k[j] if j in rest else x[j] for j in range(d))
        total += p * table[z]
    return total


def conditional_value(pmf, table, x, S):
    """Observational conditional game E[f | X_S = x_S]."""
    d = len(x)
    den = _prob(pmf, {j: x[j] for j in S})
    total = Fraction(0)
    for k, p in pmf.items():
        if all(k[j] == x[j] for j in S):
            total += p * table[k]
    return total / den


def shapley_by_permutations(value, d: int) -> list[Fraction]:
    """Average marginal contribution over all d! player orders."""
    phi = [Fraction(0)] * d
    for perm in itertools.permutations(range(d)):
        S: set[int] = set()
        for j in perm:
            phi[j] += value(frozenset(S | {j})) - value(frozenset(S))
            S.add(j)
    return [p / factorial(d) for p in phi]


def causal_shapley(x, components, pmf=PMF, table=TABLE):
    cache = {}

    def v(S):
        if S not in cache:
            cache[S] = _interventional_value(pmf, table, x, S, components)
        return cache[S]

    return shapley_by_permutations(v, len(x)), v(frozenset())


def marginal_shapley(x, pmf=PMF, table=TABLE):
    return shapley_by_permutations(lambda S: marginal_value(pmf, table, x, S), len(x))


def conditional_shapley(x, pmf=PMF, table=TABLE):
    return shapley_by_permutations(lambda S: conditional_value(pmf, table, x, S), len(x))


# --- random effects -----------------------------------------------------------

def gls_oracle(y, X, groups, sigma2_u, sigma2_e):
    """beta = (X' Omega^-1 X)^-1 X' Omega^-1 y with Omega block-diagonal.

    Each cluster block is sigma2_e I + sigma2_u J, built and inverted directly.
    """
    y = np.asarray(y, float)
    X = np.column_stack([np.ones(len(y)), np.asarray(X, float)])
    A = np.zeros((X.shape[1], X.shape[1]))
    b = np.zeros(X.shape[1])
    for g in np.unique(groups):
        rows = groups == g
        T = rows.sum()
        omega = sigma2_e * np.eye(T) + sigma2_u * np.ones((T, T))
        oi = np.linalg.inv(omega)
        A += X[rows].T @ oi @ X[rows]
        b += X[rows].T @ oi @ y[rows]
    return np.linalg.solve(A, b)


def simulate_panel(rng, G=30, T=10, beta=(1.5, 0.8, -0.5, 0.3), sigma_u=0.7, sigma_e=1.0, ar=0.0):
    """Balanced panel: x1, x3 constant within county, x2 varies over time.

    Errors are a county intercept plus AR(1) noise with coefficient ``ar``.
    Returns the frame and the true coefficient vector (const first).
    """
    import pandas as pd

    x1 = np.repeat(rng.normal(size=G), T)
    x3 = np.repeat(rng.normal(size=G), T)
    x2 = rng.normal(size=G * T)
    u = np.repeat(rng.normal(scale=sigma_u, size=G), T)
    e = np.empty((G, T))
    e[:, 0] = rng.normal(scale=sigma_e / np.sqrt(max(1 - ar ** 2, 1e-12)), size=G)
    for t in range(1, T):
        e[:, t] = ar * e[:, t - 1] + rng.normal(scale=sigma_e, size=G)
    b = np.asarray(beta, float)
    y = b[0] + b[1] * x1 + b[2] * x2 + b[3] * x3 + u + e.reshape(-1)
    frame = pd.DataFrame({
        "fips": np.repeat([f"{g:05d}" for g in range(G)], T),
        "week": np.tile(np.arange(T), G),
        "y": y, "x1": x1, "x2": x2, "x3": x3,
    })
    return frame, b
