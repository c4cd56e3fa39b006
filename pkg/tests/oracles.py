"""Independent reference implementations used to check the production code.

Each oracle takes the slow, obvious route (enumeration, generic solvers,
explicit loops) and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import optimize, stats


def dcg(ranking, relevant, k):
    return sum(1.0 / math.log2(r + 2) for r, item in enumerate(ranking[:k]) if item in relevant)


def brute_ndcg(ranking, relevant, k):
    """DCG over the best DCG reachable by any ordering of the items involved."""
    pool = list(dict.fromkeys(list(ranking) + sorted(relevant)))
    best = max(dcg(list(p), relevant, k) for p in itertools.permutations(pool))
    return dcg(list(ranking), relevant, k) / best


def brute_hr(ranking, relevant, k):
    return 1 if set(ranking[:k]) & set(relevant) else 0


def ease_columnwise(x: np.ndarray, lam: float) -> np.ndarray:
    """Solve min ||X - XB||^2 + lam ||B||^2 s.t. diag(B) = 0 one column at a time.

    Column j only regresses X[:, j] on the other columns, which is an ordinary
    ridge problem; it is solved with lstsq on the augmented system.
    """
    x = np.asarray(x, dtype=np.float64)
    n_users, n = x.shape
    b = np.zeros((n, n))
    for j in range(n):
        others = [c for c in range(n) if c != j]
        a = np.vstack([x[:, others], math.sqrt(lam) * np.eye(n - 1)])
        y = np.concatenate([x[:, j], np.zeros(n - 1)])
        coef, *_ = np.linalg.lstsq(a, y, rcond=None)
        b[others, j] = coef
    return b


def ease_constrained(x: np.ndarray, lam: float) -> np.ndarray:
    """Same problem through a generic optimizer over the off-diagonal entries."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    mask = ~np.eye(n, dtype=bool)

    def unpack(v):
        b = np.zeros((n, n))
        b[mask] = v
        return b

    def fun(v):
        b = unpack(v)
        r = x - x @ b
        return float((r * r).sum() + lam * (b * b).sum())

    def jac(v):
        b = unpack(v)
        g = -2 * x.T @ (x - x @ b) + 2 * lam * b
        return g[mask]

    res = optimize.minimize(fun, np.zeros(mask.sum()), jac=jac, method="L-BFGS-B", options={"gtol": 1e-14, "ftol": 1e-16, "maxiter": 10000})
    return unpack(res.x)


def cosine(a, b):
    na, nb = math.sqrt(sum(v * v for v in a)), math.sqrt(sum(v * v for v in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(p * q for p, q in zip(a, b)) / (na * nb)


def _top_positive(sims: dict, k: int):
    ranked = sorted(sims, key=lambda c: (-round(sims[c], 12), c))[:k]
    return [c for c in ranked if sims[c] > 0]


def _cosine_matrix(rows):
    n = len(rows)
    sims = [[0.0] * n for _ in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            sims[a][b] = sims[b][a] = cosine(rows[a], rows[b])
    return sims


def userknn_all(r: np.ndarray, k: int) -> np.ndarray:
    """score(u, i) = sum over u's k nearest users v of sim(u, v) * r[v, i], for every user."""
    rows = r.tolist()
    sims = _cosine_matrix(rows)
    out = np.zeros(r.shape)
    for u in range(len(rows)):
        neigh = _top_positive({v: sims[u][v] for v in range(len(rows)) if v != u}, k)
        for i in range(r.shape[1]):
            out[u, i] = sum(sims[u][v] * rows[v][i] for v in neigh)
    return out


def itemknn_all(r: np.ndarray, k: int) -> np.ndarray:
    """score(u, i) = sum over i's k nearest items j of sim(i, j) * r[u, j], for every user."""
    cols = r.T.tolist()
    n = len(cols)
    sims = _cosine_matrix(cols)
    neigh = [_top_positive({j: sims[i][j] for j in range(n) if j != i}, k) for i in range(n)]
    out = np.zeros(r.shape)
    for u in range(r.shape[0]):
        for i in range(n):
            out[u, i] = sum(sims[i][j] * cols[j][u] for j in neigh[i])
    return out


def userknn_scores(r: np.ndarray, u: int, k: int) -> np.ndarray:
    return userknn_all(r, k)[u]


def itemknn_scores(r: np.ndarray, u: int, k: int) -> np.ndarray:
    return itemknn_all(r, k)[u]


def random_hr_at_k(n_unseen: int, n_relevant: int, k: int) -> float:
    """P(at least one of n_relevant items lands in a uniform top-k of n_unseen)."""
    return 1.0 - stats.hypergeom(n_unseen, n_relevant, min(k, n_unseen)).pmf(0)


def central_diff(f, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def round_half_up(x: float, places: int) -> float:
    from decimal import ROUND_HALF_UP, Decimal

    return float(Decimal(repr(x)).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))
