"""BPR matrix factorization trained by per-triple SGD.

Prediction is ``x_ui = p_u . q_i + b_i``; each sampled triple (u, i+, j-)
contributes ``-ln sigmoid(x_ui - x_uj)`` plus ``l2 / 2`` times the squared
norm of every parameter it touches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

from .matrix import InteractionMatrix

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class BPRConfig:
    factors: int = 64
    lr: float = 0.05
    l2: float = 0.0025
    l2_bias: float = 0.0025
    epochs: int = 30
    seed: int = 42
    init_std: float = 0.1
    use_bias: bool = True

    def __post_init__(self):
        if self.factors < 1:
            raise ValueError("factors must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def init_factors(n_users: int, n_items: int, factors: int, std: float, seed: int):
    rng = np.random.default_rng([seed, 0])
    user = rng.normal(0.0, std, size=(n_users, factors))
    item = rng.normal(0.0, std, size=(n_items, factors))
    return user, item


class TripleSampler:
    """Each epoch visits every positive pair once in shuffled order, with a uniform negative."""

    def __init__(self, positives: sp.csr_matrix, seed: int):
        pos = sp.csr_matrix(positives)
        pos.sort_indices()
        self.n_items = pos.shape[1]
        counts = np.diff(pos.indptr)
        users = np.repeat(np.arange(pos.shape[0]), counts)
        # users who rated every item have no negatives
        ok = counts[users] < self.n_items
        self.users = users[ok]
        self.items = pos.indices[ok].astype(np.int64)
        self.keys = np.sort(users.astype(np.int64) * self.n_items + pos.indices)
        self.rng = np.random.default_rng([seed, 1])

    def __len__(self) -> int:
        return len(self.users)

    def _is_positive(self, users, items) -> np.ndarray:
        q = users * self.n_items + items
        at = np.searchsorted(self.keys, q)
        at = np.minimum(at, len(self.keys) - 1)
        return self.keys[at] == q

    def epoch(self):
        order = self.rng.permutation(len(self.users))
        u = self.users[order]
        i = self.items[order]
        j = self.rng.integers(0, self.n_items, size=len(u))
        bad = self._is_positive(u, j)
        while bad.any():
            idx = np.flatnonzero(bad)
            j[idx] = self.rng.integers(0, self.n_items, size=len(idx))
            bad[idx] = self._is_positive(u[idx], j[idx])
        return u, i, j


def triple_loss(user, item, bias, u, i, j, l2, l2_bias, use_bias=True) -> float:
    x = user[u] @ (item[i] - item[j])
    if use_bias:
        x += bias[i] - bias[j]
    reg = 0.5 * l2 * (user[u] @ user[u] + item[i] @ item[i] + item[j] @ item[j])
    if use_bias:
        reg += 0.5 * l2_bias * (bias[i] ** 2 + bias[j] ** 2)
    return float(np.logaddexp(0.0, -x) + reg)


def triple_grads(user, item, bias, u, i, j, l2, l2_bias, use_bias=True) -> dict:
    """Analytic gradient of :func:`triple_loss` w.r.t. the touched parameters."""
    x = user[u] @ (item[i] - item[j])
    if use_bias:
        x += bias[i] - bias[j]
    g = 1.0 / (1.0 + math.exp(x))  # sigmoid(-x)
    out = {
        "p_u": -g * (item[i] - item[j]) + l2 * user[u],
        "q_i": -g * user[u] + l2 * item[i],
        "q_j": g * user[u] + l2 * item[j],
    }
    if use_bias:
        out["b_i"] = -g + l2_bias * bias[i]
        out["b_j"] = g + l2_bias * bias[j]
    return out


@njit(cache=True)
def _sgd_epoch(user, item, bias, us, ps, ns, lr, l2, l2_bias, use_bias):
    total = 0.0
    d = user.shape[1]
    for t in range(us.shape[0]):
        u = us[t]
        i = ps[t]
        j = ns[t]
        x = 0.0
        reg = 0.0
        for f in range(d):
            x += user[u, f] * (item[i, f] - item[j, f])
            reg += user[u, f] * user[u, f] + item[i, f] * item[i, f] + item[j, f] * item[j, f]
        reg *= 0.5 * l2
        if use_bias:
            x += bias[i] - bias[j]
            reg += 0.5 * l2_bias * (bias[i] * bias[i] + bias[j] * bias[j])
        if x > 0:
            total += math.log1p(math.exp(-x)) + reg
        else:
            total += -x + math.log1p(math.exp(x)) + reg
        g = 1.0 / (1.0 + math.exp(x))
        for f in range(d):
            pu = user[u, f]
            qi = item[i, f]
            qj = item[j, f]
            user[u, f] = pu - lr * (-g * (qi - qj) + l2 * pu)
            item[i, f] = qi - lr * (-g * pu + l2 * qi)
            item[j, f] = qj - lr * (g * pu + l2 * qj)
        if use_bias:
            bi = bias[i]
            bj = bias[j]
            bias[i] = bi - lr * (-g + l2_bias * bi)
            bias[j] = bj - lr * (g + l2_bias * bj)
    return total


def sgd_epoch(user, item, bias, triples, cfg: BPRConfig) -> float:
    """One pass of per-triple updates in the given order; returns the summed loss."""
    u, i, j = (np.ascontiguousarray(a, dtype=np.int64) for a in triples)
    return _sgd_epoch(user, item, bias, u, i, j, cfg.lr, cfg.l2, cfg.l2_bias, cfg.use_bias)


class BPRMF:
    name = "bprmf"

    def __init__(self, **hyper):
        self.config = BPRConfig(**hyper)
        self.user_factors = self.item_factors = self.item_bias = None
        self.history: list[float] = []

    def fit(self, matrix: InteractionMatrix) -> "BPRMF":
        if matrix.nnz == 0:
            raise TrainingError("empty training matrix")
        cfg = self.config
        user, item = init_factors(matrix.n_users, matrix.n_items, cfg.factors, cfg.init_std, cfg.seed)
        bias = np.zeros(matrix.n_items)
        sampler = TripleSampler(matrix.binary(), cfg.seed)
        self.history = []
        for epoch in range(cfg.epochs):
            loss = sgd_epoch(user, item, bias, sampler.epoch(), cfg) / max(len(sampler), 1)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch + 1}")
            self.history.append(loss)
            log.debug("bprmf epoch %d loss %.5f", epoch + 1, loss)
        self.user_factors, self.item_factors, self.item_bias = user, item, bias
        return self

    def score(self, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
        out = self.user_factors[np.asarray(user_idx)] @ self.item_factors.T
        if self.config.use_bias:
            out += self.item_bias[None, :]
        return out

    def hyperparams(self) -> dict:
        return asdict(self.config)
