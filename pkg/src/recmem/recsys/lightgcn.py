"""LightGCN: linear propagation over the normalized user-item graph, trained with BPR.

The final embedding is the mean of layers ``0..L`` where layer ``l + 1`` is
``A_hat @ layer_l`` and ``A_hat = D^-1/2 A D^-1/2``. Because propagation is
linear and ``A_hat`` symmetric, the gradient w.r.t. the base embeddings is the
same propagation applied to the gradient w.r.t. the final embeddings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .bpr import TrainingError, TripleSampler, init_factors
from .matrix import InteractionMatrix

log = logging.getLogger(__name__)


@dataclass
class LightGCNConfig:
    factors: int = 64
    layers: int = 2
    lr: float = 0.005
    l2: float = 1e-4
    epochs: int = 20
    batch_size: int = 8192
    optimizer: str = "adam"
    seed: int = 42
    init_std: float = 0.1

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def normalized_adjacency(positives: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric ``D^-1/2 A D^-1/2`` for the bipartite graph (users first, then items)."""
    r = sp.csr_matrix(positives, dtype=np.float64)
    adj = sp.bmat([[None, r], [r.T, None]], format="csr")
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    d = sp.diags(inv_sqrt)
    return sp.csr_matrix(d @ adj @ d)


def propagate(adj: sp.csr_matrix, emb: np.ndarray, layers: int) -> np.ndarray:
    """Mean of ``emb, adj @ emb, ..., adj^layers @ emb``.

    The sum accumulates in float64 whatever the dtype of ``adj``.
    """
    acc = np.array(emb, dtype=np.float64)
    cur = emb.astype(adj.dtype, copy=False)
    for _ in range(layers):
        cur = adj @ cur
        acc += cur
    return acc / (layers + 1)


def _scatter(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Row-wise ``out[idx[k]] += vals[k]`` via a sparse product (faster than ``np.add.at``)."""
    s = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_rows, len(idx)))
    return np.asarray(s @ vals)


class _Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class LightGCN:
    name = "lightgcn"

    def __init__(self, **hyper):
        self.config = LightGCNConfig(**hyper)
        self.embeddings = None
        self.history: list[float] = []

    def fit(self, matrix: InteractionMatrix) -> "LightGCN":
        if matrix.nnz == 0:
            raise TrainingError("empty training matrix")
        cfg = self.config
        n_users, n_items = matrix.n_users, matrix.n_items
        user, item = init_factors(n_users, n_items, cfg.factors, cfg.init_std, cfg.seed)
        base = np.vstack([user, item])
        positives = matrix.binary()
        adj = normalized_adjacency(positives)
        # training-time propagation runs in float32; it dominates the cost
        adj32 = adj.astype(np.float32)
        sampler = TripleSampler(positives, cfg.seed)
        adam = _Adam(base.shape, cfg.lr) if cfg.optimizer == "adam" else None
        self.history = []
        for epoch in range(cfg.epochs):
            us, ps, ns = sampler.epoch()
            total = 0.0
            for start in range(0, len(us), cfg.batch_size):
                u = us[start : start + cfg.batch_size]
                i = ps[start : start + cfg.batch_size] + n_users
                j = ns[start : start + cfg.batch_size] + n_users
                total += self._step(base, adj32, u, i, j, adam) * len(u)
            loss = total / max(len(us), 1)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch + 1}")
            self.history.append(loss)
            log.debug("lightgcn epoch %d loss %.5f", epoch + 1, loss)
        self.embeddings = propagate(adj, base, cfg.layers)
        self.base = base
        self.n_users = n_users
        return self

    def _step(self, base, adj, u, i, j, adam) -> float:
        cfg = self.config
        final = propagate(adj, base, cfg.layers) if cfg.layers else base
        fu, fi, fj = final[u], final[i], final[j]
        x = np.einsum("bd,bd->b", fu, fi - fj)
        g = 1.0 / (1.0 + np.exp(x))  # sigmoid(-x)
        n = len(u)
        rows = np.concatenate([u, i, j])
        gw = g[:, None]
        grad = _scatter(len(base), rows, np.vstack([-gw * (fi - fj), -gw * fu, gw * fu]))
        if cfg.layers:
            grad = propagate(adj, grad, cfg.layers)
        grad += _scatter(len(base), rows, cfg.l2 * base[rows])
        grad /= n
        reg = 0.5 * cfg.l2 * float(np.einsum("bd,bd->", base[rows], base[rows]))
        loss = (float(np.logaddexp(0.0, -x).sum()) + reg) / n
        if adam is None:
            base -= cfg.lr * grad
        else:
            adam.step(base, grad)
        return loss

    def score(self, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
        users = self.embeddings[np.asarray(user_idx)]
        items = self.embeddings[self.n_users :]
        return users @ items.T

    def hyperparams(self) -> dict:
        return asdict(self.config)
