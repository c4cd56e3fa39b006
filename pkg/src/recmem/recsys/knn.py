"""Cosine user- and item-neighbourhood models on raw ratings."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .matrix import InteractionMatrix


def _row_normalize(x: sp.csr_matrix) -> sp.csr_matrix:
    norms = np.sqrt(np.asarray(x.multiply(x).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return sp.csr_matrix(sp.diags(inv) @ x)


def _prune(sim: np.ndarray, k: int) -> sp.csr_matrix:
    """Keep each row's ``k`` largest positive entries (ties to the lower column).

    Similarities are compared at 12 decimals so that values equal up to float
    noise count as ties.
    """
    order = np.argsort(-np.round(sim, 12), axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(sim.shape[0]), order.shape[1])
    cols = order.ravel()
    vals = sim[rows, cols]
    keep = vals > 0
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=sim.shape)


class UserKNN:
    """score(u, i) = sum of sim(u, v) * r_vi over u's ``k`` most similar users."""

    name = "userknn"

    def __init__(self, k_neighbors: int = 50):
        self.k_neighbors = k_neighbors

    def fit(self, matrix: InteractionMatrix) -> "UserKNN":
        self.normed = _row_normalize(matrix.ratings)
        return self

    def similarities(self, user_idx: np.ndarray) -> np.ndarray:
        sim = (self.normed[user_idx] @ self.normed.T).toarray()
        sim[np.arange(len(user_idx)), user_idx] = -np.inf
        return sim

    def score(self, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
        user_idx = np.asarray(user_idx)
        weights = _prune(self.similarities(user_idx), self.k_neighbors)
        return np.asarray((weights @ matrix.ratings).todense())


class ItemKNN:
    """score(u, i) = sum over u's rated items j of sim_k(i, j) * r_uj.

    ``sim_k(i, j)`` is the cosine similarity when j is among the ``k`` most
    similar items of i, else zero.
    """

    name = "itemknn"

    def __init__(self, k_neighbors: int = 50, block: int = 1024):
        self.k_neighbors = k_neighbors
        self.block = block

    def fit(self, matrix: InteractionMatrix) -> "ItemKNN":
        cols = _row_normalize(matrix.ratings.T.tocsr())
        n = matrix.n_items
        parts = []
        for start in range(0, n, self.block):
            idx = np.arange(start, min(start + self.block, n))
            sim = (cols[idx] @ cols.T).toarray()
            sim[np.arange(len(idx)), idx] = -np.inf
            parts.append(_prune(sim, self.k_neighbors))
        self.neighbors = sp.vstack(parts).tocsr() if parts else sp.csr_matrix((0, 0))
        return self

    def score(self, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
        return np.asarray((matrix.ratings[np.asarray(user_idx)] @ self.neighbors.T).todense())
