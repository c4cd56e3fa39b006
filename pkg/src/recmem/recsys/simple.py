from __future__ import annotations

import numpy as np

from .matrix import InteractionMatrix


def score_random(user_id: int, n_items: int, seed: int = 42) -> np.ndarray:
    """Uniform scores, reproducible per (user, seed) and independent across users."""
    return np.random.default_rng([seed, int(user_id)]).random(n_items)


def score_mostpop(matrix: InteractionMatrix) -> np.ndarray:
    """Training interaction count per item."""
    return matrix.item_counts()


class Random:
    name = "random"

    def __init__(self, seed: int = 42):
        self.seed = seed

    def fit(self, matrix: InteractionMatrix) -> "Random":
        return self

    def score(self, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
        ids = matrix.user_ids[user_idx]
        return np.vstack([score_random(u, matrix.n_items, self.seed) for u in ids])


class MostPop:
    name = "mostpop"

    def fit(self, matrix: InteractionMatrix) -> "MostPop":
        if matrix.nnz == 0:
            raise ValueError("MostPop needs a non-empty training matrix")
        self.counts = score_mostpop(matrix)
        return self

    def score(self, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
        return np.tile(self.counts, (len(user_idx), 1))
