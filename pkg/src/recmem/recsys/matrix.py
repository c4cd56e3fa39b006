from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..dataset import InteractionLog


@dataclass
class InteractionMatrix:
    """Users x items rating matrix with dense indices.

    Indices follow ascending external id, so a stable sort on scores breaks
    ties towards the lower id.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    ratings: sp.csr_matrix
    _user_pos: dict = field(default_factory=dict, repr=False)
    _item_pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        if np.any(np.diff(self.user_ids) <= 0) or np.any(np.diff(self.item_ids) <= 0):
            raise ValueError("id maps must be strictly increasing")
        self.ratings = sp.csr_matrix(self.ratings, dtype=np.float64)
        self.ratings.sort_indices()
        if self.ratings.shape != (len(self.user_ids), len(self.item_ids)):
            raise ValueError("rating matrix shape does not match id maps")
        self._user_pos = {u: k for k, u in enumerate(self.user_ids.tolist())}
        self._item_pos = {i: k for k, i in enumerate(self.item_ids.tolist())}

    @classmethod
    def from_log(cls, log: InteractionLog, item_ids=None, user_ids=None) -> "InteractionMatrix":
        """Build from a log; ``item_ids`` widens the item axis (e.g. to the whole catalog).

        Duplicate (user, item) pairs keep the last rating in file order.
        """
        users = np.unique(log.user_ids) if user_ids is None else np.unique(np.asarray(user_ids, dtype=np.int64))
        items = np.unique(log.item_ids)
        if item_ids is not None:
            items = np.union1d(items, np.asarray(list(item_ids), dtype=np.int64))
        keep = np.isin(log.user_ids, users)
        rows = np.searchsorted(users, log.user_ids[keep])
        cols = np.searchsorted(items, log.item_ids[keep])
        vals = log.ratings[keep].astype(np.float64)
        # last write wins for duplicate pairs
        flat = rows * len(items) + cols
        _, last = np.unique(flat[::-1], return_index=True)
        pick = len(flat) - 1 - last
        mat = sp.csr_matrix((vals[pick], (rows[pick], cols[pick])), shape=(len(users), len(items)))
        return cls(users, items, mat)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def nnz(self) -> int:
        return self.ratings.nnz

    def user_index(self, user_id: int) -> int | None:
        return self._user_pos.get(int(user_id))

    def item_index(self, item_id: int) -> int | None:
        return self._item_pos.get(int(item_id))

    def binary(self) -> sp.csr_matrix:
        out = self.ratings.copy()
        out.data[:] = 1.0
        return out

    def seen(self, user_idx: int) -> np.ndarray:
        r = self.ratings
        return r.indices[r.indptr[user_idx] : r.indptr[user_idx + 1]]

    def item_counts(self) -> np.ndarray:
        return np.diff(self.ratings.tocsc().indptr).astype(np.float64)


@dataclass
class RankedList:
    user_id: int
    items: list[int]
    scores: list[float]

    def __post_init__(self):
        if len(self.items) != len(self.scores):
            raise ValueError("items and scores differ in length")

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return [(r, i, s) for r, (i, s) in enumerate(zip(self.items, self.scores), start=1)]

    def __len__(self) -> int:
        return len(self.items)


def top_n(scores: np.ndarray, n: int) -> np.ndarray:
    """Per-row indices of the ``n`` best finite scores; ties go to the lower index."""
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :n]
    return order


def mask_seen(scores: np.ndarray, matrix: InteractionMatrix, user_idx: np.ndarray) -> np.ndarray:
    sub = matrix.ratings[user_idx]
    rows = np.repeat(np.arange(len(user_idx)), np.diff(sub.indptr))
    scores[rows, sub.indices] = -np.inf
    return scores
