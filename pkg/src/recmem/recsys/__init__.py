"""Classical baselines and ranking metrics."""

from __future__ import annotations

import numpy as np

from .bpr import BPRMF, TrainingError
from .ease import EASE, solve_ease
from .knn import ItemKNN, UserKNN
from .lightgcn import LightGCN
from .matrix import InteractionMatrix, RankedList, mask_seen, top_n
from .metrics import CUTOFFS, COLUMNS, MetricsTable, hr_at_k, metrics_table, ndcg_at_k
from .simple import MostPop, Random, score_mostpop, score_random

BASELINES = {
    "random": Random,
    "mostpop": MostPop,
    "userknn": UserKNN,
    "itemknn": ItemKNN,
    "bprmf": BPRMF,
    "ease": EASE,
    "lightgcn": LightGCN,
}

# display names, in reporting order
DISPLAY_NAMES = {
    "random": "Random",
    "mostpop": "MostPop",
    "userknn": "UserKNN",
    "itemknn": "ItemKNN",
    "bprmf": "BPRMF",
    "ease": "EASE^R",
    "lightgcn": "LightGCN",
}


def make_model(name: str, **hyper):
    try:
        cls = BASELINES[name]
    except KeyError:
        raise ValueError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}") from None
    return cls(**hyper)


def recommend(
    model,
    matrix: InteractionMatrix,
    user_ids,
    n: int = 50,
    batch: int = 512,
    fallback=None,
) -> dict[int, RankedList]:
    """Top-``n`` unseen items per user.

    Users missing from ``matrix`` or whose scores are all non-positive get
    ``fallback``'s scores instead, if one is given. That is meant for the
    neighbourhood models, whose scores are zero when no neighbour helps.
    """
    out = {}
    known = [(u, matrix.user_index(u)) for u in user_ids]
    cold = [u for u, k in known if k is None]
    warm = [(u, k) for u, k in known if k is not None]
    for start in range(0, len(warm), batch):
        chunk = warm[start : start + batch]
        idx = np.array([k for _, k in chunk], dtype=np.int64)
        scores = np.asarray(model.score(matrix, idx), dtype=np.float64)
        if fallback is not None:
            empty = ~(scores > 0).any(axis=1)
            if empty.any():
                scores[empty] = fallback.score(matrix, idx[empty])
        scores = mask_seen(scores, matrix, idx)
        order = top_n(scores, n)
        for row, (uid, _) in enumerate(chunk):
            picked = order[row]
            vals = scores[row, picked]
            finite = np.isfinite(vals)
            out[uid] = RankedList(
                int(uid), matrix.item_ids[picked[finite]].tolist(), vals[finite].tolist()
            )
    if cold:
        for uid in cold:
            if fallback is None:
                out[uid] = RankedList(int(uid), [], [])
                continue
            scores = np.asarray(fallback.score(matrix, np.zeros(1, dtype=np.int64)), dtype=np.float64)[0]
            picked = top_n(scores, n)[0]
            out[uid] = RankedList(int(uid), matrix.item_ids[picked].tolist(), scores[picked].tolist())
    return out


__all__ = [
    "BASELINES",
    "BPRMF",
    "COLUMNS",
    "CUTOFFS",
    "DISPLAY_NAMES",
    "EASE",
    "InteractionMatrix",
    "ItemKNN",
    "LightGCN",
    "MetricsTable",
    "MostPop",
    "Random",
    "RankedList",
    "TrainingError",
    "UserKNN",
    "hr_at_k",
    "make_model",
    "metrics_table",
    "ndcg_at_k",
    "recommend",
    "score_mostpop",
    "score_random",
    "solve_ease",
]
