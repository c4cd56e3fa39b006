"""Binary-relevance HR@k and nDCG@k, averaged into a per-model metrics table."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

CUTOFFS = (1, 5, 10)
COLUMNS = tuple(f"{m}@{k}" for k in CUTOFFS for m in ("HR", "nDCG"))


def hr_at_k(ranked: Sequence[int], relevant, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(any(item in relevant for item in ranked[:k]))


def ndcg_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("nDCG is undefined without relevant items")
    dcg = sum(1.0 / math.log2(r + 1) for r, item in enumerate(ranked[:k], start=1) if item in relevant)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


@dataclass
class MetricsTable:
    values: dict[str, float]
    n_users: int
    per_user: dict[int, dict[str, float]] = field(default_factory=dict, repr=False)

    def __getitem__(self, column: str) -> float:
        return self.values[column]

    def mean_hr(self) -> float:
        return sum(self.values[f"HR@{k}"] for k in CUTOFFS) / len(CUTOFFS)

    def mean_ndcg(self) -> float:
        return sum(self.values[f"nDCG@{k}"] for k in CUTOFFS) / len(CUTOFFS)


def user_metrics(ranked: Sequence[int], relevant) -> dict[str, float]:
    out = {}
    for k in CUTOFFS:
        out[f"HR@{k}"] = float(hr_at_k(ranked, relevant, k))
        out[f"nDCG@{k}"] = ndcg_at_k(ranked, relevant, k)
    return out


def metrics_table(rankings: Mapping[int, Sequence[int]], relevant: Mapping[int, set]) -> MetricsTable:
    """Average per-user metrics over users that have both a ranking and relevant items.

    Users are folded in ascending id order so the floating-point result does
    not depend on how the rankings were produced.
    """
    per_user = {}
    for uid in sorted(rankings):
        rel = relevant.get(uid)
        if not rel:
            continue
        per_user[uid] = user_metrics(list(rankings[uid]), rel)
    n = len(per_user)
    values = {c: (math.fsum(m[c] for m in per_user.values()) / n if n else 0.0) for c in COLUMNS}
    return MetricsTable(values, n, per_user)
