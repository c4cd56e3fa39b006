"""LLM-as-recommender evaluation, baseline runs, and model-scale summaries."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .dataset import ItemCatalog, MovieLens, SplitLog
from .llm_gateway import DecodingConfig, Gateway
from .prompt import N_RECOMMENDATIONS, build_recommendation_prompt
from .recsys import BASELINES, InteractionMatrix, MetricsTable, MostPop, RankedList, make_model, metrics_table, recommend
from .titles import normalize_title, split_year

log = logging.getLogger(__name__)

_RANK_LINE = re.compile(r"^\s*(\d+)\.\s+(.+)$")
PARTIAL_THRESHOLD = 0.01


class RankedListParseError(ValueError):
    pass


class IncompleteCoverageError(ValueError):
    pass


def parse_ranked_list(text: str, expected_n: int = N_RECOMMENDATIONS) -> list[str]:
    """Titles from ``Rank. Title`` lines, ordered by rank, first of each rank kept."""
    by_rank: dict[int, str] = {}
    skipped = 0
    for line in text.splitlines():
        m = _RANK_LINE.match(line)
        if not m:
            if line.strip():
                skipped += 1
                log.warning("skipping non-list line: %r", line[:80])
            continue
        rank = int(m.group(1))
        by_rank.setdefault(rank, m.group(2).strip())
    if not by_rank:
        raise RankedListParseError("no 'Rank. Title' lines in response")
    return [by_rank[r] for r in sorted(by_rank)][:expected_n]


class TitleIndex:
    """Exact lookup on normalized titles, plus a year-free fallback when unambiguous."""

    rule = "casefold+ws+article-uninvert+year-fallback/v1"

    def __init__(self, catalog: ItemCatalog):
        self.exact: dict[str, int] = {}
        self.yearless: dict[str, set[int]] = {}
        for item in sorted(catalog, key=lambda it: it.id):
            key = normalize_title(item.title)
            if key in self.exact:
                log.warning("title collision %r: ids %d and %d, keeping %d", key, self.exact[key], item.id, self.exact[key])
            else:
                self.exact[key] = item.id
            core, _ = split_year(key)
            self.yearless.setdefault(core, set()).add(item.id)

    def resolve(self, title: str) -> int | None:
        key = normalize_title(title)
        hit = self.exact.get(key)
        if hit is not None:
            return hit
        core, _ = split_year(key)
        ids = self.yearless.get(core)
        if ids is not None and len(ids) == 1:
            return next(iter(ids))
        return None


def resolve_title(title: str, index: TitleIndex) -> int | None:
    return index.resolve(title)


@dataclass
class EvalRun:
    model: str
    rankings: dict[int, RankedList]
    metrics: MetricsTable
    unresolved: int = 0
    excluded: list[int] = field(default_factory=list)
    partial: bool = False
    fitted: object = field(default=None, repr=False, compare=False)

    def to_dict(self, per_user: bool = True) -> dict:
        out = {
            "model": self.model,
            "n_users": self.metrics.n_users,
            "metrics": self.metrics.values,
            "unresolved": self.unresolved,
            "excluded_users": self.excluded,
            "partial": self.partial,
        }
        if per_user:
            out["per_user"] = {
                str(uid): {
                    "items": self.rankings[uid].items,
                    "scores": self.rankings[uid].scores,
                    "metrics": self.metrics.per_user.get(uid),
                }
                for uid in sorted(self.rankings)
            }
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalRun":
        rankings, per_user = {}, {}
        for key, row in obj.get("per_user", {}).items():
            uid = int(key)
            rankings[uid] = RankedList(uid, list(row["items"]), list(row["scores"]))
            if row.get("metrics") is not None:
                per_user[uid] = row["metrics"]
        table = MetricsTable(dict(obj["metrics"]), obj["n_users"], per_user)
        return cls(obj["model"], rankings, table, obj.get("unresolved", 0), list(obj.get("excluded_users", [])), obj.get("partial", False))


def eval_users(split: SplitLog) -> list[int]:
    return sorted(np.unique(split.test.user_ids).tolist())


def sample_users(split: SplitLog, n: int, seed: int = 42, strata: int = 5) -> list[int]:
    """Seeded sample of test users, stratified by training-history length quantiles."""
    users = eval_users(split)
    if n >= len(users):
        return users
    train_len = dict(zip(*np.unique(split.train.user_ids, return_counts=True)))
    lengths = np.array([train_len.get(u, 0) for u in users])
    edges = np.quantile(lengths, np.linspace(0, 1, strata + 1)[1:-1])
    bins = np.searchsorted(edges, lengths, side="right")
    rng = np.random.default_rng(seed)
    picked = []
    groups = [np.flatnonzero(bins == b) for b in range(strata)]
    quotas = [len(g) * n / len(users) for g in groups]
    take = [int(q) for q in quotas]
    # hand leftover slots to the largest remainders
    for b in sorted(range(strata), key=lambda b: (-(quotas[b] - take[b]), b))[: n - sum(take)]:
        take[b] += 1
    for g, t in zip(groups, take):
        if t:
            picked.extend(rng.choice(g, size=t, replace=False).tolist())
    return sorted(users[k] for k in picked)


def evaluate_llm_as_recommender(
    ds: MovieLens,
    split: SplitLog,
    gateway: Gateway,
    cfg: DecodingConfig | None = None,
    n_rec: int = N_RECOMMENDATIONS,
    users: list[int] | None = None,
    workers: int = 4,
) -> EvalRun:
    """Prompt for 50 titles per user, map them to catalog ids, and score against held-out items.

    Titles that do not resolve are dropped (and counted), as are repeats and
    items already in the user's training history.
    """
    cfg = cfg or DecodingConfig(max_tokens=2048)
    index = TitleIndex(ds.items)
    train_hist = split.train.histories()
    relevant = split.test_items()
    users = eval_users(split) if users is None else sorted(users)

    def run_one(uid: int):
        history = train_hist.get(uid)
        if history is None or not len(history):
            return uid, None, 0, "no training history"
        titles = [ds.items[i].title for i in history.tolist()]
        text, _ = gateway.run(build_recommendation_prompt(uid, titles), cfg)
        try:
            parsed = parse_ranked_list(text, n_rec)
        except RankedListParseError as exc:
            return uid, None, 0, str(exc)
        seen = set(history.tolist())
        items, unresolved = [], 0
        for title in parsed:
            item_id = index.resolve(title)
            if item_id is None:
                unresolved += 1
            elif item_id not in seen:
                seen.add(item_id)
                items.append(item_id)
        items = items[:n_rec]
        return uid, RankedList(uid, items, [1.0 / r for r in range(1, len(items) + 1)]), unresolved, None

    if workers > 1 and len(users) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, users))
    else:
        results = [run_one(u) for u in users]

    rankings, excluded, unresolved = {}, [], 0
    for uid, ranked, n_unres, err in results:
        unresolved += n_unres
        if ranked is None:
            log.warning("user %d excluded: %s", uid, err)
            excluded.append(uid)
        else:
            rankings[uid] = ranked
    table = metrics_table({u: r.items for u, r in rankings.items()}, relevant)
    partial = bool(users) and len(excluded) / len(users) > PARTIAL_THRESHOLD
    return EvalRun(gateway.model_name, rankings, table, unresolved, excluded, partial)


def evaluate_baseline(
    ds: MovieLens,
    split: SplitLog,
    kind: str,
    hyperparams: dict | None = None,
    n_rec: int = N_RECOMMENDATIONS,
    users: list[int] | None = None,
) -> EvalRun:
    """Fit a baseline on the training half and rank unseen catalog items for each test user."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    matrix = InteractionMatrix.from_log(split.train, item_ids=ds.items.ids)
    model = make_model(kind, **(hyperparams or {})).fit(matrix)
    fallback = MostPop().fit(matrix) if kind in ("userknn", "itemknn") else None
    users = eval_users(split) if users is None else sorted(users)
    rankings = recommend(model, matrix, users, n=n_rec, fallback=fallback)
    table = metrics_table({u: r.items for u, r in rankings.items()}, split.test_items())
    return EvalRun(kind, rankings, table, fitted=(model, matrix))


def random_hit_expectation(split: SplitLog, n_items: int, k: int) -> tuple[float, float]:
    """Mean and standard error of HR@k for uniformly random rankings of each user's unseen items.

    A user with ``t`` held-out items among ``N`` unseen candidates hits with
    probability ``1 - C(N - t, k) / C(N, k)``.
    """
    train_len = dict(zip(*np.unique(split.train.user_ids, return_counts=True)))
    probs = []
    for uid, rel in sorted(split.test_items().items()):
        n = n_items - int(train_len.get(uid, 0))
        t = len(rel)
        kk = min(k, n)
        miss = math.comb(n - t, kk) / math.comb(n, kk) if n - t >= kk else 0.0
        probs.append(1.0 - miss)
    p = np.array(probs)
    return float(p.mean()), float(np.sqrt((p * (1 - p)).sum()) / len(p))


def relative_delta(a: float, b: float) -> float:
    """``(a - b) / a``: the relative drop from ``a`` to ``b``."""
    if a == 0:
        raise ZeroDivisionError("relative delta from zero")
    return (a - b) / a


@dataclass
class ScaleSummary:
    mean_memorization: dict[str, float]
    deltas: list[dict]

    def to_dict(self) -> dict:
        return {"mean_memorization": self.mean_memorization, "deltas": self.deltas}


def mean_memorization(coverage: dict[str, float]) -> float:
    missing = [k for k in ("item", "user", "interaction") if k not in coverage]
    if missing:
        raise IncompleteCoverageError(f"missing coverage for {missing}")
    return (coverage["item"] + coverage["user"] + coverage["interaction"]) / 3


def scale_summary(coverages: dict[str, dict[str, float]], metrics: dict[str, MetricsTable] | None = None) -> ScaleSummary:
    """Mean memorization per model and relative drops between every ordered model pair.

    nDCG / HR drops compare the mean over cutoffs 1, 5 and 10.
    """
    means = {model: mean_memorization(cov) for model, cov in sorted(coverages.items())}
    metrics = metrics or {}
    deltas = []
    for a, b in combinations(sorted(means), 2):
        for src, dst in ((a, b), (b, a)):
            row = {"from": src, "to": dst, "memorization": relative_delta(means[src], means[dst])}
            if src in metrics and dst in metrics:
                row["ndcg"] = relative_delta(metrics[src].mean_ndcg(), metrics[dst].mean_ndcg())
                row["hr"] = relative_delta(metrics[src].mean_hr(), metrics[dst].mean_hr())
            deltas.append(row)
    return ScaleSummary(means, deltas)


def flag_inconsistencies(summary: ScaleSummary, reported: dict[str, float], tol: float = 0.005) -> list[str]:
    """Models whose computed mean memorization differs from a reported figure by more than ``tol``."""
    flagged = []
    for model, value in sorted(reported.items()):
        ours = summary.mean_memorization.get(model)
        if ours is not None and abs(ours - value) > tol:
            log.warning("%s: computed mean memorization %.4f, reported %.4f", model, ours, value)
            flagged.append(model)
    return flagged
