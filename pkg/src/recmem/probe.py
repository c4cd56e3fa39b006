"""Memorization campaigns: probe every item, user or interaction and score exact matches."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

from .dataset import MovieLens, PopularityTiers, TIER_NAMES
from .llm_gateway import DecodingConfig, Gateway, GatewayError
from .prompt import DEFAULT_SHOTS, ShotSet, build_entity_probe, build_interaction_probe, select_shots

log = logging.getLogger(__name__)

KINDS = ("item", "user", "interaction")
_SPACES = re.compile(r" {2,}")


def normalize_response(text: str) -> str:
    text = text.strip()
    if text.startswith("Input: "):
        text = text[len("Input: ") :]
    text = text.split("\n", 1)[0].split("\r", 1)[0]
    return _SPACES.sub(" ", text).strip()


def match_record(kind: str, response: str, entity) -> bool:
    """Exact-match verdict for one probe.

    ``entity`` is an Item, a User, or a ``(user_id, next_item_id)`` pair.
    Item answers only need ``id::title``; a trailing genres field is ignored.
    """
    norm = normalize_response(response)
    if kind == "item":
        expected = f"{entity.id}::{entity.title}"
        return norm == expected or norm.startswith(expected + "::")
    if kind == "user":
        return norm == entity.line
    if kind == "interaction":
        user_id, item_id = entity
        return norm == f"{user_id}::{item_id}"
    raise ValueError(f"unknown probe kind {kind!r}")


def expected_text(kind: str, entity) -> str:
    if kind == "item":
        return f"{entity.id}::{entity.title}"
    if kind == "user":
        return entity.line
    return f"{entity[0]}::{entity[1]}"


def coverage(matched: int, total: int) -> float:
    if total <= 0:
        raise ValueError("coverage is undefined for an empty campaign")
    if not 0 <= matched <= total:
        raise ValueError(f"matched={matched} outside [0, {total}]")
    return matched / total


def format_pct(matched: int, total: int) -> str:
    """Percentage with two decimals, rounded half-up from the exact ratio."""
    exact = Fraction(matched * 100, total)
    value = Decimal(exact.numerator) / Decimal(exact.denominator)
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ProbeOutcome:
    entity_kind: str
    entity_key: str
    expected: str
    response: str
    matched: bool
    error: str | None = None


@dataclass
class CoverageReport:
    kind: str
    model: str
    total: int
    matched: int
    per_entity: list[ProbeOutcome] = field(default_factory=list)
    tier_breakdown: dict[str, float] | None = None
    partial: bool = False
    errors: int = 0
    unanswerable: int = 0

    @property
    def coverage(self) -> float:
        return coverage(self.matched, self.total)

    @property
    def coverage_pct(self) -> str:
        return format_pct(self.matched, self.total)

    def to_dict(self) -> dict:
        out = {
            "model": self.model,
            "kind": self.kind,
            "total": self.total,
            "matched": self.matched,
            "coverage": self.coverage if self.total else None,
            "coverage_pct": self.coverage_pct if self.total else None,
            "partial": self.partial,
            "errors": self.errors,
            "unanswerable": self.unanswerable,
            "tier_breakdown": self.tier_breakdown,
            "per_entity": [asdict(o) for o in self.per_entity],
        }
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "CoverageReport":
        return cls(
            kind=obj["kind"],
            model=obj["model"],
            total=obj["total"],
            matched=obj["matched"],
            per_entity=[ProbeOutcome(**o) for o in obj.get("per_entity", [])],
            tier_breakdown=obj.get("tier_breakdown"),
            partial=obj.get("partial", False),
            errors=obj.get("errors", 0),
            unanswerable=obj.get("unanswerable", 0),
        )


@dataclass(frozen=True)
class _Task:
    key: str
    entity: object
    prompt: object


def _entity_tasks(kind, ds: MovieLens, shots: int, seed: int, limit):
    table = ds.items if kind == "item" else ds.users
    prompt_kind = f"{kind}_probe"
    ids = table.sorted_ids()
    if limit is not None:
        ids = ids[:limit]
    pool = table.ids
    for entity_id in ids:
        shot_ids = select_shots(pool, entity_id, shots, seed)
        shot_set = ShotSet(tuple((str(i), table[i].raw_value) for i in shot_ids), tuple(shot_ids))
        yield _Task(str(entity_id), table[entity_id], build_entity_probe(prompt_kind, shot_set, entity_id))


def _interaction_tasks(ds: MovieLens, shots: int, limit, sliding: bool, stats: dict):
    histories = ds.ratings.histories()
    users = sorted(histories)
    if limit is not None:
        users = users[:limit]
    for uid in users:
        hist = histories[uid].tolist()
        if len(hist) < shots + 1:
            stats["unanswerable"] += 1
            continue
        offsets = range(len(hist) - shots) if sliding else (0,)
        for offset in offsets:
            prompt = build_interaction_probe(uid, hist, shots, offset)
            key = str(uid) if not sliding else f"{uid}@{offset}"
            yield _Task(key, (uid, hist[offset + shots]), prompt)


def run_campaign(
    kind: str,
    ds: MovieLens,
    gateway: Gateway,
    cfg: DecodingConfig | None = None,
    shots: int = DEFAULT_SHOTS,
    seed: int = 42,
    limit: int | None = None,
    workers: int = 4,
    partial: bool = False,
    sliding: bool = False,
) -> CoverageReport:
    """Probe every entity of ``kind`` (or the first ``limit`` by id).

    Responses come through the gateway cache, so re-running a campaign only
    queries entities without a stored answer. With ``partial=True`` a failed
    probe is recorded and left out of ``total``; otherwise it aborts the run.
    Interaction campaigns probe the item after each user's first ``shots``
    interactions (every window when ``sliding``); users too short to have an
    answer are skipped.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown probe kind {kind!r}")
    cfg = cfg or DecodingConfig()
    stats = {"unanswerable": 0}
    if kind == "interaction":
        tasks = list(_interaction_tasks(ds, shots, limit, sliding, stats))
    else:
        tasks = list(_entity_tasks(kind, ds, shots, seed, limit))

    def run_one(task: _Task) -> ProbeOutcome:
        expected = expected_text(kind, task.entity)
        try:
            text, _ = gateway.run(task.prompt, cfg)
        except GatewayError as exc:
            if not partial:
                raise
            log.warning("%s %s failed: %s", kind, task.key, exc)
            return ProbeOutcome(kind, task.key, expected, "", False, error=f"{type(exc).__name__}: {exc}")
        return ProbeOutcome(kind, task.key, expected, text, match_record(kind, text, task.entity))

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, tasks))
    else:
        outcomes = [run_one(t) for t in tasks]

    errors = sum(o.error is not None for o in outcomes)
    scored = [o for o in outcomes if o.error is None]
    report = CoverageReport(
        kind=kind,
        model=gateway.model_name,
        total=len(scored),
        matched=sum(o.matched for o in scored),
        per_entity=outcomes,
        partial=errors > 0,
        errors=errors,
        unanswerable=stats["unanswerable"],
    )
    if report.total:
        log.info("%s %s coverage %s%% (%d/%d)", report.model, kind, report.coverage_pct, report.matched, report.total)
    return report


def tier_counts(report: CoverageReport, tiers: PopularityTiers) -> dict[str, tuple[int, int]]:
    if report.kind != "item":
        raise ValueError("tier coverage needs an item campaign")
    counts = {name: [0, 0] for name in TIER_NAMES}
    for o in report.per_entity:
        if o.error is not None:
            continue
        tier = tiers.tier_of(int(o.entity_key))
        if tier is None:
            continue
        counts[tier][0] += int(o.matched)
        counts[tier][1] += 1
    return {name: (m, t) for name, (m, t) in counts.items() if t > 0}


def tier_coverage(report: CoverageReport, tiers: PopularityTiers) -> dict[str, float]:
    """Coverage within each popularity tier, over that tier's own probed items."""
    return {name: coverage(m, t) for name, (m, t) in tier_counts(report, tiers).items()}

