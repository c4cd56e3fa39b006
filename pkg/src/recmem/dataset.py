"""MovieLens-1M parsing, popularity tiers and the leave-n-out split.

All three raw files use ``::`` as field separator and ISO-8859-1 text.
Every parsed record keeps the exact on-disk substring after ``id::`` so
probes can compare model output against the bytes in the file.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Iterator, Union

import numpy as np

log = logging.getLogger(__name__)

ENCODING = "iso-8859-1"
SEP = "::"
AGE_BUCKETS = frozenset({1, 18, 25, 35, 45, 50, 56})
GENDERS = frozenset({"M", "F"})

ByteSource = Union[bytes, bytearray, BinaryIO]


class DatasetParseError(ValueError):
    """Raised for a malformed record; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None, source: str | None = None):
        self.lineno = lineno
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Item:
    id: int
    title: str
    genres: tuple[str, ...]
    raw_value: str

    @property
    def line(self) -> str:
        return f"{self.id}{SEP}{self.raw_value}"


@dataclass(frozen=True)
class User:
    id: int
    gender: str
    age: int
    occupation: int
    zip: str
    raw_value: str

    @property
    def line(self) -> str:
        return f"{self.id}{SEP}{self.raw_value}"


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: int
    timestamp: int

    @property
    def line(self) -> str:
        return SEP.join(map(str, (self.user_id, self.item_id, self.rating, self.timestamp)))


class _Table:
    """Ordered, id-indexed collection shared by the catalog and user table."""

    kind = "record"

    def __init__(self, records=()):
        self._records = list(records)
        self._by_id = {}
        for rec in self._records:
            if rec.id in self._by_id:
                raise DatasetParseError(f"duplicate {self.kind} id {rec.id}")
            self._by_id[rec.id] = rec

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, entity_id: int):
        return self._by_id[entity_id]

    def __contains__(self, entity_id) -> bool:
        return entity_id in self._by_id

    def get(self, entity_id: int, default=None):
        return self._by_id.get(entity_id, default)

    @property
    def count(self) -> int:
        return len(self._records)

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self._records]

    def sorted_ids(self) -> list[int]:
        return sorted(self._by_id)

    def serialize(self, newline: str = "\n") -> bytes:
        return "".join(r.line + newline for r in self._records).encode(ENCODING)


class ItemCatalog(_Table):
    kind = "item"

    def __iter__(self) -> Iterator[Item]:
        return iter(self._records)

    def __getitem__(self, item_id: int) -> Item:
        return self._by_id[item_id]


class UserTable(_Table):
    kind = "user"

    def __iter__(self) -> Iterator[User]:
        return iter(self._records)

    def __getitem__(self, user_id: int) -> User:
        return self._by_id[user_id]


class InteractionLog:
    """Column-oriented rating log; file order is preserved."""

    def __init__(self, user_ids=(), item_ids=(), ratings=(), timestamps=()):
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.ratings = np.asarray(ratings, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        n = len(self.user_ids)
        if not (len(self.item_ids) == len(self.ratings) == len(self.timestamps) == n):
            raise ValueError("interaction columns differ in length")

    @classmethod
    def from_records(cls, records) -> "InteractionLog":
        records = list(records)
        if not records:
            return cls()
        cols = list(zip(*((r.user_id, r.item_id, r.rating, r.timestamp) for r in records)))
        return cls(*cols)

    def __len__(self) -> int:
        return len(self.user_ids)

    def __getitem__(self, idx: int) -> Interaction:
        return Interaction(
            int(self.user_ids[idx]),
            int(self.item_ids[idx]),
            int(self.ratings[idx]),
            int(self.timestamps[idx]),
        )

    def __iter__(self) -> Iterator[Interaction]:
        for row in zip(
            self.user_ids.tolist(), self.item_ids.tolist(), self.ratings.tolist(), self.timestamps.tolist()
        ):
            yield Interaction(*row)

    @property
    def count(self) -> int:
        return len(self)

    def take(self, index) -> "InteractionLog":
        return InteractionLog(
            self.user_ids[index], self.item_ids[index], self.ratings[index], self.timestamps[index]
        )

    def temporal_order(self) -> np.ndarray:
        """Row indices grouped by user (ascending), then timestamp, then item id."""
        return np.lexsort((self.item_ids, self.timestamps, self.user_ids))

    def histories(self) -> dict[int, np.ndarray]:
        """Per-user item ids in temporal order."""
        if len(self) == 0:
            return {}
        order = self.temporal_order()
        users = self.user_ids[order]
        items = self.item_ids[order]
        starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
        ends = np.r_[starts[1:], len(users)]
        return {int(users[s]): items[s:e] for s, e in zip(starts, ends)}

    def item_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.item_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def serialize(self, newline: str = "\n") -> bytes:
        return "".join(it.line + newline for it in self).encode(ENCODING)


def _lines(stream: ByteSource, source: str | None) -> Iterator[tuple[int, str]]:
    data = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    # latin-1 maps every byte, so decoding itself cannot fail; keep strict anyway
    text = bytes(data).decode(ENCODING, errors="strict")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        if line.endswith("\r"):
            line = line[:-1]
        if not line.strip():
            continue
        yield lineno, line


def _int(value: str, what: str, lineno: int, source: str | None) -> int:
    try:
        return int(value)
    except ValueError:
        raise DatasetParseError(f"non-integer {what} {value!r}", lineno, source) from None


def parse_items(stream: ByteSource, source: str | None = None) -> ItemCatalog:
    """Parse ``MovieID::Title::Genres`` records (genres pipe-separated)."""
    items = []
    seen = set()
    for lineno, line in _lines(stream, source):
        first = line.find(SEP)
        last = line.rfind(SEP)
        if first < 0 or last == first:
            raise DatasetParseError("expected 3 '::'-separated fields", lineno, source)
        item_id = _int(line[:first], "MovieID", lineno, source)
        title = line[first + 2 : last]
        genres = line[last + 2 :]
        if not title:
            raise DatasetParseError("empty title", lineno, source)
        if not genres:
            raise DatasetParseError("empty genres", lineno, source)
        if item_id in seen:
            raise DatasetParseError(f"duplicate MovieID {item_id}", lineno, source)
        seen.add(item_id)
        items.append(Item(item_id, title, tuple(genres.split("|")), line[first + 2 :]))
    return ItemCatalog(items)


def parse_users(stream: ByteSource, source: str | None = None) -> UserTable:
    """Parse ``UserID::Gender::Age::Occupation::Zip-code`` records."""
    users = []
    seen = set()
    for lineno, line in _lines(stream, source):
        parts = line.split(SEP)
        if len(parts) != 5:
            raise DatasetParseError(f"expected 5 '::'-separated fields, got {len(parts)}", lineno, source)
        uid = _int(parts[0], "UserID", lineno, source)
        gender = parts[1]
        if gender not in GENDERS:
            raise DatasetParseError(f"invalid gender {gender!r}", lineno, source)
        age = _int(parts[2], "Age", lineno, source)
        if age not in AGE_BUCKETS:
            raise DatasetParseError(f"age code {age} not in {sorted(AGE_BUCKETS)}", lineno, source)
        occupation = _int(parts[3], "Occupation", lineno, source)
        if uid in seen:
            raise DatasetParseError(f"duplicate UserID {uid}", lineno, source)
        seen.add(uid)
        users.append(User(uid, gender, age, occupation, parts[4], line[len(parts[0]) + 2 :]))
    return UserTable(users)


def parse_interactions(stream: ByteSource, source: str | None = None) -> InteractionLog:
    """Parse ``UserID::MovieID::Rating::Timestamp`` records."""
    users, items, ratings, stamps = [], [], [], []
    for lineno, line in _lines(stream, source):
        parts = line.split(SEP)
        if len(parts) != 4:
            raise DatasetParseError(f"expected 4 '::'-separated fields, got {len(parts)}", lineno, source)
        rating = _int(parts[2], "Rating", lineno, source)
        if not 1 <= rating <= 5:
            raise DatasetParseError(f"rating {rating} outside [1, 5]", lineno, source)
        users.append(_int(parts[0], "UserID", lineno, source))
        items.append(_int(parts[1], "MovieID", lineno, source))
        ratings.append(rating)
        stamps.append(_int(parts[3], "Timestamp", lineno, source))
    return InteractionLog(users, items, ratings, stamps)


@dataclass
class MovieLens:
    items: ItemCatalog
    users: UserTable
    ratings: InteractionLog
    root: Path | None = None

    def summary(self) -> dict:
        return {
            "items": self.items.count,
            "users": self.users.count,
            "interactions": self.ratings.count,
            "rated_items": len(np.unique(self.ratings.item_ids)),
        }


def load_movielens(root: str | Path) -> MovieLens:
    """Read ``movies.dat``, ``users.dat`` and ``ratings.dat`` from ``root``."""
    root = Path(root)
    parsed = {}
    for name, parser in (("movies.dat", parse_items), ("users.dat", parse_users), ("ratings.dat", parse_interactions)):
        path = root / name
        with open(path, "rb") as fh:
            parsed[name] = parser(fh, source=str(path))
    ds = MovieLens(parsed["movies.dat"], parsed["users.dat"], parsed["ratings.dat"], root)
    log.info("loaded %s: %s", root, ds.summary())
    return ds


def _fraction(ratio: float) -> Fraction:
    # decimal reading of the ratio keeps ceil(0.8 * 15) == 12
    return Fraction(str(ratio))


@dataclass
class SplitLog:
    train: InteractionLog
    test: InteractionLog
    ratio: float
    per_user_order: str = "temporal"
    seed: int | None = None

    def train_histories(self) -> dict[int, np.ndarray]:
        return self.train.histories()

    def test_items(self) -> dict[int, set[int]]:
        return {u: set(items.tolist()) for u, items in self.test.histories().items()}


def split_leave_n_out(
    log_: InteractionLog, ratio: float = 0.8, order: str = "temporal", seed: int = 42
) -> SplitLog:
    """Per-user holdout: the first ``ceil(ratio * n_u)`` interactions train, the rest test.

    ``order="temporal"`` sorts each history by timestamp (ties by item id);
    ``order="random"`` uses a seeded shuffle instead, for sensitivity checks.
    Both halves keep the input's file order.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if order not in ("temporal", "random"):
        raise ValueError(f"unknown split order {order!r}")
    n = len(log_)
    if n == 0:
        return SplitLog(InteractionLog(), InteractionLog(), ratio, order, seed)

    if order == "temporal":
        perm = log_.temporal_order()
    else:
        keys = np.random.default_rng(seed).random(n)
        perm = np.lexsort((keys, log_.user_ids))
    users = log_.user_ids[perm]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    sizes = np.diff(np.r_[starts, n])
    position = np.arange(n) - np.repeat(starts, sizes)

    frac = _fraction(ratio)
    n_train = -((-frac.numerator * sizes) // frac.denominator)  # exact ceil
    in_train = np.empty(n, dtype=bool)
    in_train[perm] = position < np.repeat(n_train, sizes)
    return SplitLog(log_.take(in_train), log_.take(~in_train), ratio, order, seed)


TIER_NAMES = ("top", "middle", "bottom")


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


@dataclass
class PopularityTiers:
    top: frozenset[int]
    middle: frozenset[int]
    bottom: frozenset[int]
    counts: dict[int, int]
    ranking: list[int] = field(default_factory=list)
    fraction: float = 0.2

    def tier_of(self, item_id: int) -> str | None:
        for name in TIER_NAMES:
            if item_id in getattr(self, name):
                return name
        return None

    def as_dict(self) -> dict[str, frozenset[int]]:
        return {name: getattr(self, name) for name in TIER_NAMES}

    def boundaries(self) -> dict[str, dict]:
        out = {}
        for name in TIER_NAMES:
            ids = getattr(self, name)
            counts = [self.counts.get(i, 0) for i in ids]
            out[name] = {
                "size": len(ids),
                "min_count": min(counts) if counts else None,
                "max_count": max(counts) if counts else None,
            }
        return out


def popularity_tiers(log_: InteractionLog, catalog: ItemCatalog, fraction: float = 0.2) -> PopularityTiers:
    """Split the catalog into top / middle / bottom popularity bands.

    Items are ranked by interaction count (descending, ties by ascending id);
    items never rated count as zero and so sit at the bottom. The band size is
    ``round(fraction * n)`` with ``n`` the number of catalog items that occur
    in the log; top and bottom take that many items from each end of the
    ranking, the middle band is the same-sized window centred on the median
    rank. A non-empty catalog always gets at least one top item.
    """
    log_counts = log_.item_counts()
    counts = {i: log_counts.get(i, 0) for i in catalog.ids}
    ranking = sorted(counts, key=lambda i: (-counts[i], i))
    n = len(ranking)
    rated = sum(1 for i in ranking if counts[i] > 0)
    size = _round_half_up(_fraction(fraction) * rated)
    n_top = min(n, max(size, 1)) if n else 0
    n_bottom = min(size, n - n_top)
    n_mid = min(size, n - n_top - n_bottom)
    start = (n - n_mid) // 2
    start = min(max(start, n_top), n - n_bottom - n_mid)
    return PopularityTiers(
        top=frozenset(ranking[:n_top]),
        middle=frozenset(ranking[start : start + n_mid]),
        bottom=frozenset(ranking[n - n_bottom :]) if n_bottom else frozenset(),
        counts=counts,
        ranking=ranking,
        fraction=fraction,
    )


def dataset_summary(ds: MovieLens, tiers: PopularityTiers | None = None) -> dict:
    """Counts plus tier boundaries, for the ``tiers`` report."""
    summary = ds.summary()
    if tiers is not None:
        summary["tiers"] = tiers.boundaries()
    return summary
