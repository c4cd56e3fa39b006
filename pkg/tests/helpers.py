"""Builders for small synthetic MovieLens-format datasets."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from recmem.dataset import MovieLens, parse_interactions, parse_items, parse_users

FIXTURES = Path(__file__).resolve().parent / "fixtures"
TINY = FIXTURES / "ml_tiny"
REPLAY_CACHE = FIXTURES / "replay" / "cache.jsonl"
RECORDED = FIXTURES / "replay" / "recorded"
REPLAY_MODEL = "oracle-half"

ML1M_ENV = "MOVIELENS_1M_DIR"


def ml1m_dir() -> Path:
    """Directory of the genuine MovieLens-1M files, or a failing assertion explaining how to provide it."""
    value = os.environ.get(ML1M_ENV)
    assert value, (
        f"genuine MovieLens-1M files are required; set {ML1M_ENV} to the directory "
        "holding movies.dat, users.dat and ratings.dat"
    )
    path = Path(value)
    for name in ("movies.dat", "users.dat", "ratings.dat"):
        assert (path / name).is_file(), f"{path / name} not found"
    return path


def lines_bytes(lines) -> bytes:
    return "".join(f"{line}\n" for line in lines).encode("iso-8859-1")


def make_dataset(movies, users, ratings) -> MovieLens:
    return MovieLens(
        parse_items(lines_bytes(movies)),
        parse_users(lines_bytes(users)),
        parse_interactions(lines_bytes(ratings)),
    )


def synthetic_dataset(n_items=30, n_users=12, per_user=(4, 12), seed=0, zipf=1.0) -> MovieLens:
    """Random catalog, profiles and time-stamped ratings with Zipf-skewed item popularity."""
    rng = np.random.default_rng(seed)
    movies = [f"{i}::Film {i} ({1950 + i % 50})::Drama|Comedy" for i in range(1, n_items + 1)]
    ages = [1, 18, 25, 35, 45, 50, 56]
    users = [
        f"{u}::{'MF'[u % 2]}::{ages[u % 7]}::{u % 21}::{10000 + u:05d}" for u in range(1, n_users + 1)
    ]
    weights = 1.0 / np.arange(1, n_items + 1) ** zipf
    weights /= weights.sum()
    ratings = []
    ts = 900000000
    for u in range(1, n_users + 1):
        n = int(rng.integers(per_user[0], per_user[1] + 1))
        for i in rng.choice(n_items, size=min(n, n_items), replace=False, p=weights):
            ts += int(rng.integers(1, 100))
            ratings.append(f"{u}::{i + 1}::{int(rng.integers(1, 6))}::{ts}")
    return make_dataset(movies, users, ratings)
