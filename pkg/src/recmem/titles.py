"""Title normalization for matching free-text model output to catalog entries.

MovieLens stores leading articles inverted ("Matrix, The (1999)"), often in
front of an alternate-title parenthetical and always before the year.
"""

from __future__ import annotations

import re

ARTICLES = ("the", "a", "an", "l'", "la", "le", "les", "il", "el", "los", "las", "der", "die", "das", "det", "den")

_WS = re.compile(r"\s+")
_YEAR = re.compile(r"^(.*\S)\s*\((\d{4})\)$")
_INVERTED = re.compile(
    r"^(?P<main>.*\S), (?P<art>" + "|".join(re.escape(a) for a in ARTICLES) + r")(?P<alt>\s*\(.*\))?$",
    re.IGNORECASE,
)


def split_year(title: str) -> tuple[str, str | None]:
    m = _YEAR.match(title)
    if not m:
        return title, None
    return m.group(1), m.group(2)


def _uninvert_once(core: str) -> str:
    m = _INVERTED.match(core)
    if not m:
        return core
    art = m.group("art")
    sep = "" if art.endswith("'") else " "
    return f"{art}{sep}{m.group('main')}{m.group('alt') or ''}"


def uninvert(core: str) -> str:
    """Move trailing ", The"-style articles to the front until none remain."""
    while True:
        nxt = _uninvert_once(core)
        if nxt == core:
            return core
        core = nxt


def display_title(title: str) -> str:
    """Human form of a catalog title: "Matrix, The (1999)" -> "The Matrix (1999)"."""
    core, year = split_year(title.strip())
    core = uninvert(core)
    return f"{core} ({year})" if year else core


def normalize_title(title: str) -> str:
    """Case-folded, whitespace-collapsed, article-uninverted key."""
    text = _WS.sub(" ", title.casefold()).strip()
    core, year = split_year(text)
    core = uninvert(core)
    return f"{core} ({year})" if year else core
