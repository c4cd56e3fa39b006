"""Probe and recommendation prompts.

The system/user texts live in ``templates/*.txt`` and are used verbatim;
``{placeholder}`` fields are substituted in a single pass so substituted
values are never re-expanded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

ROLES = ("system", "user", "assistant")
PROMPT_KINDS = ("item_probe", "user_probe", "interaction_probe", "recommendation")
DEFAULT_SHOTS = 2
N_RECOMMENDATIONS = 50

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


class PromptError(ValueError):
    pass


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("recmem").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, **values) -> str:
    def sub(m):
        key = m.group(1)
        if key not in values:
            raise PromptError(f"no value for placeholder {{{key}}}")
        return str(values[key])

    return _PLACEHOLDER.sub(sub, template)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise PromptError(f"unknown role {self.role!r}")
        if not self.content:
            raise PromptError("message content must be non-empty")

    def as_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatPrompt:
    messages: tuple[ChatMessage, ...]
    kind: str
    target_key: str

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise PromptError(f"unknown prompt kind {self.kind!r}")
        msgs = self.messages
        if not msgs or msgs[0].role != "system":
            raise PromptError("first message must be the system message")
        if msgs[-1].role != "user":
            raise PromptError("last message must be a user message")
        if self.kind != "recommendation":
            middle = msgs[1:-1]
            if len(middle) % 2:
                raise PromptError("few-shot examples must come in user/assistant pairs")
            for k, msg in enumerate(middle):
                if msg.role != ("user" if k % 2 == 0 else "assistant"):
                    raise PromptError("few-shot examples must alternate user/assistant")

    @property
    def n_shots(self) -> int:
        return (len(self.messages) - 2) // 2

    def as_dicts(self) -> list[dict]:
        return [m.as_dict() for m in self.messages]


@dataclass(frozen=True)
class ShotSet:
    shots: tuple[tuple[str, str], ...]
    source_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.shots:
            raise PromptError("at least one shot is required")


def select_shots(pool: Sequence[int], target_id: int, n: int = DEFAULT_SHOTS, seed: int = 42) -> list[int]:
    """Pick ``n`` ids from ``pool`` (excluding the target) by a seeded permutation."""
    if n < 1:
        raise PromptError("shot count must be at least 1")
    candidates = [i for i in pool if i != target_id]
    if len(candidates) < n:
        raise PromptError(f"pool has {len(candidates)} non-target entities, need {n}")
    perm = np.random.default_rng(seed).permutation(len(candidates))
    return [candidates[k] for k in perm[:n]]


def entity_shots(records: Iterable, target_id: int, n: int = DEFAULT_SHOTS, seed: int = 42) -> ShotSet:
    """Build a ShotSet of ``(id, raw_value)`` pairs from items or users."""
    by_id = {r.id: r for r in records}
    ids = select_shots(list(by_id), target_id, n, seed)
    return ShotSet(tuple((str(i), by_id[i].raw_value) for i in ids), tuple(ids))


def build_entity_probe(kind: str, shots: ShotSet, target_id: int) -> ChatPrompt:
    if kind not in ("item_probe", "user_probe"):
        raise PromptError(f"not an entity probe kind: {kind!r}")
    if str(target_id) in {key for key, _ in shots.shots}:
        raise PromptError("target appears among its own shots")
    messages = [ChatMessage("system", load_template("entity_system"))]
    for key, value in shots.shots:
        messages.append(ChatMessage("user", f"Input: {key}::"))
        messages.append(ChatMessage("assistant", f"{key}::{value}"))
    messages.append(ChatMessage("user", f"Input: {target_id}::"))
    return ChatPrompt(tuple(messages), kind, str(target_id))


def interaction_shots(user_id: int, history: Sequence[int], k: int = DEFAULT_SHOTS, offset: int = 0) -> ShotSet:
    """Shots are the user's own ``k`` interactions starting at ``offset``."""
    if k < 1:
        raise PromptError("interaction probes need at least one prior interaction")
    if offset < 0 or len(history) < offset + k:
        raise PromptError(f"history of length {len(history)} is too short for {k} shots at offset {offset}")
    window = [int(i) for i in history[offset : offset + k]]
    return ShotSet(tuple((str(user_id), str(i)) for i in window), tuple(window))


def build_interaction_probe(user_id: int, history: Sequence[int], k: int = DEFAULT_SHOTS, offset: int = 0) -> ChatPrompt:
    """Prompt asking for the interaction that follows ``history[offset:offset + k]``.

    The expected answer is ``history[offset + k]`` when it exists; callers
    treat a probe without it as unanswerable.
    """
    shots = interaction_shots(user_id, history, k, offset)
    messages = [ChatMessage("system", load_template("interaction_system"))]
    for key, value in shots.shots:
        messages.append(ChatMessage("user", f"{key}::"))
        messages.append(ChatMessage("assistant", f"{key}::{value}"))
    messages.append(ChatMessage("user", f"{user_id}::"))
    return ChatPrompt(tuple(messages), "interaction_probe", str(user_id))


def build_recommendation_prompt(user_id: int, train_titles: Sequence[str]) -> ChatPrompt:
    if not train_titles:
        raise PromptError(f"user {user_id} has an empty training history")
    user_text = render(
        load_template("recommendation_user"),
        user_id=user_id,
        training_history_str=", ".join(train_titles),
    )
    messages = (
        ChatMessage("system", load_template("recommendation_system")),
        ChatMessage("user", user_text),
    )
    return ChatPrompt(messages, "recommendation", str(user_id))
