"""Delivery of chat prompts to model backends.

Three backends share one interface (``complete(prompt, cfg, model_name)``):

* ``http``   -- a chat-completions endpoint (``POST {base_url}/chat/completions``)
* ``replay`` -- answers only from a recorded response cache
* ``oracle`` -- an offline double that has "memorized" a seeded fraction of
  a parsed dataset, so campaign coverage is known in advance

Responses go through an append-only JSONL cache keyed by a digest of
(model name, decoding config, messages).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Callable, Protocol

import httpx
import numpy as np

from .dataset import MovieLens, split_leave_n_out
from .prompt import ChatPrompt
from .titles import display_title

log = logging.getLogger(__name__)

BACKENDS = ("http", "replay", "oracle")
UNKNOWN = "Unknown"
RETRY_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class GatewayError(Exception):
    pass


class GatewayConfigError(GatewayError):
    pass


class CacheMissError(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class ProtocolError(GatewayError):
    pass


class StorageError(GatewayError):
    pass


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 0.0
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    seed: int = 42
    max_tokens: int = 256

    def __post_init__(self):
        if self.temperature < 0:
            raise GatewayConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise GatewayConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens < 1:
            raise GatewayConfigError("max_tokens must be positive")


@dataclass(frozen=True)
class OracleSpec:
    """A simulated model that knows ``round(memorized_fraction * n)`` entities of each kind."""

    memorized_fraction: float
    dataset: MovieLens = field(repr=False, compare=False)
    selection_seed: int = 42
    split_ratio: float = 0.8

    def __post_init__(self):
        if not 0 <= self.memorized_fraction <= 1:
            raise GatewayConfigError("memorized_fraction must be in [0, 1]")


@dataclass(frozen=True)
class ModelEndpoint:
    model_name: str
    backend: str = "http"
    base_url: str | None = None
    auth_token_env: str | None = None
    cache_path: str | Path | None = None
    oracle: OracleSpec | None = None
    timeout: float = 60.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise GatewayConfigError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if self.backend == "http" and not self.base_url:
            raise GatewayConfigError("http backend requires base_url")
        if self.backend == "replay" and not self.cache_path:
            raise GatewayConfigError("replay backend requires a cache path")
        if self.backend == "oracle" and self.oracle is None:
            raise GatewayConfigError("oracle backend requires an OracleSpec")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def cache_key(model_name: str, cfg: DecodingConfig, messages) -> str:
    """SHA-256 over a canonical JSON encoding; sensitive to message order."""
    msgs = [[m["role"], m["content"]] if isinstance(m, dict) else [m.role, m.content] for m in messages]
    payload = {"model": model_name, "decoding": asdict(cfg), "messages": msgs}
    return hashlib.sha256(_canonical(payload)).hexdigest()


def request_body(model_name: str, prompt: ChatPrompt, cfg: DecodingConfig) -> bytes:
    body = {
        "model": model_name,
        "messages": prompt.as_dicts(),
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "seed": cfg.seed,
        "frequency_penalty": cfg.frequency_penalty,
        "presence_penalty": cfg.presence_penalty,
        "max_tokens": cfg.max_tokens,
    }
    return json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class CacheRecord:
    key: str
    response_text: str
    created_at: str
    model: str = ""


class ResponseCache:
    """Append-only JSONL response store; the last record for a key wins."""

    def __init__(self, path: str | Path | None = None, read_only: bool = False):
        self.path = Path(path) if path is not None else None
        self.read_only = read_only
        self._records: dict[str, CacheRecord] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()
        elif read_only and self.path is not None:
            raise StorageError(f"cache file {self.path} does not exist")

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    rec = CacheRecord(obj["key"], obj["response_text"], obj.get("created_at", ""), obj.get("model", ""))
                except (ValueError, KeyError) as exc:
                    raise StorageError(f"{self.path}:{lineno}: bad cache record ({exc})") from None
                self._records[rec.key] = rec

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def get(self, key: str) -> str | None:
        rec = self._records.get(key)
        return None if rec is None else rec.response_text

    def _append_locked(self, rec: CacheRecord):
        if self.path is not None:
            if self.read_only:
                raise StorageError(f"cache {self.path} is read-only")
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(rec), ensure_ascii=False, sort_keys=True) + "\n")
            except OSError as exc:
                raise StorageError(f"cannot write cache {self.path}: {exc}") from exc
        self._records[rec.key] = rec

    def put(self, key: str, text: str, model: str = "") -> CacheRecord:
        rec = CacheRecord(key, text, datetime.now(timezone.utc).isoformat(timespec="seconds"), model)
        with self._lock:
            self._append_locked(rec)
        return rec

    def put_if_absent(self, key: str, text: str, model: str = "") -> tuple[str, bool]:
        """Atomically store ``text`` unless another writer got there first.

        Returns the stored text and whether it was already present.
        """
        with self._lock:
            existing = self._records.get(key)
            if existing is not None:
                return existing.response_text, True
            rec = CacheRecord(key, text, datetime.now(timezone.utc).isoformat(timespec="seconds"), model)
            self._append_locked(rec)
            return text, False


class TokenBucket:
    """Blocking rate limiter: ``rate`` tokens per second, bucket of ``burst``."""

    def __init__(self, rate: float = 2.0, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise GatewayConfigError("rate must be positive")
        self.rate = rate
        self.burst = burst
        self._tokens = float(burst)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


class Backend(Protocol):
    def complete(self, prompt: ChatPrompt, cfg: DecodingConfig, model_name: str) -> str: ...


class HttpBackend:
    def __init__(
        self,
        endpoint: ModelEndpoint,
        transport: httpx.BaseTransport | None = None,
        max_attempts: int = 5,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        limiter: TokenBucket | None = None,
    ):
        self.endpoint = endpoint
        self.url = endpoint.base_url.rstrip("/") + "/chat/completions"
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep
        self.limiter = limiter
        self.n_requests = 0
        self._count_lock = threading.Lock()
        self._client = httpx.Client(transport=transport, timeout=endpoint.timeout)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        env = self.endpoint.auth_token_env
        if env:
            token = os.environ.get(env)
            if not token:
                raise GatewayConfigError(f"environment variable {env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, prompt: ChatPrompt, cfg: DecodingConfig, model_name: str) -> str:
        body = request_body(model_name, prompt, cfg)
        headers = self._headers()
        log.debug("POST %s (Authorization: Bearer ***) %s", self.url, body.decode("utf-8"))
        last_error = None
        for attempt in range(self.max_attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            if self.limiter is not None:
                self.limiter.acquire()
            with self._count_lock:
                self.n_requests += 1
            try:
                resp = self._client.post(self.url, content=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if resp.status_code in RETRY_STATUS:
                last_error = f"HTTP {resp.status_code}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
            log.debug("reply %s", resp.text)
            return parse_reply(resp.content)
        raise TransportError(f"giving up after {self.max_attempts} attempts: {last_error}")


def parse_reply(content: bytes) -> str:
    try:
        obj = json.loads(content)
        text = obj["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed chat-completions reply: {exc!r}") from None
    if not isinstance(text, str):
        raise ProtocolError("reply content is not a string")
    return text


class ReplayBackend:
    def __init__(self, cache: ResponseCache):
        self.cache = cache

    def complete(self, prompt: ChatPrompt, cfg: DecodingConfig, model_name: str) -> str:
        key = cache_key(model_name, cfg, prompt.messages)
        text = self.cache.get(key)
        if text is None:
            raise CacheMissError(f"no recorded response for {prompt.kind} {prompt.target_key} (key {key[:12]})")
        return text


def round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)) // 1)


def memorized_subset(keys, fraction: float, seed: int, stream: int) -> frozenset:
    """Deterministic subset of exactly ``round(fraction * len(keys))`` keys."""
    keys = sorted(keys)
    n_keep = round_half_up(Fraction(str(fraction)) * len(keys))
    perm = np.random.default_rng([seed, stream]).permutation(len(keys))
    return frozenset(keys[k] for k in perm[:n_keep])


_REC_USER = re.compile(r"^User (\d+) has interacted")


class OracleBackend:
    """Answers from ground truth for a memorized subset, wrongly for the rest.

    * item / user probes: the full ``id::raw_value`` record, else ``Unknown``
    * interaction probes: ``uid::next_item`` else a fixed wrong item id
    * recommendation prompts: the user's held-out items first, then items the
      user never interacted with; non-memorized users get only the latter
    """

    def __init__(self, spec: OracleSpec):
        self.spec = spec
        ds = spec.dataset
        rho, seed = spec.memorized_fraction, spec.selection_seed
        self.histories = ds.ratings.histories()
        self.item_ids = sorted(ds.items.ids)
        self.memorized = {
            "item_probe": memorized_subset(ds.items.ids, rho, seed, 0),
            "user_probe": memorized_subset(ds.users.ids, rho, seed, 1),
            "interaction_probe": memorized_subset(self.histories, rho, seed, 2),
        }
        self._split = None
        self._lock = threading.Lock()

    def _split_state(self):
        with self._lock:
            if self._split is None:
                split = split_leave_n_out(self.spec.dataset.ratings, self.spec.split_ratio)
                test = split.test.histories()
                counts = self.spec.dataset.ratings.item_counts()
                popular = sorted(self.item_ids, key=lambda i: (-counts.get(i, 0), i))
                members = memorized_subset(test, self.spec.memorized_fraction, self.spec.selection_seed, 3)
                self._split = (test, popular, members)
            return self._split

    def complete(self, prompt: ChatPrompt, cfg: DecodingConfig, model_name: str) -> str:
        kind = prompt.kind
        if kind in ("item_probe", "user_probe"):
            return self._entity(prompt)
        if kind == "interaction_probe":
            return self._interaction(prompt)
        return self._recommend(prompt)

    def _entity(self, prompt: ChatPrompt) -> str:
        table = self.spec.dataset.items if prompt.kind == "item_probe" else self.spec.dataset.users
        try:
            entity_id = int(prompt.target_key)
        except ValueError:
            return UNKNOWN
        if entity_id not in self.memorized[prompt.kind] or entity_id not in table:
            return UNKNOWN
        return table[entity_id].line

    def _interaction(self, prompt: ChatPrompt) -> str:
        uid = int(prompt.target_key)
        history = self.histories.get(uid)
        shots = [int(m.content.split("::", 1)[1]) for m in prompt.messages[1:-1] if m.role == "assistant"]
        if history is None or not shots:
            return UNKNOWN
        k = len(shots)
        hist = history.tolist()
        offset = next((o for o in range(len(hist) - k) if hist[o : o + k] == shots), None)
        if offset is None:
            return UNKNOWN
        truth = hist[offset + k]
        if uid in self.memorized["interaction_probe"]:
            return f"{uid}::{truth}"
        wrong = next(i for i in self.item_ids if i != truth)
        return f"{uid}::{wrong}"

    def _recommend(self, prompt: ChatPrompt) -> str:
        m = _REC_USER.match(prompt.messages[-1].content)
        if not m:
            return UNKNOWN
        uid = int(m.group(1))
        test, popular, members = self._split_state()
        seen = set(self.histories.get(uid, np.empty(0, dtype=np.int64)).tolist())
        ranked = []
        if uid in members:
            ranked.extend(test[uid].tolist())
        ranked.extend(i for i in popular if i not in seen)
        items = self.spec.dataset.items
        lines = [f"{r}. {display_title(items[i].title)}" for r, i in enumerate(ranked[:50], start=1)]
        return "\n".join(lines)


def make_backend(endpoint: ModelEndpoint, cache: ResponseCache | None = None, **http_kwargs) -> Backend:
    if endpoint.backend == "http":
        return HttpBackend(endpoint, **http_kwargs)
    if endpoint.backend == "replay":
        if cache is None:
            cache = ResponseCache(endpoint.cache_path, read_only=True)
        return ReplayBackend(cache)
    return OracleBackend(endpoint.oracle)


class Gateway:
    """One endpoint plus its cache; safe to share between worker threads."""

    def __init__(self, endpoint: ModelEndpoint, cache: ResponseCache | None = None, backend: Backend | None = None, **http_kwargs):
        self.endpoint = endpoint
        if cache is None and endpoint.cache_path is not None:
            cache = ResponseCache(endpoint.cache_path, read_only=endpoint.backend == "replay")
        self.cache = cache if cache is not None else ResponseCache()
        if backend is None:
            if endpoint.backend == "http" and "limiter" not in http_kwargs:
                http_kwargs["limiter"] = TokenBucket()
            backend = make_backend(endpoint, self.cache, **http_kwargs)
        self.backend = backend
        self.hits = 0
        self.misses = 0
        self._stats_lock = threading.Lock()

    @property
    def model_name(self) -> str:
        return self.endpoint.model_name

    def complete(self, prompt: ChatPrompt, cfg: DecodingConfig) -> str:
        return self.backend.complete(prompt, cfg, self.endpoint.model_name)

    def run(self, prompt: ChatPrompt, cfg: DecodingConfig) -> tuple[str, bool]:
        """Cached completion; returns ``(text, hit)``."""
        key = cache_key(self.endpoint.model_name, cfg, prompt.messages)
        text = self.cache.get(key)
        if text is not None:
            with self._stats_lock:
                self.hits += 1
            return text, True
        text = self.complete(prompt, cfg)
        if self.cache.read_only:
            stored, hit = text, False
        else:
            stored, hit = self.cache.put_if_absent(key, text, self.endpoint.model_name)
        with self._stats_lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1
        return stored, hit


def complete(endpoint: ModelEndpoint, prompt: ChatPrompt, cfg: DecodingConfig) -> str:
    return Gateway(endpoint).complete(prompt, cfg)


def run_with_cache(endpoint: ModelEndpoint, prompt: ChatPrompt, cfg: DecodingConfig, cache: ResponseCache) -> tuple[str, bool]:
    return Gateway(endpoint, cache=cache).run(prompt, cfg)
