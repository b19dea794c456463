"""Client for OpenAI-compatible chat-completion and embedding endpoints.

Deterministic request settings (temperature pinned from config), bounded
retry with exponential backoff, and a content-addressed on-disk response
cache. The trial index participates in the cache key so repeated trials stay
distinct samples even against nondeterministic servers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import httpx

from .corpus import Rubric, ScoreVector
from .errors import (GatewayProtocolError, GatewayUnavailable, ParseFailure,
                     RequestRejected, SlowGradingFailure, ValidationFailure)
from .metrics import consistency, round_half_away
from .promptkit import ParsedGrading, RenderedPrompt, parse_grading_output

log = logging.getLogger(__name__)

ENV_API_KEY = "GATEWAY_API_KEY"
ENV_BASE_URL = "GATEWAY_BASE_URL"


@dataclass(frozen=True)
class LlmRequestConfig:
    endpoint_url: str
    model_name: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    timeout: float = 60.0
    trial_count: int = 3
    embed_chunk_size: int = 100

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.trial_count < 1:
            raise ValueError("trial_count must be >= 1")
        if self.embed_chunk_size < 1:
            raise ValueError("embed_chunk_size must be >= 1")

    @property
    def base_url(self) -> str:
        return os.environ.get(ENV_BASE_URL) or self.endpoint_url


def cache_key(endpoint: str, model: str, temperature: float, payload_text: str,
              trial_index: int = 0) -> str:
    blob = json.dumps(
        [endpoint, model, temperature, payload_text, trial_index],
        ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class TrialOutcome:
    """Everything chat_trials learned about one essay."""

    texts: tuple[str, ...]
    parsed: tuple[ParsedGrading, ...]
    fraction_unchanged: float
    final: ScoreVector
    explanation: str
    warnings: tuple[str, ...] = ()


class Gateway:
    """Shareable across threads; upstream calls bounded by a semaphore."""

    def __init__(self, cache_dir: Union[str, Path], api_key: Optional[str] = None,
                 max_attempts: int = 3, backoff_seconds: float = 0.25,
                 parallelism: int = 4, client: Optional[httpx.Client] = None):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self._client = client or httpx.Client()
        self._upstream_slots = threading.Semaphore(parallelism)
        self._inflight: dict[str, threading.Lock] = {}
        self._inflight_guard = threading.Lock()

    # -- cache ---------------------------------------------------------------

    def _cache_path(self, key: str) -> Path:
        return self.cache_dir / key

    def cache_read(self, key: str) -> Optional[str]:
        path = self._cache_path(key)
        if path.exists():
            return path.read_text("utf-8")
        return None

    def cache_write(self, key: str, body: str) -> None:
        tmp = self._cache_path(key).with_suffix(".tmp")
        tmp.write_text(body, encoding="utf-8")
        tmp.replace(self._cache_path(key))

    def _key_lock(self, key: str) -> threading.Lock:
        with self._inflight_guard:
            lock = self._inflight.get(key)
            if lock is None:
                lock = self._inflight[key] = threading.Lock()
            return lock

    def _release_key(self, key: str) -> None:
        with self._inflight_guard:
            self._inflight.pop(key, None)

    # -- transport -----------------------------------------------------------

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, url: str, payload: dict, timeout: float) -> str:
        """POST with bounded retry; returns the raw response body."""
        last_error: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff_seconds * (2 ** (attempt - 1)))
            try:
                with self._upstream_slots:
                    response = self._client.post(url, json=payload,
                                                 headers=self._headers(),
                                                 timeout=timeout)
            except httpx.HTTPError as e:
                last_error = e
                log.warning("transport failure on attempt %d/%d: %s",
                            attempt + 1, self.max_attempts, e)
                continue
            if 400 <= response.status_code < 500:
                raise RequestRejected(
                    f"{url} returned {response.status_code}: {response.text[:200]}")
            if response.status_code >= 500:
                last_error = GatewayUnavailable(
                    f"{url} returned {response.status_code}")
                log.warning("server error on attempt %d/%d: %s",
                            attempt + 1, self.max_attempts, response.status_code)
                continue
            return response.text
        raise GatewayUnavailable(
            f"{url} unreachable after {self.max_attempts} attempts: {last_error}")

    # -- operations ----------------------------------------------------------

    def chat(self, config: LlmRequestConfig,
             prompt: Union[RenderedPrompt, str], trial_index: int = 0) -> str:
        """Return the completion text; cache hits never touch the network."""
        if isinstance(prompt, RenderedPrompt):
            system, user = prompt.system_or_instruction, prompt.user_payload
        else:
            system, user = "", prompt
        if not (system.strip() or user.strip()):
            raise ValueError("prompt is empty")
        key = cache_key(config.base_url, config.model_name, config.temperature,
                        system + "\x00" + user, trial_index)
        cached = self.cache_read(key)
        if cached is not None:
            return _extract_chat_text(cached)
        lock = self._key_lock(key)
        with lock:
            try:
                cached = self.cache_read(key)
                if cached is not None:
                    return _extract_chat_text(cached)
                messages = []
                if system.strip():
                    messages.append({"role": "system", "content": system})
                messages.append({"role": "user", "content": user})
                payload = {
                    "model": config.model_name,
                    "messages": messages,
                    "temperature": config.temperature,
                    "max_tokens": config.max_output_tokens,
                }
                url = config.base_url.rstrip("/") + "/chat/completions"
                body = self._post(url, payload, config.timeout)
                text = _extract_chat_text(body)  # validate before caching
                self.cache_write(key, body)
                return text
            finally:
                self._release_key(key)

    def embed(self, config: LlmRequestConfig, texts: Sequence[str]) -> list[list[float]]:
        """One vector per input text, uniform dimension, cached per text."""
        if not texts:
            raise ValueError("embed requires a nonempty batch")
        vectors: list[Optional[list[float]]] = [None] * len(texts)
        pending: list[int] = []
        for i, text in enumerate(texts):
            key = cache_key(config.base_url, config.model_name, -1.0,
                            "embed\x00" + text)
            cached = self.cache_read(key)
            if cached is not None:
                vectors[i] = json.loads(cached)
            else:
                pending.append(i)
        url = config.base_url.rstrip("/") + "/embeddings"
        for start in range(0, len(pending), config.embed_chunk_size):
            chunk = pending[start:start + config.embed_chunk_size]
            payload = {"model": config.model_name,
                       "input": [texts[i] for i in chunk]}
            body = self._post(url, payload, config.timeout)
            rows = _extract_embeddings(body, expected=len(chunk))
            for i, vec in zip(chunk, rows):
                vectors[i] = vec
                key = cache_key(config.base_url, config.model_name, -1.0,
                                "embed\x00" + texts[i])
                self.cache_write(key, json.dumps(vec))
        dims = {len(v) for v in vectors}  # type: ignore[arg-type]
        if len(dims) != 1:
            raise GatewayProtocolError(f"inconsistent embedding dimensions: {sorted(dims)}")
        return vectors  # type: ignore[return-value]

    def chat_trials(self, config: LlmRequestConfig, prompt: RenderedPrompt,
                    rubric: Rubric) -> TrialOutcome:
        """Run trial_count chats, parse each, and fuse into a final score.

        Partial trial failures degrade to the surviving trials with warnings;
        only a fully unparsable set of trials raises SlowGradingFailure.
        """
        texts: list[str] = []
        parsed: list[ParsedGrading] = []
        warnings: list[str] = []
        for trial in range(config.trial_count):
            try:
                text = self.chat(config, prompt, trial_index=trial)
            except (GatewayUnavailable, RequestRejected) as e:
                warnings.append(f"trial {trial}: {e}")
                continue
            texts.append(text)
            try:
                parsed.append(parse_grading_output(text, rubric))
            except (ParseFailure, ValidationFailure) as e:
                warnings.append(f"trial {trial}: {type(e).__name__}: {e}")
        if not parsed:
            raise SlowGradingFailure(
                f"all {config.trial_count} trials failed: {'; '.join(warnings)}")
        for warning in warnings:
            log.warning("slow grading degraded: %s", warning)
        if len(parsed) >= 2:
            fraction, _ = consistency([[p.scores.overall] for p in parsed])
        else:
            fraction = 1.0
        final = _average_scores([p.scores for p in parsed], rubric)
        explanation = _pick_explanation(parsed, final)
        return TrialOutcome(texts=tuple(texts), parsed=tuple(parsed),
                            fraction_unchanged=fraction, final=final,
                            explanation=explanation, warnings=tuple(warnings))


def _average_scores(scores: Sequence[ScoreVector], rubric: Rubric) -> ScoreVector:
    """Mean per field, rounded half-away-from-zero.

    Under a sum-constraint rubric the overall is re-derived from the rounded
    dimensions so the fused vector always satisfies the rubric.
    """
    n = len(scores)
    dims = {}
    for d in rubric.dimensions:
        dims[d.name] = round_half_away(sum(s.per_dimension[d.name] for s in scores) / n)
    if rubric.sum_constraint and rubric.dimensions:
        overall = sum(dims.values())
    else:
        overall = round_half_away(sum(s.overall for s in scores) / n)
    return ScoreVector(overall=overall, per_dimension=dims)


def _pick_explanation(parsed: Sequence[ParsedGrading], final: ScoreVector) -> str:
    chosen = next((p for p in parsed if p.scores == final), parsed[0])
    sections = []
    for name, body in chosen.explanations.items():
        if body:
            sections.append(f"{name}: {body}")
    return "\n\n".join(sections)


def _extract_chat_text(body: str) -> str:
    try:
        obj = json.loads(body)
        return obj["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as e:
        raise GatewayProtocolError(f"malformed chat completion body: {e}") from e


def _extract_embeddings(body: str, expected: int) -> list[list[float]]:
    try:
        obj = json.loads(body)
        data = sorted(obj["data"], key=lambda row: row.get("index", 0))
        rows = [[float(x) for x in row["embedding"]] for row in data]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise GatewayProtocolError(f"malformed embeddings body: {e}") from e
    if len(rows) != expected:
        raise GatewayProtocolError(
            f"embedding batch returned {len(rows)} rows, expected {expected}")
    return rows
