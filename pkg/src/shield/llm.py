"""LLM clients shared by feature extraction and the one-shot baseline.

Three implementations of the same small contract (``complete(prompt) -> str``):

* ``HttpLlmClient``   OpenAI-compatible chat-completions endpoint over HTTP.
* ``ReplayClient``    answers from recorded prompt/response pairs, errors on unseen prompts.
* ``LexiconClient``   deterministic offline mock driven by a term lexicon.

Retries live in :func:`call_with_retry` so every client gets the same policy.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .errors import ConfigError, ReplayMiss, TransientError, TransportError

logger = logging.getLogger(__name__)

API_KEY_ENV = "SHIELD_LLM_API_KEY"
DEFAULT_TEMPERATURE = 0.1
DEFAULT_TOP_P = 1.0
DEFAULT_MAX_RETRIES = 3
BACKOFF_BASE_SECONDS = 1.0


@dataclass
class LlmClient:
    model_id: str = "mock"
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    timeout: float = 30.0
    max_retries: int = DEFAULT_MAX_RETRIES
    calls: int = field(default=0, init=False, compare=False)

    def __post_init__(self):
        self._calls_lock = threading.Lock()

    @property
    def decoding_params(self) -> dict:
        return {"temperature": self.temperature, "top_p": self.top_p}

    def complete(self, prompt: str) -> str:
        with self._calls_lock:
            self.calls += 1
        return self._complete(prompt)

    def _complete(self, prompt: str) -> str:
        raise NotImplementedError


class RateLimiter:
    """Thread-safe minimum spacing between calls. ``None`` rate disables it."""

    def __init__(self, max_per_second: float | None = None, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / max_per_second if max_per_second else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self):
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self._sleep(wait)


def call_with_retry(
    client: LlmClient,
    prompt: str,
    *,
    rate_limiter: RateLimiter | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Call ``client.complete`` retrying transient failures with 1s, 2s, 4s... backoff.

    Raises TransportError once ``client.max_retries`` retries are exhausted.
    Non-transient TransportErrors (auth failures, replay misses) are not retried.
    """
    for attempt in range(client.max_retries + 1):
        if rate_limiter is not None:
            rate_limiter.acquire()
        try:
            return client.complete(prompt)
        except TransientError as exc:
            if attempt == client.max_retries:
                raise TransportError(
                    f"{client.model_id}: giving up after {client.max_retries} retries: {exc}"
                ) from exc
            wait = BACKOFF_BASE_SECONDS * 2**attempt
            logger.warning("transient LLM failure (%s), retry %d/%d in %.0fs",
                           exc, attempt + 1, client.max_retries, wait)
            sleep(wait)
    raise AssertionError("unreachable")


@dataclass
class HttpLlmClient(LlmClient):
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    api_key: str | None = None
    max_output_tokens: int | None = None

    def __post_init__(self):
        super().__post_init__()
        if not self.api_key:
            self.api_key = os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise ConfigError("extraction.api_key", f"live client needs ${API_KEY_ENV}")
        self._http = None

    def _client(self):
        if self._http is None:
            import httpx

            self._http = httpx.Client(timeout=self.timeout)
        return self._http

    def _complete(self, prompt: str) -> str:
        import httpx

        body = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "top_p": self.top_p,
        }
        if self.max_output_tokens:
            body["max_tokens"] = self.max_output_tokens
        try:
            resp = self._client().post(
                self.endpoint, json=body, headers={"Authorization": f"Bearer {self.api_key}"}
            )
        except (httpx.TimeoutException, httpx.NetworkError) as exc:
            raise TransientError(f"{type(exc).__name__}: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body: {resp.text[:200]}") from exc


@dataclass
class ReplayClient(LlmClient):
    """Replays recorded responses keyed by the exact prompt string."""

    responses: Mapping[str, str] = field(default_factory=dict)
    model_id: str = "replay"

    def _complete(self, prompt: str) -> str:
        try:
            return self.responses[prompt]
        except KeyError:
            raise ReplayMiss(f"no recorded response for prompt ({len(prompt)} chars)") from None

    @classmethod
    def from_jsonl(cls, path, **kwargs) -> "ReplayClient":
        """Load ``{"prompt", "response"}`` records.

        A record may carry ``text`` instead of ``prompt``; the feature-extraction
        prompt (template given by the record's ``prompt_version``, default v1)
        is built from it.
        """
        from .extraction import build_feature_prompt, normalize_input

        responses = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                prompt = rec.get("prompt")
                if prompt is None:
                    prompt = build_feature_prompt(normalize_input(rec["text"]), rec.get("prompt_version", "v1"))
                responses[prompt] = rec["response"]
        return cls(responses=responses, **kwargs)


@dataclass
class LexiconClient(LlmClient):
    """Offline mock: answers feature prompts with lexicon matches as JSON.

    One-shot classification prompts get ``1`` if any lexicon term occurs in
    the query text and ``0`` otherwise.
    """

    lexicon: Mapping[str, str] = field(default_factory=dict)
    model_id: str = "lexicon-mock"

    def _complete(self, prompt: str) -> str:
        from .baselines import ONESHOT_MARKER, query_from_oneshot_prompt
        from .extraction import lexicon_extract, text_from_feature_prompt

        if ONESHOT_MARKER in prompt:
            fs = lexicon_extract(query_from_oneshot_prompt(prompt), self.lexicon)
            return "0" if fs.non_hateful else "1"
        fs = lexicon_extract(text_from_feature_prompt(prompt), self.lexicon)
        if fs.non_hateful:
            return "non-hateful"
        return json.dumps({
            "rationales": fs.rationales,
            "derogatory_language": fs.derogatory_language,
            "cuss_words": fs.cuss_words,
        })

    @classmethod
    def from_file(cls, path, **kwargs) -> "LexiconClient":
        return cls(lexicon=load_lexicon(path), **kwargs)


def load_lexicon(path) -> dict[str, str]:
    """Read a ``term -> category`` map from JSON, or from a two-column TSV."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    lexicon = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            term, category = line.split("\t")
            lexicon[term.strip()] = category.strip()
    return lexicon
