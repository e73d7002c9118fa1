"""Completion backends: OpenAI-compatible HTTP client plus a hermetic mock.

Every call, including failures, is appended to a ledger that can be saved
and replayed so pipeline runs are bit-reproducible in tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import ContextOverflowError, LlmError, MockMissError, ReplayDriftError

logger = logging.getLogger(__name__)

API_KEY_ENV = "SQLKB_API_KEY"
ENDPOINT_ENV = "SQLKB_LLM_ENDPOINT"


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass
class RetryPolicy:
    attempts: int = 3
    backoff: float = 1.0  # seconds, doubled per retry


@dataclass
class LlmConfig:
    backend: str = "mock"  # "http" | "mock"
    model: str = ""
    endpoint: str = ""
    api_key: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 120.0
    max_context_chars: int = 200_000
    max_inflight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class LedgerRecord:
    prompt_sha256: str
    prompt: str
    completion: str
    latency: float
    backend: str
    ok: bool = True


class CallLedger:
    """Append-only, thread-safe record of every complete() invocation."""

    def __init__(self) -> None:
        self._records: list[LedgerRecord] = []
        self._lock = threading.Lock()

    def append(self, record: LedgerRecord) -> None:
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> list[LedgerRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def save(self, path: Path | str) -> None:
        """Persist as a line-delimited replay fixture."""
        lines = []
        for r in self.records:
            lines.append(
                json.dumps(
                    {
                        "prompt_sha256": r.prompt_sha256,
                        "prompt": r.prompt,
                        "completion": r.completion,
                        "ok": r.ok,
                    },
                    sort_keys=True,
                )
            )
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_fixture(path: Path | str) -> dict[str, str]:
    """Load a replay fixture as {prompt hash: completion}.

    A record whose stored prompt does not hash to its recorded
    prompt_sha256 indicates a corrupted or hand-edited fixture.
    """
    responses = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        digest = obj["prompt_sha256"]
        if "prompt" in obj and prompt_sha256(obj["prompt"]) != digest:
            raise ReplayDriftError(f"{path}:{n}: prompt does not match its hash")
        if obj.get("ok", True):
            responses[digest] = obj["completion"]
    return responses


def synthetic_completer(prompt: str) -> str:
    """Deterministic stand-in completion, a pure function of the prompt.

    SQL prompts get a trivially executable statement; anything else gets a
    one-line synthetic knowledge sentence. Used by the CLI mock backend
    when no replay fixture is configured.
    """
    digest = prompt_sha256(prompt)
    if prompt.endswith("SQL: "):
        return f"SELECT {int(digest[:4], 16)}"
    return f"synthetic mapping {digest[:8]} refers to code_{digest[8:12]}"


class LlmClient:
    """Uniform completion interface over HTTP and mock backends."""

    def __init__(
        self,
        config: LlmConfig,
        responses: Optional[dict[str, str]] = None,
        fallback: Optional[Callable[[str], str]] = None,
        ledger: Optional[CallLedger] = None,
    ) -> None:
        self.config = config
        self.responses = responses or {}
        self.fallback = fallback
        self.ledger = ledger if ledger is not None else CallLedger()
        self._semaphore = threading.Semaphore(config.max_inflight)

    def complete(self, prompt: str) -> str:
        """Return the completion for a prompt; every call hits the ledger."""
        if not prompt:
            raise LlmError("prompt must be non-empty")
        if len(prompt) > self.config.max_context_chars:
            raise ContextOverflowError(
                f"prompt length {len(prompt)} exceeds "
                f"{self.config.max_context_chars} chars"
            )
        digest = prompt_sha256(prompt)
        start = time.monotonic()
        try:
            if self.config.backend == "mock":
                completion = self._complete_mock(prompt, digest)
            elif self.config.backend == "http":
                with self._semaphore:
                    completion = self._complete_http(prompt)
            else:
                raise LlmError(f"unknown backend {self.config.backend!r}")
        except LlmError:
            self.ledger.append(
                LedgerRecord(
                    prompt_sha256=digest,
                    prompt=prompt,
                    completion="",
                    latency=time.monotonic() - start,
                    backend=self.config.backend,
                    ok=False,
                )
            )
            raise
        self.ledger.append(
            LedgerRecord(
                prompt_sha256=digest,
                prompt=prompt,
                completion=completion,
                latency=time.monotonic() - start,
                backend=self.config.backend,
            )
        )
        return completion

    def _complete_mock(self, prompt: str, digest: str) -> str:
        if digest in self.responses:
            return self.responses[digest]
        if self.fallback is not None:
            return self.fallback(prompt)
        raise MockMissError(f"no canned completion for prompt hash {digest[:12]}")

    def _complete_http(self, prompt: str) -> str:
        import requests

        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        url = self.config.endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        last_error: Exception = LlmError("no attempts made")
        delay = self.config.retry.backoff
        for attempt in range(self.config.retry.attempts):
            try:
                resp = requests.post(
                    url, json=payload, headers=headers, timeout=self.config.timeout
                )
            except requests.Timeout:
                last_error = LlmError(f"timeout after {self.config.timeout}s")
            except requests.RequestException as exc:
                last_error = LlmError(f"request failed: {exc}")
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (KeyError, IndexError, ValueError) as exc:
                        raise LlmError(f"malformed response: {exc}") from exc
                last_error = LlmError(f"http status {resp.status_code}")
                if resp.status_code not in (429,) and resp.status_code < 500:
                    break  # client errors are not retryable
            if attempt + 1 < self.config.retry.attempts:
                logger.warning("llm call failed (%s), retrying in %.1fs", last_error, delay)
                time.sleep(delay)
                delay *= 2
        raise last_error


def replay_client(config: LlmConfig, fixture_path: Path | str) -> LlmClient:
    """Mock client answering strictly from a persisted fixture."""
    return LlmClient(config, responses=load_fixture(fixture_path))
