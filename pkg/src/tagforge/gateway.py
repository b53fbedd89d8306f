"""Uniform interface to the architect and annotator LLMs.

A :class:`Gateway` owns one backend per role, a thread-safe call ledger, a
retry policy for transient transport failures, an optional global call
budget, and an optional transcript log. ``complete_parsed`` layers the
re-ask policy for malformed responses on top.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import requests

from .prompts import FORMAT_REMINDER
from .protocol import ProtocolError


class AgentRole(str, enum.Enum):
    ARCHITECT = "architect"
    ANNOTATOR = "annotator"


class GatewayError(RuntimeError):
    pass


class TransientBackendError(GatewayError):
    """Retryable transport failure (5xx, timeouts, connection errors)."""


class BackendRefusalError(GatewayError):
    """Non-retryable backend failure (4xx or explicit refusal)."""


class TransportExhaustedError(GatewayError):
    """All transport retries failed."""


class BudgetExhaustedError(GatewayError):
    """The configured call budget has been spent."""


@dataclass
class CallStats:
    calls: int = 0
    retries: int = 0
    token_estimate: int = 0


class CallLedger:
    """Thread-safe, monotone counters per (role, template_id)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._stats: dict[tuple[str, str], CallStats] = {}

    def record_call(self, role: AgentRole, template_id: str,
                    prompt: str, response: str) -> None:
        with self._lock:
            stats = self._stats.setdefault((role.value, template_id), CallStats())
            stats.calls += 1
            stats.token_estimate += (len(prompt) + len(response)) // 4

    def record_retry(self, role: AgentRole, template_id: str) -> None:
        with self._lock:
            stats = self._stats.setdefault((role.value, template_id), CallStats())
            stats.retries += 1

    def calls(self, role: AgentRole | None = None,
              template_id: str | None = None) -> int:
        with self._lock:
            return sum(
                s.calls for (r, t), s in self._stats.items()
                if (role is None or r == role.value)
                and (template_id is None or t == template_id)
            )

    def retries(self, role: AgentRole | None = None,
                template_id: str | None = None) -> int:
        with self._lock:
            return sum(
                s.retries for (r, t), s in self._stats.items()
                if (role is None or r == role.value)
                and (template_id is None or t == template_id)
            )

    def total_calls(self) -> int:
        return self.calls()

    def snapshot(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {
                f"{r}/{t}": {"calls": s.calls, "retries": s.retries,
                             "token_estimate": s.token_estimate}
                for (r, t), s in sorted(self._stats.items())
            }

    def save_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for key, row in self.snapshot().items():
                role, template_id = key.split("/", 1)
                fh.write(json.dumps({"role": role, "template_id": template_id,
                                     **row}) + "\n")

    def load_jsonl(self, path: str | Path) -> None:
        """Merge previously persisted counters (used on resume)."""
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                self._merge(row["role"], row["template_id"], row)

    def load_snapshot(self, snapshot: dict[str, dict[str, int]]) -> None:
        """Merge a snapshot() dict (used when resuming from a checkpoint)."""
        for key, row in snapshot.items():
            role, template_id = key.split("/", 1)
            self._merge(role, template_id, row)

    def _merge(self, role: str, template_id: str, row: dict) -> None:
        with self._lock:
            stats = self._stats.setdefault((role, template_id), CallStats())
            stats.calls += int(row.get("calls", 0))
            stats.retries += int(row.get("retries", 0))
            stats.token_estimate += int(row.get("token_estimate", 0))


@dataclass
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int | None = None


class HttpBackend:
    """Generic chat-completion-style JSON-over-HTTP backend.

    Request body: ``{"model": ..., "messages": [{"role": "user", "content":
    ...}], "temperature": ...}``. The first candidate's text is returned;
    both OpenAI-style ``choices`` and Gemini-style ``candidates`` layouts are
    accepted. The credential is read from the environment variable named by
    ``auth_env`` and sent as a bearer token.
    """

    def __init__(self, endpoint: str, model: str, auth_env: str = "LLM_API_KEY",
                 timeout: float = 60.0, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.model = model
        self.auth_env = auth_env
        self.timeout = timeout
        self._session = session or requests.Session()

    def generate(self, prompt: str, decode: DecodeParams) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {"model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": decode.temperature}
        if decode.max_tokens is not None:
            body["max_tokens"] = decode.max_tokens
        try:
            resp = self._session.post(self.endpoint, json=body,
                                      headers=headers, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendRefusalError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return _first_candidate_text(resp.json())


def _first_candidate_text(payload: dict) -> str:
    choices = payload.get("choices")
    if isinstance(choices, list) and choices:
        message = choices[0].get("message", {})
        if isinstance(message, dict) and isinstance(message.get("content"), str):
            return message["content"]
        if isinstance(choices[0].get("text"), str):
            return choices[0]["text"]
    candidates = payload.get("candidates")
    if isinstance(candidates, list) and candidates:
        content = candidates[0].get("content", {})
        parts = content.get("parts") if isinstance(content, dict) else None
        if isinstance(parts, list) and parts and isinstance(parts[0].get("text"), str):
            return parts[0]["text"]
    if isinstance(payload.get("text"), str):
        return payload["text"]
    raise BackendRefusalError("no candidate text in backend response")


class Gateway:
    """Role-routed LLM transport with ledger, budget, and bounded fan-out."""

    def __init__(self, backends: dict[AgentRole, object],
                 max_retries: int = 3, backoff_base: float = 0.5,
                 max_calls: int | None = None, max_inflight: int = 16,
                 transcript_path: str | Path | None = None,
                 default_decode: DecodeParams | None = None,
                 ledger: CallLedger | None = None):
        self._backends = dict(backends)
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.max_calls = max_calls
        self.ledger = ledger or CallLedger()
        self._inflight = threading.Semaphore(max_inflight)
        self._budget_lock = threading.Lock()
        self._calls_admitted = 0
        self._transcript_path = Path(transcript_path) if transcript_path else None
        self._transcript_lock = threading.Lock()
        self._default_decode = default_decode or DecodeParams()

    def complete(self, role: AgentRole, prompt: str, template_id: str,
                 decode: DecodeParams | None = None) -> str:
        """One LLM call. Retries transient failures with exponential backoff.

        Raises :class:`BudgetExhaustedError` before issuing a call that would
        exceed ``max_calls`` (the ledger then still shows exactly the budget).
        """
        backend = self._backends.get(role)
        if backend is None:
            raise GatewayError(f"no backend configured for role {role.value!r}")
        decode = decode or self._default_decode
        with self._budget_lock:
            # Budget counts calls admitted by this gateway instance, so a
            # resumed run with a reloaded ledger starts from a fresh budget.
            if self.max_calls is not None and self._calls_admitted >= self.max_calls:
                raise BudgetExhaustedError(
                    f"call budget of {self.max_calls} exhausted")
            self._calls_admitted += 1
        with self._inflight:
            started = time.monotonic()
            attempt = 0
            while True:
                try:
                    response = backend.generate(prompt, decode)
                    break
                except TransientBackendError as exc:
                    attempt += 1
                    self.ledger.record_retry(role, template_id)
                    if attempt > self.max_retries:
                        raise TransportExhaustedError(
                            f"{role.value}/{template_id}: {exc}") from exc
                    time.sleep(self.backoff_base * (2 ** (attempt - 1)))
        self.ledger.record_call(role, template_id, prompt, response)
        self._log_transcript(role, template_id, prompt, response, started)
        return response

    def complete_parsed(self, role: AgentRole, prompt: str, template_id: str,
                        parser: Callable[[str], object],
                        decode: DecodeParams | None = None, max_reasks: int = 2):
        """``complete`` plus parsing; malformed responses trigger up to
        ``max_reasks`` re-asks with an appended format reminder."""
        current = prompt
        last_error: ProtocolError | None = None
        for _ in range(max_reasks + 1):
            raw = self.complete(role, current, template_id, decode)
            try:
                return parser(raw)
            except ProtocolError as exc:
                last_error = exc
                current = f"{prompt}\n\n{FORMAT_REMINDER}"
        raise ProtocolError(
            f"{role.value}/{template_id}: unparseable after {max_reasks} re-asks: "
            f"{last_error}")

    def _log_transcript(self, role: AgentRole, template_id: str,
                        prompt: str, response: str, started: float) -> None:
        if self._transcript_path is None:
            return
        row = {
            "role": role.value,
            "template_id": template_id,
            "prompt_hash": hashlib.sha1(prompt.encode("utf-8")).hexdigest()[:12],
            "response": response,
            "latency_ms": round((time.monotonic() - started) * 1000, 3),
        }
        with self._transcript_lock:
            with self._transcript_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
