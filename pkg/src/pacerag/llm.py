"""Chat-completion backends and the bounded retry-with-reminder loop."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Protocol, Sequence, TypeVar

import requests

log = logging.getLogger(__name__)

T = TypeVar("T")


class BackendError(Exception):
    pass


class BackendUnavailable(BackendError):
    pass


class Timeout(BackendError):
    pass


class MaxRetriesExceeded(BackendError):
    def __init__(self, message: str, last_text: str = "", attempts: int = 0):
        super().__init__(message)
        self.last_text = last_text
        self.attempts = attempts


class ScriptMiss(BackendError):
    """The scripted backend has no rule for the request."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role != "assistant" and not self.content:
            raise ValueError(f"{self.role} message must have content")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.6
    max_tokens: int = 220
    context_window: int = 4096
    seed: int = 42

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1 or self.context_window < 1:
            raise ValueError("max_tokens and context_window must be positive")

    def with_seed(self, seed: int) -> "GenerationParams":
        return replace(self, seed=seed)


PROFILES = {
    "qwen": GenerationParams(temperature=0.6, max_tokens=220, context_window=4096),
    "llama": GenerationParams(temperature=0.8, max_tokens=400, context_window=8192),
}


def profile(name: str) -> GenerationParams:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown generation profile {name!r}; known: {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    endpoint_url: str = ""
    model_name: str = ""
    script_table: str = ""
    api_key: str = ""
    timeout: float = 120.0
    retries: int = 3
    parallelism: int = 4

    def __post_init__(self):
        if self.kind not in ("http", "scripted", "replay"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint_url:
            raise ValueError("http backend needs endpoint_url")
        if self.kind in ("scripted", "replay") and not self.script_table:
            raise ValueError(f"{self.kind} backend needs a script table / trace path")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    attempts_used: int = 1
    backend_latency: float = 0.0


class Backend(Protocol):
    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams,
                 stage: str = "") -> CompletionResult: ...


_THINK = re.compile(r"<think>.*?(</think>|$)", re.DOTALL | re.IGNORECASE)


def strip_think(text: str) -> str:
    return _THINK.sub("", text or "").strip()


def messages_digest(messages: Sequence[ChatMessage]) -> str:
    payload = json.dumps([m.to_dict() for m in messages], ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class HttpBackend:
    """OpenAI-style ``POST {base}/chat/completions`` client."""

    def __init__(self, base_url: str, model: str, api_key: str = "", timeout: float = 120.0,
                 retries: int = 3, parallelism: int = 4, backoff: float = 0.5):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = max(1, retries)
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max(1, parallelism))
        self._local = threading.local()

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = requests.Session()
            if self.api_key:
                s.headers["Authorization"] = f"Bearer {self.api_key}"
            self._local.session = s
        return s

    def payload(self, messages: Sequence[ChatMessage], params: GenerationParams) -> dict:
        return {
            "model": self.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "seed": params.seed,
        }

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams,
                 stage: str = "") -> CompletionResult:
        body = self.payload(messages, params)
        last: Exception | None = None
        for attempt in range(1, self.retries + 1):
            t0 = time.perf_counter()
            try:
                with self._slots:
                    r = self._session().post(f"{self.base_url}/chat/completions", json=body, timeout=self.timeout)
                if r.status_code >= 500 or r.status_code == 429:
                    raise BackendUnavailable(f"HTTP {r.status_code}")
                r.raise_for_status()
                text = r.json()["choices"][0]["message"]["content"] or ""
                return CompletionResult(strip_think(text), 1, time.perf_counter() - t0)
            except requests.Timeout as exc:
                last = Timeout(f"{stage or 'request'} timed out after {self.timeout}s")
                last.__cause__ = exc
            except (requests.RequestException, BackendUnavailable) as exc:
                last = exc
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed completion response: {exc}") from exc
            log.warning("backend attempt %d/%d failed: %s", attempt, self.retries, last)
            if attempt < self.retries:
                time.sleep(self.backoff * attempt)
        if isinstance(last, Timeout):
            raise last
        raise BackendUnavailable(f"{self.base_url} unreachable after {self.retries} attempts: {last}")


class ReplayBackend:
    """Serves recorded completions keyed by (stage, message digest)."""

    def __init__(self, records: dict[tuple[str, str], str]):
        self.records = dict(records)

    @classmethod
    def from_manifest(cls, path) -> "ReplayBackend":
        records: dict[tuple[str, str], str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                for call in row.get("trace", {}).get("calls", []):
                    records[(call["stage"], call["digest"])] = call["output"]
        return cls(records)

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams,
                 stage: str = "") -> CompletionResult:
        key = (stage, messages_digest(messages))
        if key not in self.records:
            raise ScriptMiss(f"no recorded output for stage {stage!r}")
        return CompletionResult(self.records[key], 1, 0.0)


FORMAT_REMINDERS = {
    "initial": "Reply with ONLY the [START]...[END] block, one 'Drug | reason' per line.",
    "guideline": "Reply with ONLY the [START]...[END] block, one 'Drug | reason' per line.",
    "treatrag": "Reply with ONLY the [START]...[END] block, one 'Drug | reason' per line.",
    "focus": 'Reply with JSON only: {"keywords": [...]}.',
    "tendency": 'Reply with JSON only: {"dominant_pattern": ..., "common_additions": [...], "reasoning": ...}.',
    "refine": 'Reply with JSON only: {"final_prescription": [...], "audit_log": [...], "final_description": ...}.',
    "summary": "Use exactly the four headers * Patient summary *, * Key word *, * Clinical Evidence *, * Prescribe *.",
    "medreflect_q": "Wrap your question in <Reflective Question>...</Reflective Question>.",
    "medreflect_a": "Wrap your answer in <Reflective Answer>...</Reflective Answer>.",
    "medreflect_r": "Reply as <Answer>:[Drug A, Drug B]</Answer>.",
    "judge": "Start with 'Relevance (1-5): N' where N is an integer from 1 to 5.",
}


@dataclass
class RepairOutcome:
    value: object
    result: CompletionResult
    outputs: list[str]


def complete_with_repair(
    backend: Backend,
    messages: Sequence[ChatMessage],
    params: GenerationParams,
    validator: Callable[[str], T],
    stage: str = "",
    max_attempts: int = 3,
    reminder: str | None = None,
) -> RepairOutcome:
    """Call the backend until ``validator`` accepts the text.

    Each retry resends the conversation with the rejected output and a
    one-line format reminder appended. Every raw output is kept in
    ``outputs`` so that callers can trace the repairs.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    note = reminder or FORMAT_REMINDERS.get(stage, "Follow the required output format exactly.")
    convo = list(messages)
    outputs: list[str] = []
    latency = 0.0
    last_error: Exception | None = None
    for attempt in range(1, max_attempts + 1):
        res = backend.complete(convo, params, stage=stage)
        latency += res.backend_latency
        outputs.append(res.text)
        try:
            value = validator(res.text)
        except Exception as exc:  # validators raise typed parse errors
            last_error = exc
            convo = list(messages) + [
                ChatMessage("assistant", res.text),
                ChatMessage("user", f"Your previous reply was rejected ({type(exc).__name__}). {note}"),
            ]
            continue
        return RepairOutcome(value, CompletionResult(res.text, attempt, latency), outputs)
    raise MaxRetriesExceeded(
        f"{stage or 'completion'}: no valid output after {max_attempts} attempts ({last_error})",
        last_text=outputs[-1] if outputs else "",
        attempts=max_attempts,
    )


def params_dict(params: GenerationParams) -> dict:
    return asdict(params)
