"""Chat-model access, field-marker rendering and response parsing.

Two backends share one surface: :class:`HttpBackend` talks to any
OpenAI-compatible ``/chat/completions`` endpoint, :class:`ScriptedMockBackend`
replays a fixed script so whole calibration runs are reproducible offline.
Every call goes through :func:`complete` (or :func:`complete_many`), which
appends the exchange to a :class:`RunLog`.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from .contract import TOKEN_SET, TaskContract
from .errors import BackendError, ConfigError, RenderError
from .metric import Prediction

logger = logging.getLogger(__name__)

STUDENT = "student"
REFLECTION = "reflection"

COMPLETED_MARKER = "[[ ## completed ## ]]"


def marker(name: str) -> str:
    return f"[[ ## {name} ## ]]"


@dataclass(frozen=True)
class GenerationSettings:
    model_id: str
    temperature: float = 0.0
    max_tokens: int | None = None
    role: str = STUDENT

    def __post_init__(self) -> None:
        if self.role not in (STUDENT, REFLECTION):
            raise ConfigError(f"unknown model role {self.role!r}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_tokens is not None and self.max_tokens <= 0:
            raise ConfigError("max_tokens must be positive")

    @classmethod
    def student(cls, model_id: str, temperature: float = 0.0, max_tokens: int | None = None) -> GenerationSettings:
        return cls(model_id, temperature, max_tokens, STUDENT)

    @classmethod
    def reflection(cls, model_id: str, temperature: float = 1.0, max_tokens: int | None = 16000) -> GenerationSettings:
        return cls(model_id, temperature, max_tokens, REFLECTION)

    def to_dict(self) -> dict[str, Any]:
        return {"model_id": self.model_id, "temperature": self.temperature,
                "max_tokens": self.max_tokens, "role": self.role}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GenerationSettings:
        return cls(data["model_id"], float(data.get("temperature", 0.0)),
                   data.get("max_tokens"), data.get("role", STUDENT))


@dataclass(frozen=True)
class ChatExchange:
    system_text: str
    user_text: str
    response_text: str
    usage: tuple[int, int] | None = None
    latency_ms: int | None = None


class RunLog:
    """Ordered, thread-safe log of model calls.

    Sequence numbers are reserved at dispatch time, so the written order does
    not depend on which worker thread finishes first.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._next = 0
        self._entries: dict[int, dict[str, Any]] = {}

    def reserve(self) -> int:
        with self._lock:
            seq = self._next
            self._next += 1
            return seq

    def record(self, seq: int, role: str, settings: GenerationSettings, exchange: ChatExchange) -> None:
        with self._lock:
            if seq in self._entries:
                raise BackendError(f"log sequence {seq} recorded twice")
            self._entries[seq] = {
                "seq": seq,
                "role": role,
                "model_id": settings.model_id,
                "temperature": settings.temperature,
                "system": exchange.system_text,
                "user": exchange.user_text,
                "response": exchange.response_text,
                "input_tokens": exchange.usage[0] if exchange.usage else None,
                "output_tokens": exchange.usage[1] if exchange.usage else None,
                "latency_ms": exchange.latency_ms,
            }

    def entries(self) -> list[dict[str, Any]]:
        with self._lock:
            return [self._entries[k] for k in sorted(self._entries)]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def count(self, role: str) -> int:
        return sum(1 for e in self.entries() if e["role"] == role)

    def token_totals(self) -> dict[str, int] | None:
        """Summed token usage, or ``None`` if any call lacked usage data."""
        entries = self.entries()
        if not entries or any(e["input_tokens"] is None for e in entries):
            return None
        return {"input_tokens": sum(e["input_tokens"] for e in entries),
                "output_tokens": sum(e["output_tokens"] for e in entries)}

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.entries():
                fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")


# --- backends -------------------------------------------------------------


class Backend:
    kind = "abstract"
    deterministic = False

    def reserve(self) -> int:
        """Claim the next call index; mocks use it to address their script."""
        return 0

    def reset(self) -> None:
        pass

    def generate(self, settings: GenerationSettings, system_text: str, user_text: str,
                 call_index: int) -> ChatExchange:
        raise NotImplementedError

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind}


Responder = Callable[[int, str, str], str]


@dataclass
class Rule:
    contains: tuple[str, ...] = ()
    excludes: tuple[str, ...] = ()
    response: str = ""

    def matches(self, text: str) -> bool:
        return all(s in text for s in self.contains) and not any(s in text for s in self.excludes)


class ScriptedMockBackend(Backend):
    """Deterministic offline backend.

    ``script`` is either an ordered list of responses addressed by call
    index, or a list of :class:`Rule` objects matched top-down against the
    concatenated system and user text (``default`` answers when none match).
    A responder callable ``f(call_index, system, user)`` may be given instead.
    """

    kind = "scripted_mock"
    deterministic = True

    def __init__(self, script: Sequence[str] | Sequence[Rule] | Responder, *, repeat: bool = False,
                 default: str | None = None, name: str = "mock"):
        self._lock = threading.Lock()
        self._next = 0
        self.repeat = repeat
        self.default = default
        self.name = name
        self.responder: Responder | None = None
        self.responses: list[str] = []
        self.rules: list[Rule] = []
        if callable(script):
            self.responder = script
        elif script and all(isinstance(s, Rule) for s in script):
            self.rules = list(script)  # type: ignore[arg-type]
        else:
            self.responses = [str(s) for s in script]

    @property
    def calls(self) -> int:
        return self._next

    def reserve(self) -> int:
        with self._lock:
            idx = self._next
            self._next += 1
            return idx

    def reset(self) -> None:
        with self._lock:
            self._next = 0

    def _respond(self, call_index: int, system_text: str, user_text: str) -> str:
        if self.responder is not None:
            return self.responder(call_index, system_text, user_text)
        if self.rules or (not self.responses and self.default is not None):
            text = system_text + "\n" + user_text
            for rule in self.rules:
                if rule.matches(text):
                    return rule.response
            if self.default is None:
                raise BackendError(f"{self.name}: no rule matched call {call_index} and no default is set")
            return self.default
        if call_index < len(self.responses):
            return self.responses[call_index]
        if self.repeat and self.responses:
            return self.responses[call_index % len(self.responses)]
        raise BackendError(f"{self.name}: script exhausted at call {call_index} ({len(self.responses)} entries)")

    def generate(self, settings, system_text, user_text, call_index):
        return ChatExchange(system_text, user_text, self._respond(call_index, system_text, user_text))

    def describe(self) -> dict[str, Any]:
        if self.responder is not None:
            mode = "callable"
        elif self.rules:
            mode = "rules"
        else:
            mode = "sequence"
        return {"kind": self.kind, "name": self.name, "mode": mode, "repeat": self.repeat}

    @classmethod
    def from_file(cls, path: str | Path, *, repeat: bool | None = None, name: str | None = None) -> ScriptedMockBackend:
        """Load a mock script.

        Accepted forms: a JSON list of response strings; an object with
        ``responses`` (and optional ``repeat``); or an object with ``rules``
        (each ``{"contains": [...], "excludes": [...], "response": ...}``) and
        an optional ``default``.
        """
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read mock script {path}: {exc}") from exc
        name = name or Path(path).name
        if isinstance(data, list):
            return cls(data, repeat=bool(repeat), name=name)
        if not isinstance(data, dict):
            raise ConfigError(f"mock script {path}: expected a list or an object")
        rep = data.get("repeat", False) if repeat is None else repeat
        if "rules" in data:
            rules = [Rule(tuple(r.get("contains", ())), tuple(r.get("excludes", ())), r["response"])
                     for r in data["rules"]]
            # an empty rule list leaves only the default, which answers every call
            return cls(rules, default=data.get("default"), name=name)
        if "responses" in data:
            return cls(data["responses"], repeat=rep, name=name)
        raise ConfigError(f"mock script {path}: needs 'responses' or 'rules'")


TRANSIENT_STATUS = {429, 500, 502, 503, 504}


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client with capped exponential backoff.

    Only transport failures and transient HTTP statuses are retried; other
    4xx answers surface immediately as :class:`BackendError`.
    """

    kind = "http_openai_compatible"

    def __init__(self, base_url: str, api_key_env: str = "OPENAI_API_KEY", *, wire_model: str | None = None,
                 timeout: float = 120.0, max_attempts: int = 3, backoff: float = 1.0, max_backoff: float = 4.0,
                 transport: httpx.BaseTransport | None = None, sleep: Callable[[float], None] = time.sleep):
        key = os.environ.get(api_key_env)
        if not key:
            raise ConfigError(f"environment variable {api_key_env} is not set; it must hold the API key")
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.wire_model = wire_model
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.max_backoff = max_backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport,
                                    headers={"Authorization": f"Bearer {key}"})

    def _model_name(self, settings: GenerationSettings) -> str:
        if self.wire_model:
            return self.wire_model
        # "openai/gpt-4.1-mini" -> "gpt-4.1-mini"; provider prefix is routing metadata
        return settings.model_id.split("/", 1)[1] if "/" in settings.model_id else settings.model_id

    def generate(self, settings, system_text, user_text, call_index):
        payload: dict[str, Any] = {
            "model": self._model_name(settings),
            "messages": [{"role": "system", "content": system_text},
                         {"role": "user", "content": user_text}],
            "temperature": settings.temperature,
        }
        if settings.max_tokens is not None:
            payload["max_tokens"] = settings.max_tokens
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                delay = min(self.backoff * 2 ** (attempt - 1), self.max_backoff)
                logger.warning("retrying %s in %.1fs (attempt %d/%d): %s", url, delay, attempt + 1,
                               self.max_attempts, last_error)
                self._sleep(delay)
            start = time.monotonic()
            try:
                resp = self._client.post(url, json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if resp.status_code in TRANSIENT_STATUS:
                last_error = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"{url}: HTTP {resp.status_code}: {resp.text[:500]}")
            latency = int((time.monotonic() - start) * 1000)
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"{url}: malformed completion payload") from exc
            usage = body.get("usage") or {}
            tokens = None
            if "prompt_tokens" in usage and "completion_tokens" in usage:
                tokens = (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
            return ChatExchange(system_text, user_text, text, tokens, latency)
        raise BackendError(f"{url}: giving up after {self.max_attempts} attempts: {last_error}")

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "base_url": self.base_url, "api_key_env": self.api_key_env,
                "max_attempts": self.max_attempts}

    def close(self) -> None:
        self._client.close()


def complete(backend: Backend, settings: GenerationSettings, system_text: str, user_text: str,
             log: RunLog | None = None, *, call_index: int | None = None, seq: int | None = None) -> ChatExchange:
    if call_index is None:
        call_index = backend.reserve()
    if log is not None and seq is None:
        seq = log.reserve()
    exchange = backend.generate(settings, system_text, user_text, call_index)
    if log is not None:
        log.record(seq, settings.role, settings, exchange)  # type: ignore[arg-type]
    return exchange


def complete_many(backend: Backend, settings: GenerationSettings, prompts: Sequence[tuple[str, str]],
                  log: RunLog | None = None, num_threads: int = 1) -> list[ChatExchange]:
    """Run several prompts, up to ``num_threads`` at once, returned in input order."""
    tickets = [(backend.reserve(), log.reserve() if log is not None else None) for _ in prompts]
    jobs = [(sys_text, user_text, idx, seq) for (sys_text, user_text), (idx, seq) in zip(prompts, tickets)]

    def run(job):
        sys_text, user_text, idx, seq = job
        return complete(backend, settings, sys_text, user_text, log, call_index=idx, seq=seq)

    if num_threads <= 1 or len(jobs) <= 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=num_threads) as pool:
        return list(pool.map(run, jobs))


# --- rendering and parsing ------------------------------------------------


def render_messages(contract: TaskContract, inputs: Mapping[str, str]) -> tuple[str, str]:
    for f in contract.input_fields:
        if f.name not in inputs or inputs[f.name] is None:
            raise RenderError(f"missing input field {f.name!r}")

    lines = [contract.harness_text.rstrip(), "", "Your input fields are:"]
    for i, f in enumerate(contract.input_fields, 1):
        lines.append(f"{i}. `{f.name}`: {f.description}")
    lines += ["", "Your output fields are:"]
    for i, f in enumerate(contract.output_fields, 1):
        desc = f"{i}. `{f.name}`: {f.description}"
        if f.constraint == TOKEN_SET:
            desc += f" Allowed values: {', '.join(f.tokens)}."
        lines.append(desc)
    lines += ["", "Respond with each output field introduced by its marker, in this order, "
                  "then end with the completion marker and nothing else:"]
    for f in contract.output_fields:
        lines += [marker(f.name), f"{{{f.name}}}"]
    lines.append(COMPLETED_MARKER)
    system_text = "\n".join(lines)

    user_text = "\n\n".join(f"{f.name}: {inputs[f.name]}" for f in contract.input_fields)
    return system_text, user_text


def format_fields(values: Mapping[str, str], order: Sequence[str] | None = None) -> str:
    """Inverse of :func:`parse_fields`: emit marker-delimited output blocks."""
    names = list(order) if order is not None else list(values)
    parts = []
    for name in names:
        parts += [marker(name), values[name]]
    parts.append(COMPLETED_MARKER)
    return "\n".join(parts)


def parse_fields(response_text: str, contract: TaskContract) -> Prediction:
    """Extract output fields from a marker-delimited response.

    The first occurrence of each marker wins; a field's value runs to the next
    marker of any kind (or the end of the text). A missing decision-field
    marker yields ``parse_ok=False`` with an empty label.
    """
    text = response_text or ""
    names = contract.field_names("output")
    all_markers = [marker(n) for n in names] + [COMPLETED_MARKER]
    values: dict[str, str] = {}
    for name in names:
        start = text.find(marker(name))
        if start < 0:
            continue
        body_start = start + len(marker(name))
        ends = [p for p in (text.find(m, body_start) for m in all_markers) if p >= 0]
        end = min(ends) if ends else len(text)
        values[name] = text[body_start:end].strip()
    decision = contract.decision_field.name
    parse_ok = decision in values
    return Prediction(
        label_raw=values.get(decision, ""),
        checks=values.get("checks", ""),
        parse_ok=parse_ok,
        fields=values,
    )


def build_backend(spec: Mapping[str, Any], base_dir: Path | None = None) -> Backend:
    """Instantiate a backend from a config block (``kind`` = ``scripted_mock`` or ``http``)."""
    kind = spec.get("kind")
    if kind in ("scripted_mock", "mock"):
        if "script" not in spec:
            raise ConfigError("scripted_mock backend needs a 'script' path")
        path = Path(spec["script"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScriptedMockBackend.from_file(path, repeat=spec.get("repeat"))
    if kind in ("http", "http_openai_compatible"):
        if "base_url" not in spec:
            raise ConfigError("http backend needs 'base_url'")
        return HttpBackend(spec["base_url"], spec.get("api_key_env", "OPENAI_API_KEY"),
                           wire_model=spec.get("wire_model"), timeout=float(spec.get("timeout", 120.0)),
                           max_attempts=int(spec.get("max_attempts", 3)))
    raise ConfigError(f"unknown backend kind {kind!r}")
