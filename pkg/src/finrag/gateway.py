"""Chat-completion clients: an HTTP gateway for local model servers and scriptable mocks."""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .core import ConfigError, InputError, TransportError

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})
MAX_PAYLOAD_BYTES = 64 * 1024 * 1024


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    image_paths: tuple[str, ...] = ()
    temperature: float = 0.0
    max_output_tokens: int = 1024
    timeout: float = 120.0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    attempts: int = 1


class Gateway(Protocol):
    def chat(self, req: ChatRequest) -> ChatResponse: ...


def check_request(req: ChatRequest, max_images: int) -> None:
    if len(req.image_paths) > max_images:
        raise InputError(f"request carries {len(req.image_paths)} images, limit is {max_images}")
    if not req.user.strip():
        raise InputError("empty user prompt")


class HttpGateway:
    """Client for a local model server.

    Sends ``{model, system, prompt, images[], options{temperature, num_predict}}``
    and reads the generated text from the ``response`` field. Transport
    errors and retryable statuses are retried ``retry_limit`` times with
    exponential backoff (500 ms, doubling).
    """

    def __init__(
        self,
        url: str,
        model: str,
        max_images: int = 5,
        retry_limit: int = 2,
        backoff_base: float = 0.5,
        max_multimodal_in_flight: int = 2,
        max_text_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not url:
            raise InputError("gateway URL is empty")
        self.url = url
        self.model = model
        self.max_images = max_images
        self.retry_limit = retry_limit
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._client = httpx.Client(transport=transport)
        self._mm_slots = threading.BoundedSemaphore(max_multimodal_in_flight)
        self._text_slots = threading.BoundedSemaphore(max_text_in_flight)

    @classmethod
    def from_env(cls, **kwargs) -> "HttpGateway":
        url = os.environ.get("FINRAG_LLM_URL", "")
        if not url:
            raise ConfigError(["FINRAG_LLM_URL is not set (use --offline for the offline model)"])
        return cls(url, os.environ.get("FINRAG_LLM_MODEL", "gemma3:12b"), **kwargs)

    def payload(self, req: ChatRequest) -> dict:
        images = [base64.b64encode(Path(p).read_bytes()).decode("ascii") for p in req.image_paths]
        return {
            "model": self.model,
            "system": req.system,
            "prompt": req.user,
            "images": images,
            "stream": False,
            "options": {"temperature": req.temperature, "num_predict": req.max_output_tokens},
        }

    def chat(self, req: ChatRequest) -> ChatResponse:
        check_request(req, self.max_images)
        body = json.dumps(self.payload(req)).encode("utf-8")
        if len(body) > MAX_PAYLOAD_BYTES:
            raise InputError(f"request payload is {len(body)} bytes, limit is {MAX_PAYLOAD_BYTES}")
        slots = self._mm_slots if req.image_paths else self._text_slots
        last_error = "no attempt made"
        status = None
        attempts = 0
        for attempt in range(self.retry_limit + 1):
            if attempt:
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            attempts += 1
            start = time.perf_counter()
            try:
                with slots:
                    resp = self._client.post(
                        self.url, content=body, timeout=req.timeout,
                        headers={"Content-Type": "application/json"},
                    )
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("gateway attempt %d failed: %s", attempts, last_error)
                continue
            latency = time.perf_counter() - start
            status = resp.status_code
            if resp.is_success:
                data = resp.json()
                return ChatResponse(
                    text=data.get("response", ""),
                    prompt_tokens=int(data.get("prompt_eval_count", 0)),
                    completion_tokens=int(data.get("eval_count", 0)),
                    latency=latency,
                    attempts=attempts,
                )
            last_error = f"HTTP {status}: {resp.text[:200]}"
            if status not in RETRYABLE_STATUS:
                break
            logger.warning("gateway attempt %d failed: %s", attempts, last_error)
        raise TransportError(f"chat request failed after {attempts} attempts ({last_error})", attempts, status)


@dataclass
class Rule:
    match: str
    response: str


class ScriptedGateway:
    """Offline gateway answering from ordered substring rules (first match wins).

    ``handler`` may be given instead of or in addition to rules; it is
    consulted after the rules and may return ``None`` to fall through to
    ``default``. Every request is recorded in ``requests``.
    """

    def __init__(
        self,
        rules: Sequence[Rule] = (),
        default: str = "insufficient information",
        handler: Callable[[ChatRequest], str | None] | None = None,
        max_images: int = 5,
    ):
        self.rules = list(rules)
        self.default = default
        self.handler = handler
        self.max_images = max_images
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.requests)

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike, **kwargs) -> "ScriptedGateway":
        rules = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rules.append(Rule(row["match_substring"], row["response_text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed rule ({exc})") from exc
        return cls(rules, **kwargs)

    def chat(self, req: ChatRequest) -> ChatResponse:
        check_request(req, self.max_images)
        with self._lock:
            self.requests.append(req)
        text = None
        for rule in self.rules:
            if rule.match in req.user:
                text = rule.response
                break
        if text is None and self.handler is not None:
            text = self.handler(req)
        if text is None:
            text = self.default
        return ChatResponse(text=text, completion_tokens=len(text.split()))
