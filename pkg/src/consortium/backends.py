"""Model invocation backends.

Two implementations share one calling convention. ``HttpBackend`` speaks
the chat-completions dialect: POST ``{endpoint_url}/chat/completions`` with
a JSON body of ``model``, ``messages``, and ``temperature``, bearer auth
from an environment variable, and the reply text taken byte for byte from
``choices[0].message.content``. ``ScriptedBackend`` replays canned
responses keyed by prompt hash so offline runs and tests are fully
deterministic.

Retries apply only to transport errors (the request never produced a
response). Timeouts, upstream HTTP errors, and unparseable response
documents are never retried; an unparseable response after a successful
POST is a hard error, because guessing at content would corrupt the
candidate record. Backoff is exponential from a 250 ms base, doubling per
attempt, with a small seeded jitter.
"""

from __future__ import annotations

import base64
import threading
import time
import random
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Protocol, Sequence

import httpx

from .errors import (
    AuthMissing,
    ConfigError,
    MalformedResponse,
    Timeout,
    TransportError,
    UpstreamError,
)
from .hashing import canonical_json, hash_text
from .types import CanonicalPrompt, ImageInput

import json
import os

SYSTEM_TEXT = (
    "You are an independent analyst. Complete the task exactly as "
    "instructed, using only the provided input."
)

BACKOFF_BASE_S = 0.25
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER_S = 0.05

SCRIPTED_ERROR_TIMEOUT = "timeout"
SCRIPTED_ERROR_TRANSPORT = "transport"
SCRIPTED_ERROR_UPSTREAM = "upstream"
SCRIPTED_ERRORS = (
    SCRIPTED_ERROR_TIMEOUT,
    SCRIPTED_ERROR_TRANSPORT,
    SCRIPTED_ERROR_UPSTREAM,
)


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one wire backend."""

    backend_ref: str
    endpoint_url: str
    model_name: str
    auth_token_env: Optional[str] = None
    timeout_ms: int = 30_000
    max_retries: int = 2
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.backend_ref:
            raise ConfigError("backend_ref must be non-empty")
        if not self.endpoint_url:
            raise ConfigError(f"endpoint_url missing for {self.backend_ref}")
        if self.timeout_ms <= 0:
            raise ConfigError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be non-negative")


@dataclass(frozen=True)
class InvocationRecord:
    """What a backend was asked: kept so isolation can be audited."""

    model_name: str
    prompt_hash: str
    rendered_text: str


@dataclass(frozen=True)
class InvocationResult:
    text: str
    latency_ms: int


class Backend(Protocol):
    backend_ref: str

    def invoke(
        self,
        prompt: CanonicalPrompt,
        *,
        model_name: Optional[str] = None,
        images: Sequence[ImageInput] = (),
    ) -> InvocationResult: ...


def encode_image_part(image: ImageInput) -> dict[str, Any]:
    """Standard image content part with the file embedded as a data URI."""
    suffix = os.path.splitext(image.path)[1].lower()
    media = {"jpg": "image/jpeg", "jpeg": "image/jpeg", "gif": "image/gif"}.get(
        suffix.lstrip("."), "image/png"
    )
    with open(image.path, "rb") as handle:
        payload = base64.b64encode(handle.read()).decode("ascii")
    return {
        "type": "image_url",
        "image_url": {"url": f"data:{media};base64,{payload}"},
    }


def build_request_document(
    prompt: CanonicalPrompt,
    model_name: str,
    temperature: float,
    images: Sequence[ImageInput] = (),
) -> dict[str, Any]:
    """The exact chat-completions request body, ready to serialize.

    With no images the user content is a plain string; with images it is a
    parts list of one text part followed by one image part per attachment,
    in context order.
    """
    content: Any = prompt.rendered_text
    if images:
        content = [{"type": "text", "text": prompt.rendered_text}]
        content.extend(encode_image_part(image) for image in images)
    return {
        "model": model_name,
        "messages": [
            {"role": "system", "content": SYSTEM_TEXT},
            {"role": "user", "content": content},
        ],
        "temperature": temperature,
    }


def parse_wire_response(body: bytes) -> str:
    """Extract the first choice's message content, byte exact.

    Raises MalformedResponse naming the missing path when the document does
    not have the expected shape.
    """
    try:
        doc = json.loads(body)
    except (ValueError, UnicodeDecodeError):
        raise MalformedResponse("$") from None
    if not isinstance(doc, dict) or "choices" not in doc:
        raise MalformedResponse("choices")
    choices = doc["choices"]
    if not isinstance(choices, list) or not choices:
        raise MalformedResponse("choices[0]")
    first = choices[0]
    if not isinstance(first, dict) or "message" not in first:
        raise MalformedResponse("choices[0].message")
    message = first["message"]
    if not isinstance(message, dict) or not isinstance(message.get("content"), str):
        raise MalformedResponse("choices[0].message.content")
    return message["content"]


class HttpBackend:
    """Wire client for one chat-completions endpoint."""

    def __init__(
        self,
        config: BackendConfig,
        *,
        rng: Optional[random.Random] = None,
        transport: Optional[httpx.BaseTransport] = None,
        sleep=time.sleep,
    ) -> None:
        self.backend_ref = config.backend_ref
        self.config = config
        self._rng = rng or random.Random(0)
        self._sleep = sleep
        self._client = httpx.Client(
            transport=transport,
            timeout=config.timeout_ms / 1000.0,
        )

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"content-type": "application/json"}
        if self.config.auth_token_env:
            token = os.environ.get(self.config.auth_token_env)
            if not token:
                raise AuthMissing(self.config.auth_token_env)
            headers["authorization"] = f"Bearer {token}"
        return headers

    def invoke(
        self,
        prompt: CanonicalPrompt,
        *,
        model_name: Optional[str] = None,
        images: Sequence[ImageInput] = (),
    ) -> InvocationResult:
        url = self.config.endpoint_url.rstrip("/") + "/chat/completions"
        doc = build_request_document(
            prompt,
            model_name or self.config.model_name,
            self.config.temperature,
            images,
        )
        body = canonical_json(doc).encode("utf-8")
        headers = self._headers()
        started = time.monotonic()
        attempt = 0
        while True:
            try:
                response = self._client.post(url, content=body, headers=headers)
            except httpx.TimeoutException as exc:
                raise Timeout(str(exc)) from exc
            except httpx.TransportError as exc:
                if attempt >= self.config.max_retries:
                    raise TransportError(str(exc)) from exc
                delay = BACKOFF_BASE_S * (BACKOFF_FACTOR**attempt)
                self._sleep(delay + self._rng.uniform(0.0, BACKOFF_JITTER_S))
                attempt += 1
                continue
            if response.status_code != 200:
                raise UpstreamError(
                    response.status_code, response.text[:200]
                )
            text = parse_wire_response(response.content)
            elapsed_ms = int((time.monotonic() - started) * 1000)
            return InvocationResult(text=text, latency_ms=elapsed_ms)


@dataclass(frozen=True)
class ScriptedReply:
    """One canned behavior: a response text, or an injected failure."""

    text: Optional[str] = None
    latency_ms: Optional[int] = None
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if self.error is not None and self.error not in SCRIPTED_ERRORS:
            raise ConfigError(f"unknown scripted error {self.error!r}")
        if self.error is None and self.text is None:
            raise ConfigError("a scripted reply needs text or an error")


class ScriptedBackend:
    """Deterministic stand-in keyed on prompt hash.

    Latency metadata is synthesized from the seed when a reply does not pin
    it, so repeated runs report identical timings. A scripted latency above
    the backend's timeout raises Timeout exactly like a slow wire call.
    """

    def __init__(
        self,
        backend_ref: str,
        *,
        script: Optional[Mapping[str, ScriptedReply]] = None,
        default: Optional[ScriptedReply] = None,
        seed: int = 0,
        timeout_ms: int = 30_000,
    ) -> None:
        self.backend_ref = backend_ref
        self.script = dict(script or {})
        self.default = default
        self.seed = seed
        self.timeout_ms = timeout_ms
        self.requests: list[InvocationRecord] = []
        self._lock = threading.Lock()

    def _jitter(self, prompt_hash: str, model_name: str) -> int:
        digest = hash_text(f"{self.seed}:{self.backend_ref}:{model_name}:{prompt_hash}")
        return 20 + int(digest[:8], 16) % 80

    def invoke(
        self,
        prompt: CanonicalPrompt,
        *,
        model_name: Optional[str] = None,
        images: Sequence[ImageInput] = (),
    ) -> InvocationResult:
        name = model_name or self.backend_ref
        with self._lock:
            self.requests.append(
                InvocationRecord(
                    model_name=name,
                    prompt_hash=prompt.prompt_hash,
                    rendered_text=prompt.rendered_text,
                )
            )
        reply = self.script.get(prompt.prompt_hash, self.default)
        if reply is None:
            raise UpstreamError(404, f"no scripted reply for {prompt.prompt_hash[:12]}")
        if reply.error == SCRIPTED_ERROR_TIMEOUT:
            raise Timeout("scripted timeout")
        if reply.error == SCRIPTED_ERROR_TRANSPORT:
            raise TransportError("scripted transport failure")
        if reply.error == SCRIPTED_ERROR_UPSTREAM:
            raise UpstreamError(500, "scripted upstream failure")
        latency = (
            reply.latency_ms
            if reply.latency_ms is not None
            else self._jitter(prompt.prompt_hash, name)
        )
        if latency > self.timeout_ms:
            raise Timeout(f"scripted latency {latency} ms exceeds {self.timeout_ms} ms")
        assert reply.text is not None
        return InvocationResult(text=reply.text, latency_ms=latency)


BackendRegistry = Mapping[str, Backend]


def resolve_backend(registry: BackendRegistry, backend_ref: str) -> Backend:
    try:
        return registry[backend_ref]
    except KeyError:
        raise ConfigError(f"no backend configured for ref {backend_ref!r}") from None
