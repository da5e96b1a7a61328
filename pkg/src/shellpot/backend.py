"""Clients for the LLM response tier.

Three providers share one surface: a local model server speaking the common
JSON generate API, a cloud generative-language HTTP API, and a replay file of
canned responses for reproducible runs. Requests are stateless; a per-backend
semaphore caps in-flight calls so small local servers aren't trampled.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

import httpx

logger = logging.getLogger(__name__)

PROVIDERS = ("local_server", "cloud_api", "replay")

DATA_DIR = Path(__file__).resolve().parent / "data"

AVAILABILITY_PROBE = "echo ok"
AVAILABILITY_TIMEOUT_S = 30.0
RESET_HOOK_TIMEOUT_S = 60.0
DEFAULT_PROMPT_BUDGET = 8000


class BackendError(Exception):
    """Base for generate() failures; carries elapsed time for logging."""

    def __init__(self, message: str, elapsed_ms: int = 0):
        super().__init__(message)
        self.elapsed_ms = elapsed_ms


class Timeout(BackendError):
    pass


class TransportError(BackendError):
    pass


class ApiError(BackendError):
    def __init__(self, message: str, status: int = 0, elapsed_ms: int = 0):
        super().__init__(message, elapsed_ms)
        self.status = status


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class BackendSpec:
    """Identity and transport parameters of one LLM backend."""

    provider: str
    endpoint: str = ""
    model_id: str = ""
    api_key_env: str = "LLM_API_KEY"
    timeout_s: float = 30.0
    max_output_chars: int = 8192
    temperature: float | None = None
    max_tokens: int | None = None
    reset_cmd: str = ""
    replay_file: str = ""
    concurrency: int = 4

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")
        if self.max_output_chars <= 0:
            raise ValueError("max_output_chars must be > 0")


@dataclass(frozen=True)
class PromptBundle:
    """Role instruction, session-state digest, and the attacker's command."""

    system: str
    state: str
    command: str

    def serialize(self) -> str:
        return (
            f"{self.system}\n\n"
            f"[session state]\n{self.state}\n\n"
            f"Command: {self.command}\nOutput:"
        )


def load_default_template() -> str:
    return (DATA_DIR / "prompt_template.txt").read_text(encoding="utf-8")


def build_prompt(
    state_digest: str,
    command: str,
    template: str | None = None,
    budget: int = DEFAULT_PROMPT_BUDGET,
) -> PromptBundle:
    """Assemble the prompt for one command; template is the system block."""
    if not command:
        raise ValueError("command must be non-empty")
    system = (template if template is not None else load_default_template()).strip()
    bundle = PromptBundle(system=system, state=state_digest, command=command)
    if len(bundle.serialize()) > budget:
        raise BudgetExceeded(f"prompt exceeds {budget} character budget")
    return bundle


_limiters: dict[BackendSpec, threading.BoundedSemaphore] = {}
_limiters_lock = threading.Lock()


def _limiter(spec: BackendSpec) -> threading.BoundedSemaphore:
    with _limiters_lock:
        sem = _limiters.get(spec)
        if sem is None:
            sem = threading.BoundedSemaphore(max(spec.concurrency, 1))
            _limiters[spec] = sem
        return sem


_http_client: httpx.Client | None = None
_http_client_lock = threading.Lock()


def _shared_client() -> httpx.Client:
    # One pooled client per process; httpx.Client is thread-safe and
    # per-request timeouts override the default.
    global _http_client
    with _http_client_lock:
        if _http_client is None:
            _http_client = httpx.Client(timeout=httpx.Timeout(30.0))
        return _http_client


_replay_cache: dict[str, dict] = {}
_replay_lock = threading.Lock()


def _load_replay(path: str) -> dict:
    mtime = os.stat(path).st_mtime_ns
    with _replay_lock:
        cached = _replay_cache.get(path)
        if cached is None or cached[0] != mtime:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            _replay_cache[path] = (mtime, doc)
            return doc
        return cached[1]


def _replay_generate(spec: BackendSpec, prompt: PromptBundle) -> tuple[str, int]:
    doc = _load_replay(spec.replay_file)
    default_latency = int(doc.get("default_latency_ms", 0))
    entry = doc.get("responses", {}).get(prompt.command)
    if entry is None:
        return "", default_latency
    if isinstance(entry, str):
        return entry, default_latency
    return entry.get("text", ""), int(entry.get("latency_ms", default_latency))


def _collect_body(resp: httpx.Response, deadline: float) -> bytes:
    chunks = []
    for chunk in resp.iter_bytes():
        chunks.append(chunk)
        if time.monotonic() > deadline:
            raise httpx.ReadTimeout("response exceeded total deadline")
    return b"".join(chunks)


def _http_generate(spec: BackendSpec, prompt: PromptBundle) -> str:
    if spec.provider == "local_server":
        url = spec.endpoint
        headers = {}
        payload: dict = {
            "model": spec.model_id,
            "prompt": prompt.serialize(),
            "stream": False,
        }
        options = {}
        if spec.temperature is not None:
            options["temperature"] = spec.temperature
        if spec.max_tokens is not None:
            options["num_predict"] = spec.max_tokens
        if options:
            payload["options"] = options
    else:
        key = os.environ.get(spec.api_key_env, "")
        if not key:
            raise ApiError(f"api key environment variable {spec.api_key_env} is not set")
        url = f"{spec.endpoint.rstrip('/')}/{spec.model_id}:generateContent"
        headers = {"x-goog-api-key": key}
        payload = {"contents": [{"role": "user", "parts": [{"text": prompt.serialize()}]}]}
        generation = {}
        if spec.temperature is not None:
            generation["temperature"] = spec.temperature
        if spec.max_tokens is not None:
            generation["maxOutputTokens"] = spec.max_tokens
        if generation:
            payload["generationConfig"] = generation

    deadline = time.monotonic() + spec.timeout_s
    timeout = httpx.Timeout(spec.timeout_s, connect=min(spec.timeout_s, 10.0))
    client = _shared_client()
    with client.stream("POST", url, json=payload, headers=headers, timeout=timeout) as resp:
        body = _collect_body(resp, deadline)
        if resp.status_code // 100 != 2:
            snippet = body[:300].decode("utf-8", errors="replace")
            raise ApiError(f"backend returned {resp.status_code}: {snippet}", status=resp.status_code)

    doc = json.loads(body.decode("utf-8", errors="replace"))
    if spec.provider == "local_server":
        for field_name in ("response", "completion", "text"):
            value = doc.get(field_name)
            if isinstance(value, str):
                return value
        raise ApiError("no completion text field in response")
    try:
        parts = doc["candidates"][0]["content"]["parts"]
        return "".join(p.get("text", "") for p in parts)
    except (KeyError, IndexError, TypeError):
        raise ApiError("malformed generateContent response") from None


def generate(spec: BackendSpec, prompt: PromptBundle) -> tuple[str, int]:
    """Run one completion; returns (text, latency_ms).

    Raises Timeout / TransportError / ApiError, each carrying elapsed time.
    One retry on TransportError; a timed-out backend is left alone for the
    caller to reset.
    """
    start = time.monotonic()

    def elapsed() -> int:
        return int((time.monotonic() - start) * 1000)

    if spec.provider == "replay":
        text, latency = _replay_generate(spec, prompt)
        return text[: spec.max_output_chars], latency

    retried = False
    with _limiter(spec):
        while True:
            try:
                text = _http_generate(spec, prompt)
                return text[: spec.max_output_chars], elapsed()
            except httpx.TimeoutException as exc:
                raise Timeout(f"backend timed out after {spec.timeout_s}s: {exc}", elapsed()) from exc
            except httpx.TransportError as exc:
                if not retried:
                    retried = True
                    continue
                raise TransportError(str(exc), elapsed()) from exc
            except ApiError as exc:
                exc.elapsed_ms = elapsed()
                raise
            except json.JSONDecodeError as exc:
                raise ApiError(f"invalid JSON from backend: {exc}", elapsed_ms=elapsed()) from exc


def check_available(spec: BackendSpec, timeout_s: float = AVAILABILITY_TIMEOUT_S) -> bool:
    """True iff a trivial prompt completes in time. Never raises."""
    if spec.provider == "cloud_api" and not os.environ.get(spec.api_key_env, ""):
        logger.warning("backend %s unavailable: %s is not set", spec.model_id, spec.api_key_env)
        return False
    probe = PromptBundle(system="Reply with the word ok.", state="", command=AVAILABILITY_PROBE)
    try:
        text, _ = generate(replace(spec, timeout_s=timeout_s), probe)
    except BackendError as exc:
        logger.warning("backend %s unavailable: %s", spec.model_id, exc)
        return False
    except Exception as exc:  # availability checks must never propagate
        logger.warning("backend %s availability probe failed: %s", spec.model_id, exc)
        return False
    return isinstance(text, str)


def reset_backend(spec: BackendSpec) -> bool:
    """Run the configured reset hook and re-check availability.

    No-op True for non-local providers. Never raises.
    """
    if spec.provider != "local_server":
        return True
    if spec.reset_cmd:
        try:
            proc = subprocess.run(
                shlex.split(spec.reset_cmd),
                capture_output=True,
                timeout=RESET_HOOK_TIMEOUT_S,
            )
        except (OSError, subprocess.TimeoutExpired, ValueError) as exc:
            logger.warning("reset hook failed: %s", exc)
            return False
        if proc.returncode != 0:
            logger.warning("reset hook exited %d", proc.returncode)
            return False
    return check_available(spec)
