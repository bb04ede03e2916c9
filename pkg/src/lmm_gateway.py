"""
LMM Gateway
Sends prompt bundles to chat-style multimodal endpoints with retries, and runs
resumable batches whose responses are appended to a JSONL log
"""

import base64
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import backoff
import requests
from loguru import logger
from tqdm import tqdm

from .errors import (
    AuthError,
    ConfigError,
    GatewayError,
    IoError,
    MalformedResponse,
    ToolkitError,
    TransportError,
    ValidationError,
)
from .prompt_bundler import PromptBundle

PROVIDERS = ("chat_completions", "messages")
MAX_RETRIES_LIMIT = 8
BACKOFF_MAX_WAIT_S = 30.0

MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}


@dataclass(frozen=True)
class GatewayConfig:
    endpoint: str
    model: str
    api_key: str = field(default="", repr=False)
    provider: str = "chat_completions"
    max_retries: int = 4
    timeout: float = 60.0
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self):
        if not self.endpoint:
            raise ConfigError("gateway.endpoint must be set")
        if not self.model:
            raise ConfigError("gateway.model must be set")
        if self.provider not in PROVIDERS:
            raise ConfigError(f"gateway.provider must be one of {PROVIDERS}, got {self.provider!r}")
        if not 0 <= self.max_retries <= MAX_RETRIES_LIMIT:
            raise ConfigError(f"gateway.max_retries must be in 0..{MAX_RETRIES_LIMIT}, got {self.max_retries}")
        if self.timeout <= 0:
            raise ConfigError(f"gateway.timeout must be > 0, got {self.timeout}")
        if self.temperature < 0:
            raise ConfigError(f"gateway.temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens < 1:
            raise ConfigError(f"gateway.max_output_tokens must be >= 1, got {self.max_output_tokens}")

    def headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.provider == "messages":
            headers["x-api-key"] = self.api_key
        else:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers


@dataclass
class ModelResponse:
    qa_id: str
    raw_text: Optional[str]
    latency_s: float
    attempt_count: int
    token_usage: Optional[Tuple[int, int]] = None  # (prompt, completion)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.raw_text is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "qa_id": self.qa_id,
            "raw_text": self.raw_text,
            "latency_s": self.latency_s,
            "attempt_count": self.attempt_count,
            "token_usage": list(self.token_usage) if self.token_usage else None,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelResponse":
        usage = data.get("token_usage")
        return cls(
            qa_id=str(data["qa_id"]),
            raw_text=data.get("raw_text"),
            latency_s=float(data.get("latency_s", 0.0)),
            attempt_count=int(data.get("attempt_count", 0)),
            token_usage=(int(usage[0]), int(usage[1])) if usage else None,
            error=data.get("error"),
        )


# ---------------------------------------------------------------------------
# Request construction
# ---------------------------------------------------------------------------

def _encode_image(path: str) -> Tuple[str, str]:
    media_type = MEDIA_TYPES.get(os.path.splitext(path)[1].lower())
    if media_type is None:
        raise ValidationError("images", f"unsupported image type {path}")
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read image {path}: {e}") from e
    return media_type, base64.b64encode(data).decode("ascii")


def text_parts(bundle: PromptBundle) -> List[str]:
    parts = []
    if bundle.guide_text:
        parts.append(bundle.guide_text)
    if bundle.metadata_text:
        parts.append("Objects:\n" + bundle.metadata_text)
    parts.append(bundle.question_text)
    parts.append(bundle.answer_instruction)
    return parts


def build_request(bundle: PromptBundle, config: GatewayConfig) -> Dict[str, Any]:
    """JSON body for one bundle: one user message, images first in bundle order, then text"""
    images = [_encode_image(path) for path in bundle.image_paths()]
    texts = text_parts(bundle)
    if config.provider == "messages":
        content = [
            {"type": "image", "source": {"type": "base64", "media_type": media, "data": data}}
            for media, data in images
        ] + [{"type": "text", "text": text} for text in texts]
        return {
            "model": config.model,
            "max_tokens": config.max_output_tokens,
            "temperature": config.temperature,
            "messages": [{"role": "user", "content": content}],
        }
    content = [
        {"type": "image_url", "image_url": {"url": f"data:{media};base64,{data}"}}
        for media, data in images
    ] + [{"type": "text", "text": text} for text in texts]
    return {
        "model": config.model,
        "messages": [{"role": "user", "content": content}],
        "temperature": config.temperature,
        "max_tokens": config.max_output_tokens,
    }


def parse_response(data: Any, provider: str) -> Tuple[str, Optional[Tuple[int, int]]]:
    """Extract the reply text and (prompt, completion) token usage"""
    try:
        if provider == "messages":
            blocks = data["content"]
            text = "".join(b.get("text", "") for b in blocks if b.get("type") == "text")
            usage = data.get("usage") or {}
            tokens = (usage.get("input_tokens"), usage.get("output_tokens"))
        else:
            message = data["choices"][0]["message"]
            text = message["content"]
            if isinstance(text, list):
                text = "".join(p.get("text", "") for p in text if isinstance(p, dict))
            usage = data.get("usage") or {}
            tokens = (usage.get("prompt_tokens"), usage.get("completion_tokens"))
    except (KeyError, IndexError, TypeError, AttributeError) as e:
        raise MalformedResponse(f"unexpected response shape: {e!r}") from e
    if not isinstance(text, str):
        raise MalformedResponse("response content is not text")
    token_usage = (int(tokens[0]), int(tokens[1])) if None not in tokens else None
    return text, token_usage


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

class _RetryableFailure(Exception):
    """Transport error, HTTP 429 or 5xx"""


def _jitter(value: float) -> float:
    return value * random.uniform(0.8, 1.2)


class LMMGateway:
    """
    Dispatches bundles to one endpoint.
    Sessions come from `session_factory` (one per worker thread); the wait generator is
    injectable so tests can retry without sleeping.
    """

    def __init__(
        self,
        config: GatewayConfig,
        session_factory: Callable[[], Any] = requests.Session,
        wait_gen: Callable = backoff.expo,
        wait_kwargs: Optional[Dict[str, Any]] = None,
    ):
        self.config = config
        self.session_factory = session_factory
        self.wait_gen = wait_gen
        self.wait_kwargs = {"base": 2, "factor": 1, "max_value": BACKOFF_MAX_WAIT_S} if wait_kwargs is None else wait_kwargs
        self._local = threading.local()

    @property
    def session(self):
        if not hasattr(self._local, "session"):
            self._local.session = self.session_factory()
        return self._local.session

    def _post(self, body: Dict[str, Any]) -> Any:
        try:
            response = self.session.post(
                self.config.endpoint, json=body, headers=self.config.headers(), timeout=self.config.timeout)
        except requests.RequestException as e:
            raise _RetryableFailure(f"transport error: {e}") from e
        status = response.status_code
        if status == 429 or status >= 500:
            raise _RetryableFailure(f"HTTP {status}")
        if status in (401, 403):
            raise AuthError(f"HTTP {status}: endpoint rejected the credentials")
        if status >= 400:
            raise TransportError(f"HTTP {status}: {str(response.text)[:200]}")
        try:
            return response.json()
        except ValueError as e:
            raise MalformedResponse(f"response body is not JSON: {e}") from e

    def send_bundle(self, bundle: PromptBundle) -> ModelResponse:
        body = build_request(bundle, self.config)
        log = logger.bind(qa_id=bundle.qa_id)
        attempts = 0

        def on_backoff(details):
            log.debug("Attempt {} failed ({}), retrying in {:.2f}s",
                      details["tries"], details["exception"], details["wait"])

        @backoff.on_exception(
            self.wait_gen,
            _RetryableFailure,
            max_tries=self.config.max_retries + 1,
            jitter=_jitter,
            on_backoff=on_backoff,
            **self.wait_kwargs,
        )
        def attempt():
            nonlocal attempts
            attempts += 1
            return self._post(body)

        start = time.monotonic()
        try:
            data = attempt()
            text, usage = parse_response(data, self.config.provider)
        except _RetryableFailure as e:
            raise TransportError(f"{bundle.qa_id}: gave up after {attempts} attempts: {e}", attempts) from e
        except GatewayError as e:
            e.attempt_count = attempts
            raise
        return ModelResponse(
            qa_id=bundle.qa_id,
            raw_text=text,
            latency_s=time.monotonic() - start,
            attempt_count=attempts,
            token_usage=usage,
        )

    def _dispatch(self, bundle: PromptBundle) -> ModelResponse:
        start = time.monotonic()
        try:
            return self.send_bundle(bundle)
        except ToolkitError as e:
            logger.bind(qa_id=bundle.qa_id).warning("Request failed: {}", e)
            return ModelResponse(
                qa_id=bundle.qa_id,
                raw_text=None,
                latency_s=time.monotonic() - start,
                attempt_count=getattr(e, "attempt_count", 0),
                error=f"{type(e).__name__}: {e}",
            )

    def run_batch(
        self,
        bundles: Sequence[PromptBundle],
        concurrency: int = 1,
        response_log: Optional["ResponseLog"] = None,
        progress: bool = True,
    ) -> List[ModelResponse]:
        """Send every bundle not already answered in the log; output follows input order"""
        if concurrency < 1:
            raise ValidationError("concurrency", f"must be >= 1, got {concurrency}")
        results: Dict[str, ModelResponse] = dict(response_log.completed()) if response_log else {}
        pending = [b for b in bundles if b.qa_id not in results]
        skipped = len(bundles) - len(pending)
        if skipped:
            logger.info("Resuming batch: {} of {} bundles already answered", skipped, len(bundles))

        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            futures = [pool.submit(self._dispatch, bundle) for bundle in pending]
            for future in tqdm(as_completed(futures), total=len(futures), desc="dispatch", disable=not progress):
                response = future.result()
                results[response.qa_id] = response
                if response_log is not None:
                    response_log.append(response)
        return [results[b.qa_id] for b in bundles]


class ResponseLog:
    """Append-only JSONL of model responses; successful qa_ids are skipped on resume"""

    def __init__(self, path: str):
        self.path = path

    def read(self) -> List[ModelResponse]:
        if not os.path.exists(self.path):
            return []
        responses = []
        with open(self.path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    responses.append(ModelResponse.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    logger.warning("Ignoring unreadable response log line {}:{}", self.path, number)
        return responses

    def completed(self) -> Dict[str, ModelResponse]:
        return {r.qa_id: r for r in self.read() if r.ok}

    def latest(self) -> Dict[str, ModelResponse]:
        """Last record per qa_id, preferring successes"""
        latest: Dict[str, ModelResponse] = {}
        for response in self.read():
            if response.ok or response.qa_id not in latest or not latest[response.qa_id].ok:
                latest[response.qa_id] = response
        return latest

    def append(self, response: ModelResponse):
        directory = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(directory, exist_ok=True)
        with open(self.path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(response.to_dict(), sort_keys=True, ensure_ascii=False))
            f.write("\n")
            f.flush()


def summarize_usage(responses: Iterable[ModelResponse]) -> Dict[str, int]:
    prompt = completion = counted = 0
    for response in responses:
        if response.token_usage:
            prompt += response.token_usage[0]
            completion += response.token_usage[1]
            counted += 1
    return {
        "prompt_tokens": prompt,
        "completion_tokens": completion,
        "total_tokens": prompt + completion,
        "responses_with_usage": counted,
    }
