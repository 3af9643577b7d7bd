"""HTTP transport with retry/backoff, plus deterministic mock endpoints.

Wire formats (all JSON over POST):

    /generate   {prompt, temperature, max_tokens[, seed]} -> {completion}
    /score      {prompt, completion}                      -> {reward}
    /judge      {prompt}                                  -> {text}
    /translate  {text, source_lang, target_lang}          -> {text}
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping, Protocol

import requests

log = logging.getLogger(__name__)

RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.25


class EndpointError(RuntimeError):
    def __init__(self, message: str, url: str = "", status: int | None = None, retryable: bool = True):
        super().__init__(message)
        self.url = url
        self.status = status
        self.retryable = retryable


class MalformedResponse(EndpointError):
    def __init__(self, message: str, url: str = ""):
        super().__init__(message, url, retryable=False)


class Transport(Protocol):
    def post(self, url: str, path: str, payload: dict) -> dict: ...


def with_retries(call: Callable[[], dict], attempts: int = RETRY_ATTEMPTS, base_delay: float = RETRY_BASE_DELAY,
                 sleep: Callable[[float], None] = time.sleep) -> dict:
    """Run ``call``; on retryable EndpointError back off 0.25s, 0.5s, ... up to ``attempts`` tries."""
    for attempt in range(attempts):
        try:
            return call()
        except EndpointError as e:
            if not e.retryable or attempt == attempts - 1:
                raise
            delay = base_delay * 2**attempt
            log.debug("retrying %s after %s (%.2fs)", e.url, e, delay)
            sleep(delay)
    raise AssertionError("unreachable")


def require_field(body, key: str, kind, url: str = ""):
    if not isinstance(body, dict) or key not in body:
        raise MalformedResponse(f"response from {url} lacks {key!r}", url)
    value = body[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedResponse(f"{key!r} from {url} is not a number", url)
        return float(value)
    if not isinstance(value, kind):
        raise MalformedResponse(f"{key!r} from {url} is not {kind.__name__}", url)
    return value


class HttpTransport:
    def __init__(self, timeout: float = 60.0, attempts: int = RETRY_ATTEMPTS, base_delay: float = RETRY_BASE_DELAY,
                 sleep: Callable[[float], None] = time.sleep):
        self.timeout = timeout
        self.attempts = attempts
        self.base_delay = base_delay
        self.sleep = sleep
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _once(self, url: str, path: str, payload: dict) -> dict:
        full = url.rstrip("/") + path
        try:
            resp = self._session().post(full, json=payload, timeout=self.timeout)
        except requests.RequestException as e:
            raise EndpointError(f"{full} unreachable: {e}", full) from None
        if resp.status_code >= 500 or resp.status_code == 429:
            raise EndpointError(f"{full} returned HTTP {resp.status_code}", full, resp.status_code)
        if resp.status_code >= 400:
            raise EndpointError(f"{full} returned HTTP {resp.status_code}", full, resp.status_code, retryable=False)
        try:
            return resp.json()
        except ValueError:
            raise MalformedResponse(f"{full} returned non-JSON body", full) from None

    def post(self, url: str, path: str, payload: dict) -> dict:
        return with_retries(lambda: self._once(url, path, payload), self.attempts, self.base_delay, self.sleep)


Handler = Callable[[str, dict], dict]


class MockTransport:
    """In-process endpoints keyed by base URL. Shares retry semantics with HttpTransport."""

    def __init__(self, handlers: Mapping[str, Handler] | None = None, attempts: int = RETRY_ATTEMPTS,
                 base_delay: float = RETRY_BASE_DELAY, sleep: Callable[[float], None] = lambda _: None):
        self.handlers = dict(handlers or {})
        self.attempts = attempts
        self.base_delay = base_delay
        self.sleep = sleep
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def register(self, url: str, handler: Handler) -> None:
        self.handlers[url] = handler

    def _once(self, url: str, path: str, payload: dict) -> dict:
        with self._lock:
            self.calls.append((url, path))
        handler = self.handlers.get(url)
        if handler is None:
            raise EndpointError(f"{url} unreachable: no mock registered", url)
        # Round-trip through JSON so mocks see exactly what the wire would carry.
        return json.loads(json.dumps(handler(path, json.loads(json.dumps(payload)))))

    def post(self, url: str, path: str, payload: dict) -> dict:
        return with_retries(lambda: self._once(url, path, payload), self.attempts, self.base_delay, self.sleep)


class MockHTTPError(EndpointError):
    """Raised by mock handlers to simulate an HTTP error status."""

    def __init__(self, status: int = 500):
        super().__init__(f"mock HTTP {status}", status=status, retryable=status >= 500 or status == 429)


def _digest(*parts) -> int:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


_WORDS = (
    "alpha beta gamma delta answer because therefore example detail step result consider note first then "
    "finally clearly simple robust careful overall language model reply context"
).split()


def mock_generator(model_id: str, min_words: int = 3, max_words: int = 12) -> Handler:
    """Deterministic completions from hash(model_id, prompt, seed); length varies by input."""

    def handle(path: str, payload: dict) -> dict:
        if path != "/generate":
            raise MockHTTPError(404)
        h = _digest(model_id, payload["prompt"], payload.get("seed", 0))
        n = min_words + h % (max_words - min_words + 1)
        words = [_WORDS[_digest(h, i) % len(_WORDS)] for i in range(n)]
        return {"completion": f"{model_id}: " + " ".join(words)}

    return handle


def mock_constant_generator(text: str) -> Handler:
    def handle(path: str, payload: dict) -> dict:
        return {"completion": text}

    return handle


def length_reward() -> Handler:
    def handle(path: str, payload: dict) -> dict:
        if path != "/score":
            raise MockHTTPError(404)
        return {"reward": float(len(payload["completion"]))}

    return handle


def keyword_reward(keywords: list[str], length_weight: float = 0.0) -> Handler:
    kws = [k.lower() for k in keywords]

    def handle(path: str, payload: dict) -> dict:
        text = payload["completion"].lower()
        return {"reward": float(sum(text.count(k) for k in kws)) + length_weight * len(text)}

    return handle


def constant_reward(value: float) -> Handler:
    def handle(path: str, payload: dict) -> dict:
        return {"reward": value}

    return handle


def failing(status: int = 500) -> Handler:
    def handle(path: str, payload: dict) -> dict:
        raise MockHTTPError(status)

    return handle


def flaky(handler: Handler, failures: int, status: int = 503) -> Handler:
    """Fail the first ``failures`` calls, then delegate."""
    remaining = [failures]
    lock = threading.Lock()

    def handle(path: str, payload: dict) -> dict:
        with lock:
            if remaining[0] > 0:
                remaining[0] -= 1
                raise MockHTTPError(status)
        return handler(path, payload)

    return handle


_RESPONSE_RE = re.compile(r"\[Response A\]\n(.*?)\n\[End of Response A\].*?\[Response B\]\n(.*?)\n\[End of Response B\]", re.S)


def extract_responses(judge_prompt: str) -> tuple[str, str]:
    m = _RESPONSE_RE.search(judge_prompt)
    if not m:
        raise MockHTTPError(400)
    return m.group(1), m.group(2)


def length_judge() -> Handler:
    """Prefers the longer response regardless of position; equal lengths tie."""

    def handle(path: str, payload: dict) -> dict:
        a, b = extract_responses(payload["prompt"])
        verdict = "A" if len(a) > len(b) else "B" if len(b) > len(a) else "TIE"
        return {"text": f"Longer answer wins.\n{verdict}"}

    return handle


def first_position_judge() -> Handler:
    def handle(path: str, payload: dict) -> dict:
        return {"text": "The first one.\nA"}

    return handle


def scripted_judge(replies: list[str]) -> Handler:
    """Replies in order, cycling."""
    state = [0]
    lock = threading.Lock()

    def handle(path: str, payload: dict) -> dict:
        with lock:
            text = replies[state[0] % len(replies)]
            state[0] += 1
        return {"text": text}

    return handle


def mock_translator() -> Handler:
    def handle(path: str, payload: dict) -> dict:
        if path != "/translate":
            raise MockHTTPError(404)
        return {"text": f"[{payload['target_lang']}] {payload['text']}"}

    return handle


MOCK_KINDS: dict[str, Callable[..., Handler]] = {
    "generator": mock_generator,
    "constant_generator": mock_constant_generator,
    "length_reward": length_reward,
    "keyword_reward": keyword_reward,
    "constant_reward": constant_reward,
    "failing": failing,
    "length_judge": length_judge,
    "first_position_judge": first_position_judge,
    "scripted_judge": scripted_judge,
    "translator": mock_translator,
}


def build_mock(spec: Mapping) -> Handler:
    """Construct a mock handler from ``{"kind": ..., **kwargs}``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in MOCK_KINDS:
        raise ValueError(f"unknown mock kind {kind!r}; expected one of {', '.join(sorted(MOCK_KINDS))}")
    return MOCK_KINDS[kind](**spec)


class MockServer:
    """Serve a MockTransport's handlers over real HTTP on localhost.

    Requests to ``/<name>/<route>`` are dispatched to ``handlers[name]``, so
    ``server.url(name)`` is a base URL usable with HttpTransport.
    """

    def __init__(self, handlers: Mapping[str, Handler]):
        self.handlers = dict(handlers)
        outer = self

        class _Req(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                parts = self.path.strip("/").split("/", 1)
                handler = outer.handlers.get(parts[0])
                if handler is None or len(parts) != 2:
                    return self._reply(404, {"error": "not found"})
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                    body = handler("/" + parts[1], payload)
                except MockHTTPError as e:
                    return self._reply(e.status or 500, {"error": str(e)})
                except Exception as e:  # surface mock bugs as 500s, like a real server
                    return self._reply(500, {"error": repr(e)})
                self._reply(200, body)

            def _reply(self, status, body):
                data = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), _Req)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def url(self, name: str) -> str:
        return f"{self.base_url}/{name}"

    def __enter__(self) -> "MockServer":
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
