"""Model backends: an OpenAI-compatible SSE client and a scripted mock.

Streams raise :class:`BackendError` subclasses instead of yielding error
events; after an exception, ``done`` or ``cancel()`` the stream yields
nothing further.
"""

from __future__ import annotations

import asyncio
import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, AsyncIterator, Dict, List, Optional

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
DEFAULT_IDLE_TIMEOUT_MS = 60_000
DEFAULT_PREFILL_PARAMS = {"continue_final_message": True, "add_generation_prompt": False}
MIN_CONTINUATION_TOKENS = 16


class BackendError(Exception):
    code = "BackendError"


class ConnectFailure(BackendError):
    code = "ConnectFailure"


class HttpStatusError(BackendError):
    code = "HttpStatusError"

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"backend returned HTTP {status}")
        self.status = status
        self.body = body


class ProtocolError(BackendError):
    code = "ProtocolError"


class StreamTimeout(BackendError):
    code = "StreamTimeout"


class PrefillUnsupported(BackendError):
    code = "PrefillUnsupported"


class InvalidRequest(ValueError):
    pass


@dataclass
class GenerationRequest:
    model: str
    messages: List[Dict[str, str]]
    params: Dict[str, Any] = field(default_factory=dict)
    stream: bool = True
    prefill: bool = False

    def __post_init__(self):
        if not self.messages:
            raise InvalidRequest("messages must be non-empty")
        for i, msg in enumerate(self.messages):
            if not isinstance(msg, dict) or msg.get("role") not in ROLES:
                raise InvalidRequest(f"messages[{i}]: role must be one of {', '.join(ROLES)}")
            if not isinstance(msg.get("content"), str):
                raise InvalidRequest(f"messages[{i}]: content must be a string")

    @classmethod
    def from_body(cls, body: Any) -> "GenerationRequest":
        """Build from an OpenAI chat-completions JSON body."""
        if not isinstance(body, dict):
            raise InvalidRequest("body must be a JSON object")
        model = body.get("model")
        if not isinstance(model, str) or not model:
            raise InvalidRequest("model must be a non-empty string")
        messages = body.get("messages")
        if not isinstance(messages, list):
            raise InvalidRequest("messages must be a list")
        msgs = []
        for i, msg in enumerate(messages):
            if not isinstance(msg, dict):
                raise InvalidRequest(f"messages[{i}] must be an object")
            content = msg.get("content")
            if isinstance(content, list):
                # content parts: keep the text ones
                content = "".join(p.get("text", "") for p in content if isinstance(p, dict) and p.get("type") == "text")
            msgs.append({"role": msg.get("role"), "content": content})
        params = {k: v for k, v in body.items() if k not in ("model", "messages", "stream")}
        return cls(model, msgs, params, stream=bool(body.get("stream", False)))

    def to_body(self, prefill_params: Optional[dict] = None) -> dict:
        body = dict(self.params)
        body.update(model=self.model, messages=copy.deepcopy(self.messages), stream=self.stream)
        if self.prefill and prefill_params:
            body.update(prefill_params)
        return body

    @property
    def prefix(self) -> Optional[str]:
        """Content of the trailing assistant message, if any."""
        last = self.messages[-1]
        return last["content"] if last["role"] == "assistant" else None


@dataclass(frozen=True)
class TokenEvent:
    delta: str = ""
    done: bool = False
    finish_reason: Optional[str] = None


def build_continuation(original: GenerationRequest, prefix: str, prefill_supported: bool = True) -> GenerationRequest:
    """The request that resumes generation after ``prefix``.

    Always derived from the original request, so successive rounds replace
    the assistant message instead of stacking them. A client-supplied
    trailing assistant message is extended rather than duplicated.
    """
    if not prefill_supported:
        raise PrefillUnsupported("backend is configured without assistant-prefill support")
    messages = copy.deepcopy(original.messages)
    if messages[-1]["role"] == "assistant":
        messages[-1]["content"] += prefix
    else:
        messages.append({"role": "assistant", "content": prefix})
    params = dict(original.params)
    spent = len(prefix) // 4
    for key in ("max_tokens", "max_completion_tokens"):
        if isinstance(params.get(key), int) and not isinstance(params[key], bool):
            params[key] = max(MIN_CONTINUATION_TOKENS, params[key] - spent)
    return GenerationRequest(original.model, messages, params, stream=True, prefill=True)


class BackendStream:
    """An async iterator of TokenEvents with idempotent ``cancel``."""

    def __init__(self, events: AsyncIterator[TokenEvent], on_close=None):
        self._events = events
        self._on_close = on_close
        self.closed = False

    def __aiter__(self):
        return self

    async def __anext__(self) -> TokenEvent:
        if self.closed:
            raise StopAsyncIteration
        try:
            event = await self._events.__anext__()
        except StopAsyncIteration:
            await self.cancel()
            raise
        except BaseException:
            await self.cancel()
            raise
        if self.closed:
            raise StopAsyncIteration
        if event.done:
            await self.cancel()
        return event

    async def cancel(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            await self._events.aclose()
        except Exception:
            pass
        if self._on_close is not None:
            on_close, self._on_close = self._on_close, None
            await on_close()


# -- SSE ----------------------------------------------------------------------


def parse_sse_data(data: str) -> Optional[TokenEvent]:
    """Map one SSE ``data`` payload to an event; None for frames without content."""
    if data.strip() == "[DONE]":
        return TokenEvent(done=True, finish_reason="stop")
    try:
        obj = json.loads(data)
    except ValueError:
        raise ProtocolError(f"malformed SSE frame: {data[:80]!r}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("SSE frame is not a JSON object")
    if "error" in obj:
        err = obj["error"]
        message = err.get("message") if isinstance(err, dict) else err
        raise ProtocolError(f"backend stream error: {message}")
    choices = obj.get("choices")
    if not isinstance(choices, list):
        raise ProtocolError("SSE frame has no choices list")
    if not choices:
        return None
    choice = choices[0]
    if not isinstance(choice, dict):
        raise ProtocolError("malformed choice")
    delta = choice.get("delta") or {}
    content = delta.get("content") if isinstance(delta, dict) else None
    if content is not None and not isinstance(content, str):
        raise ProtocolError("delta content is not a string")
    reason = choice.get("finish_reason")
    if not content and not reason:
        return None
    return TokenEvent(delta=content or "", finish_reason=reason)


async def iter_sse(lines: AsyncIterator[str]) -> AsyncIterator[str]:
    """Yield the data payload of each SSE event (multi-line data is joined)."""
    buf: List[str] = []
    async for line in lines:
        if line == "":
            if buf:
                yield "\n".join(buf)
                buf = []
            continue
        if line.startswith(":"):
            continue
        name, _, value = line.partition(":")
        if value.startswith(" "):
            value = value[1:]
        if name == "data":
            buf.append(value)
    if buf:
        yield "\n".join(buf)


class OpenAIBackend:
    kind = "openai"

    def __init__(
        self,
        base_url: str,
        *,
        token: Optional[str] = None,
        token_env: Optional[str] = None,
        prefill_supported: bool = True,
        prefill_params: Optional[dict] = None,
        idle_timeout_ms: int = DEFAULT_IDLE_TIMEOUT_MS,
        connect_retries: int = 1,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self._token = token if token is not None else (os.environ.get(token_env) if token_env else None)
        self.prefill_supported = prefill_supported
        self.prefill_params = DEFAULT_PREFILL_PARAMS if prefill_params is None else prefill_params
        self.idle_timeout = idle_timeout_ms / 1000
        self.connect_retries = connect_retries
        self._transport = transport

    def __repr__(self):
        # never show the token
        return f"OpenAIBackend({self.base_url!r}, prefill_supported={self.prefill_supported})"

    def _headers(self) -> dict:
        headers = {"Accept": "text/event-stream", "Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        return headers

    async def open_stream(self, req: GenerationRequest) -> BackendStream:
        body = req.to_body(self.prefill_params)
        body["stream"] = True
        timeout = httpx.Timeout(connect=10.0, read=self.idle_timeout, write=30.0, pool=10.0)
        client = httpx.AsyncClient(timeout=timeout, transport=self._transport)
        url = f"{self.base_url}/chat/completions"
        attempt = 0
        while True:
            try:
                resp = await client.send(client.build_request("POST", url, json=body, headers=self._headers()), stream=True)
                break
            except (httpx.ConnectError, httpx.ConnectTimeout) as exc:
                if attempt < self.connect_retries:
                    attempt += 1
                    log.warning("backend connect failed, retrying", extra={"url": url})
                    continue
                await client.aclose()
                raise ConnectFailure(f"cannot connect to {url}: {exc.__class__.__name__}") from None
            except BaseException:
                await client.aclose()
                raise
        if resp.status_code != 200:
            text = (await resp.aread()).decode("utf-8", "replace")[:500]
            await resp.aclose()
            await client.aclose()
            raise HttpStatusError(resp.status_code, text)

        async def close():
            await resp.aclose()
            await client.aclose()

        return BackendStream(self._events(resp), close)

    async def _events(self, resp: httpx.Response) -> AsyncIterator[TokenEvent]:
        lines = resp.aiter_lines()
        frames = iter_sse(lines)
        while True:
            try:
                data = await asyncio.wait_for(frames.__anext__(), self.idle_timeout)
            except StopAsyncIteration:
                # connection closed without [DONE]
                yield TokenEvent(done=True, finish_reason="stop")
                return
            except (asyncio.TimeoutError, httpx.ReadTimeout):
                raise StreamTimeout(f"no event within {int(self.idle_timeout * 1000)} ms") from None
            except httpx.HTTPError as exc:
                raise ProtocolError(f"stream broken: {exc.__class__.__name__}") from None
            except UnicodeDecodeError:
                raise ProtocolError("stream is not valid UTF-8") from None
            event = parse_sse_data(data)
            if event is None:
                continue
            if event.finish_reason and not event.done:
                if event.delta:
                    yield TokenEvent(delta=event.delta)
                yield TokenEvent(done=True, finish_reason=event.finish_reason)
                return
            yield event
            if event.done:
                return


# -- mock ---------------------------------------------------------------------

MOCK_HEADER = "#replisp-mock v1"


class ScriptError(ValueError):
    """Malformed mock script."""


class ScriptMismatch(AssertionError):
    """A continuation request did not match the script."""

    def __init__(self, message: str, turn: int = 0, round: int = 0):
        super().__init__(message)
        self.turn = turn
        self.round = round


@dataclass
class MockRound:
    expect: Optional[str]
    emit: List[str]
    repeat: int = 1
    finish_reason: str = "stop"
    status: Optional[int] = None
    delay_ms: int = 0
    line: int = 0


@dataclass
class MockTurn:
    user: str = ""
    session: Optional[str] = None
    limits: Dict[str, int] = field(default_factory=dict)
    expect_text: Optional[str] = None
    rounds: List[MockRound] = field(default_factory=list)
    line: int = 0


@dataclass
class MockScript:
    turns: List[MockTurn]

    @classmethod
    def parse(cls, text: str) -> "MockScript":
        lines = text.splitlines()
        if not lines or lines[0].strip() != MOCK_HEADER:
            raise ScriptError(f"line 1: expected header {MOCK_HEADER!r}")
        turns: List[MockTurn] = []
        ended = False
        for no, raw in enumerate(lines[1:], start=2):
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            if ended:
                raise ScriptError(f"line {no}: record after end")
            try:
                rec = json.loads(raw)
            except ValueError as exc:
                raise ScriptError(f"line {no}: invalid JSON: {exc}") from None
            if not isinstance(rec, dict):
                raise ScriptError(f"line {no}: record must be an object")
            kind = rec.get("type")
            if kind == "turn":
                turns.append(MockTurn(
                    user=str(rec.get("user", "")),
                    session=rec.get("session"),
                    limits=dict(rec.get("limits") or {}),
                    expect_text=rec.get("expect_text"),
                    line=no,
                ))
            elif kind == "round":
                if not turns:
                    turns.append(MockTurn(line=no))
                emit = rec.get("emit", [])
                if not isinstance(emit, list) or not all(isinstance(c, str) for c in emit):
                    raise ScriptError(f"line {no}: emit must be a list of strings")
                expect = rec.get("expect")
                if expect is not None and not isinstance(expect, str):
                    raise ScriptError(f"line {no}: expect must be a string or null")
                repeat = rec.get("repeat", 1)
                if not isinstance(repeat, int) or repeat == 0 or repeat < -1:
                    raise ScriptError(f"line {no}: repeat must be a positive integer or -1")
                if repeat != 1 and expect is not None:
                    raise ScriptError(f"line {no}: repeated rounds must use a wildcard expect")
                turns[-1].rounds.append(MockRound(
                    expect=expect,
                    emit=emit,
                    repeat=repeat,
                    finish_reason=rec.get("finish_reason", "stop"),
                    status=rec.get("status"),
                    delay_ms=int(rec.get("delay_ms", 0)),
                    line=no,
                ))
            elif kind == "end":
                ended = True
            else:
                raise ScriptError(f"line {no}: unknown record type {kind!r}")
        return cls(turns)

    @classmethod
    def load(cls, path) -> "MockScript":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def single(cls, *rounds) -> "MockScript":
        """Convenience: one turn of ``(expect, emit)`` pairs; the first expect may be None."""
        return cls([MockTurn(rounds=[MockRound(expect, list(emit)) for expect, emit in rounds])])


class MockBackend:
    """Replays a MockScript and asserts every continuation prefix."""

    kind = "mock"

    def __init__(self, script: MockScript, prefill_supported: bool = True):
        self.script = script
        self.prefill_supported = prefill_supported
        self.requests: List[GenerationRequest] = []
        self._queue = [(t, r) for t, turn in enumerate(script.turns) for r in range(len(turn.rounds))]
        self._pos = 0
        self._used = 0  # times the current round has been served
        self._lock = asyncio.Lock()
        self.mismatch: Optional[ScriptMismatch] = None

    def _current(self):
        if self._pos >= len(self._queue):
            return None
        t, r = self._queue[self._pos]
        return t, r, self.script.turns[t].rounds[r]

    def _advance(self):
        cur = self._current()
        if cur is None:
            return
        self._used += 1
        if cur[2].repeat != -1 and self._used >= cur[2].repeat:
            self._pos += 1
            self._used = 0

    async def open_stream(self, req: GenerationRequest) -> BackendStream:
        async with self._lock:
            self.requests.append(req)
            cur = self._current()
            if cur is None:
                self.mismatch = ScriptMismatch("script exhausted: unexpected extra request")
                raise self.mismatch
            t, r, rnd = cur
            if rnd.expect is not None and req.prefix != rnd.expect:
                self.mismatch = ScriptMismatch(
                    f"turn {t} round {r} (line {rnd.line}): expected prefix {rnd.expect!r}, got {req.prefix!r}", t, r
                )
                raise self.mismatch
            self._advance()
        if rnd.status is not None:
            raise HttpStatusError(rnd.status, "scripted failure")
        return BackendStream(self._emit(rnd))

    async def _emit(self, rnd: MockRound) -> AsyncIterator[TokenEvent]:
        for chunk in rnd.emit:
            if rnd.delay_ms:
                await asyncio.sleep(rnd.delay_ms / 1000)
            else:
                await asyncio.sleep(0)
            yield TokenEvent(delta=chunk)
        yield TokenEvent(done=True, finish_reason=rnd.finish_reason)

    def turn_complete(self, turn: int) -> bool:
        """True when every round of ``turn`` has been served at least once."""
        for pos in range(len(self._queue)):
            t, r = self._queue[pos]
            if t != turn:
                continue
            rnd = self.script.turns[t].rounds[r]
            if pos > self._pos or (pos == self._pos and not (rnd.repeat == -1 and self._used > 0)):
                return False
        return True

    def skip_turn(self, turn: int) -> None:
        """Drop unserved rounds of ``turn`` (after a failed turn)."""
        while self._pos < len(self._queue) and self._queue[self._pos][0] <= turn:
            self._pos += 1
            self._used = 0

    def verify_complete(self) -> None:
        if self.mismatch is not None:
            raise self.mismatch
        for t in range(len(self.script.turns)):
            if not self.turn_complete(t):
                pos = self._pos
                rt, rr = self._queue[pos] if pos < len(self._queue) else (t, 0)
                raise ScriptMismatch(f"turn {rt} round {rr} was never requested", rt, rr)
