"""OpenAI-compatible HTTP surface for the gateway."""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import os
import uuid
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from . import journal
from .backend import GenerationRequest, InvalidRequest, MockBackend, MockScript, OpenAIBackend
from .bridge import Bridge, BridgeConfig, BridgeError, BridgeEvaluator, PerSessionBridgeEvaluator
from .clock import SYSTEM_CLOCK, FixedClock
from .config import ServiceConfig
from .orchestrator import BACKEND_ERROR, Orchestrator, TurnTrace
from .sessions import (
    EmbeddedEvaluator,
    InvalidSessionId,
    ReplayDivergence,
    SessionBusy,
    SessionError,
    SessionStore,
    StoreFull,
    UnknownSession,
    validate_session_id,
)

log = logging.getLogger(__name__)

SESSION_HEADER = "X-Replisp-Session"
EVALS_HEADER = "X-Replisp-Evals"


@dataclass
class Gateway:
    """Everything a running service needs."""

    store: SessionStore
    orchestrator: Orchestrator
    bridge: Optional[Bridge] = None
    clock: object = SYSTEM_CLOCK
    sweep_interval_s: float = 60.0

    @property
    def evaluator_kind(self) -> str:
        return "bridge" if self.bridge is not None else getattr(self.store.evaluator, "kind", "embedded")


def build_gateway(cfg: ServiceConfig, env=None) -> Gateway:
    env = os.environ if env is None else env
    clock = FixedClock() if cfg["fixed_clock"] else SYSTEM_CLOCK
    if cfg["backend.kind"] == "mock":
        backend = MockBackend(MockScript.load(cfg["backend.mock_script"]), cfg["backend.prefill_supported"])
    else:
        token_env = cfg["backend.token_env"]
        backend = OpenAIBackend(
            cfg["backend.base_url"],
            token=env.get(token_env) if token_env else None,
            prefill_supported=cfg["backend.prefill_supported"],
            prefill_params=cfg["backend.prefill_params"],
            idle_timeout_ms=cfg["backend.idle_timeout_ms"],
            connect_retries=cfg["backend.connect_retries"],
        )
    bridge = None
    if cfg["evaluator.kind"] == "bridge":
        bridge_config = BridgeConfig(
            cfg["evaluator.bridge.command"],
            eval_timeout_ms=cfg["evaluator.bridge.eval_timeout_ms"],
            restart_limit=cfg["evaluator.bridge.restart_limit"],
            fallback=cfg["evaluator.bridge.fallback"],
        )
        if cfg["evaluator.bridge.processes"] == "per-session":
            evaluator = PerSessionBridgeEvaluator(bridge_config, clock, cfg["capabilities.fs_root"])
        else:
            bridge = Bridge(bridge_config, clock)
            evaluator = BridgeEvaluator(bridge, clock, cfg["capabilities.fs_root"])
    else:
        evaluator = EmbeddedEvaluator(clock, cfg["capabilities.fs_root"])
    store = SessionStore(
        cfg["sessions.data_dir"],
        max_sessions=cfg["sessions.max_sessions"],
        ttl_s=cfg["sessions.ttl_s"],
        queue_depth=cfg["sessions.queue_depth"],
        default_policy=cfg.policy(),
        default_budget=cfg.budget(),
        clock=clock,
        evaluator=evaluator,
    )
    orchestrator = Orchestrator(
        backend,
        store,
        policy=cfg.splice(),
        limits=cfg.limits(),
        max_code_bytes=cfg["scanner.max_code_bytes"],
        unterminated=cfg["scanner.unterminated"],
        clock=clock,
    )
    return Gateway(store, orchestrator, bridge, clock, cfg["sessions.sweep_interval_s"])


def _error(status: int, code: str, message: str, **headers) -> JSONResponse:
    return JSONResponse({"error": {"type": code, "message": message}}, status_code=status, headers=headers or None)


def _session_error(exc: SessionError) -> JSONResponse:
    status = {
        InvalidSessionId: 400,
        SessionBusy: 409,
        ReplayDivergence: 409,
        StoreFull: 429,
        UnknownSession: 404,
    }.get(type(exc), 409)
    return _error(status, exc.code, str(exc))


def _completion_id() -> str:
    return "chatcmpl-" + uuid.uuid4().hex[:24]


def _sse(obj) -> bytes:
    return b"data: " + json.dumps(obj, ensure_ascii=False).encode("utf-8") + b"\n\n"


def create_app(gw: Gateway, *, start_bridge: bool = True) -> FastAPI:
    @contextlib.asynccontextmanager
    async def lifespan(app):
        if gw.bridge is not None and start_bridge:
            try:
                await asyncio.to_thread(gw.bridge.start)
            except BridgeError as exc:
                log.error("bridge failed to start", extra={"error": str(exc)})
        sweeper = asyncio.create_task(_sweep_forever(gw)) if gw.sweep_interval_s else None
        log.info("service started", extra={"evaluator": gw.evaluator_kind})
        try:
            yield
        finally:
            if sweeper is not None:
                sweeper.cancel()
            await asyncio.to_thread(gw.store.shutdown)
            if gw.bridge is not None:
                gw.bridge.shutdown()
            stop = getattr(gw.store.evaluator, "shutdown", None)
            if stop is not None:
                stop()
            log.info("service stopped")

    app = FastAPI(title="replisp", lifespan=lifespan)
    app.state.gateway = gw

    @app.get("/healthz")
    async def healthz():
        body = {"status": "ok", "evaluator": gw.evaluator_kind, "sessions": gw.store.live_count()}
        if gw.bridge is not None:
            body["bridge"] = {"state": gw.bridge.state, "restarts_this_hour": gw.bridge.restarts_this_hour}
            if gw.bridge.state != "running":
                body["status"] = "degraded"
        elif isinstance(gw.store.evaluator, PerSessionBridgeEvaluator):
            body["bridge"] = {"processes": gw.store.evaluator.process_count}
        return body

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            body = await request.json()
        except (ValueError, UnicodeDecodeError):
            return _error(400, "invalid_request_error", "body is not valid JSON")
        try:
            req = GenerationRequest.from_body(body)
        except InvalidRequest as exc:
            return _error(400, "invalid_request_error", str(exc))
        # the gateway always streams upstream
        req.stream = True
        stream = bool(body.get("stream", False))
        session_id = request.headers.get(SESSION_HEADER)
        stack = contextlib.AsyncExitStack()
        try:
            if session_id is None:
                session = gw.store.create_ephemeral()
            else:
                session = gw.store.get_or_create(session_id)
                await stack.enter_async_context(gw.store.lease(session))
        except SessionError as exc:
            await stack.aclose()
            return _session_error(exc)

        trace = TurnTrace(_completion_id(), session.id)
        events = gw.orchestrator.run_turn(req, session, trace=trace)
        stack.push_async_callback(events.aclose)

        def log_trace():
            log.info("turn", extra={"trace": trace.to_dict()})

        if not stream:
            parts = []
            try:
                async for ev in events:
                    if ev.kind == "text":
                        parts.append(ev.text)
            except SessionError as exc:
                return _session_error(exc)
            finally:
                await stack.aclose()
                log_trace()
            if trace.status == BACKEND_ERROR and not parts:
                return _error(502, "backend_error", trace.error or "backend failure", **{EVALS_HEADER: str(trace.eval_count)})
            content = "".join(parts)
            return JSONResponse(
                {
                    "id": trace.request_id,
                    "object": "chat.completion",
                    "created": int(gw.clock.now()),
                    "model": req.model,
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
                    "replisp": {"status": trace.status, "evals": trace.eval_count, "session": session_id},
                },
                headers={EVALS_HEADER: str(trace.eval_count)},
            )

        # peek so early backend failures can still be a 502
        try:
            first = await events.__anext__()
        except SessionError as exc:
            await stack.aclose()
            return _session_error(exc)
        except BaseException:
            await stack.aclose()
            raise
        if first.kind == "end" and first.text == BACKEND_ERROR:
            await stack.aclose()
            log_trace()
            return _error(502, "backend_error", trace.error or "backend failure", **{EVALS_HEADER: "0"})

        created = int(gw.clock.now())

        def chunk(delta: dict, finish=None, **extra):
            obj = {
                "id": trace.request_id,
                "object": "chat.completion.chunk",
                "created": created,
                "model": req.model,
                "choices": [{"index": 0, "delta": delta, "finish_reason": finish}],
            }
            obj.update(extra)
            return _sse(obj)

        async def body_iter():
            try:
                yield chunk({"role": "assistant", "content": ""})
                ev = first
                while True:
                    if ev.kind == "text":
                        if ev.text:
                            yield chunk({"content": ev.text})
                    else:
                        break
                    ev = await events.__anext__()
                info = {"status": trace.status, "evals": trace.eval_count, "session": session_id}
                if trace.status == BACKEND_ERROR:
                    yield _sse({"error": {"type": "backend_error", "message": trace.error, "code": 502}, "replisp": info})
                else:
                    yield chunk({}, "stop", replisp=info)
                yield b"data: [DONE]\n\n"
            except SessionError as exc:
                yield _sse({"error": {"type": exc.code, "message": str(exc)}})
                yield b"data: [DONE]\n\n"
            finally:
                await stack.aclose()
                log_trace()

        return StreamingResponse(body_iter(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache", "X-Accel-Buffering": "no"})

    # -- session admin ------------------------------------------------------

    def _check_id(session_id: str):
        try:
            validate_session_id(session_id)
        except InvalidSessionId as exc:
            return _session_error(exc)
        return None

    @app.get("/v1/sessions")
    async def list_sessions():
        return {"sessions": gw.store.list_sessions()}

    @app.get("/v1/sessions/{session_id}")
    async def get_session(session_id: str):
        bad = _check_id(session_id)
        if bad:
            return bad
        live = gw.store.get(session_id)
        if live is not None:
            return live.info()
        for item in gw.store.list_sessions():
            if item["id"] == session_id:
                return item
        return _error(404, "UnknownSession", f"no session {session_id}")

    @app.delete("/v1/sessions/{session_id}")
    async def delete_session(session_id: str):
        bad = _check_id(session_id)
        if bad:
            return bad
        if not await asyncio.to_thread(gw.store.delete, session_id):
            return _error(404, "UnknownSession", f"no session {session_id}")
        forget = getattr(gw.store.evaluator, "forget", None)
        if forget:
            forget(session_id)
        return {"deleted": session_id}

    @app.get("/v1/sessions/{session_id}/journal")
    async def get_journal(session_id: str):
        bad = _check_id(session_id)
        if bad:
            return bad
        live = gw.store.get(session_id)
        if live is not None:
            entries = list(live.journal)
        elif gw.store.has_snapshot(session_id):
            try:
                _, entries = journal.load(gw.store.journal_path(session_id))
            except journal.JournalFormatError as exc:
                return _error(500, "JournalFormatError", str(exc))
        else:
            return _error(404, "UnknownSession", f"no session {session_id}")
        return {"id": session_id, "entries": [e.to_dict() for e in entries]}

    @app.post("/v1/sessions/{session_id}/eval")
    async def eval_in_session(session_id: str, request: Request):
        bad = _check_id(session_id)
        if bad:
            return bad
        raw = await request.body()
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return _error(400, "invalid_request_error", "body must be UTF-8 JSON")
        if not isinstance(data, dict) or not isinstance(data.get("source"), str):
            return _error(400, "invalid_request_error", "body must be an object with a string 'source'")
        try:
            outcome = await asyncio.to_thread(gw.orchestrator.direct_eval, session_id, data["source"])
        except SessionError as exc:
            return _session_error(exc)
        return outcome.to_dict()

    return app


async def _sweep_forever(gw: Gateway) -> None:
    while True:
        await asyncio.sleep(gw.sweep_interval_s)
        try:
            evicted = await asyncio.to_thread(gw.store.sweep)
            if evicted:
                log.info("sessions evicted", extra={"sessions": evicted})
        except Exception:
            log.exception("sweep failed")
