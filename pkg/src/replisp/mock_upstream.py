"""A fake OpenAI-compatible upstream that streams a MockScript over SSE.

Serving the mock through real HTTP lets the SSE client, and the gateway
in front of it, be exercised end to end.
"""

from __future__ import annotations

import json

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .backend import BackendError, GenerationRequest, HttpStatusError, InvalidRequest, MockBackend, ScriptMismatch


def create_upstream_app(mock: MockBackend) -> FastAPI:
    app = FastAPI(title="replisp mock upstream")
    app.state.mock = mock

    @app.post("/v1/chat/completions")
    async def completions(request: Request):
        try:
            req = GenerationRequest.from_body(await request.json())
        except (ValueError, InvalidRequest) as exc:
            return JSONResponse({"error": {"message": str(exc)}}, status_code=400)
        try:
            stream = await mock.open_stream(req)
        except ScriptMismatch as exc:
            return JSONResponse({"error": {"type": "script_mismatch", "message": str(exc)}}, status_code=409)
        except HttpStatusError as exc:
            return JSONResponse({"error": {"message": exc.body}}, status_code=exc.status)
        except BackendError as exc:
            return JSONResponse({"error": {"message": str(exc)}}, status_code=500)

        def frame(delta, finish=None):
            obj = {"id": "mock", "object": "chat.completion.chunk", "model": req.model,
                   "choices": [{"index": 0, "delta": delta, "finish_reason": finish}]}
            return f"data: {json.dumps(obj)}\n\n"

        async def body():
            try:
                yield frame({"role": "assistant"})
                async for ev in stream:
                    if ev.delta:
                        yield frame({"content": ev.delta})
                    if ev.done:
                        yield frame({}, ev.finish_reason or "stop")
                yield "data: [DONE]\n\n"
            finally:
                await stream.cancel()

        return StreamingResponse(body(), media_type="text/event-stream")

    return app
