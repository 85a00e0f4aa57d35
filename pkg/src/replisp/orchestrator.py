"""The splice-and-continue loop between a model stream and a Lisp session."""

from __future__ import annotations

import asyncio
import json
import logging
import uuid
from dataclasses import dataclass, field
from typing import AsyncIterator, List, Optional

from .backend import BackendError, GenerationRequest, PrefillUnsupported, build_continuation
from .clock import SYSTEM_CLOCK
from .lisp import EvalBudget, EvalOutcome
from .scanner import (
    CLOSE_TAG,
    CODE_BEGIN,
    CODE_END,
    CODE_FRAGMENT,
    DEFAULT_MAX_CODE_BYTES,
    FLUSH_AS_TEXT,
    OPEN_TAG,
    TEXT,
    UNTERMINATED,
    CodeTooLong,
    TagScanner,
)
from .sessions import Session, SessionStore

log = logging.getLogger(__name__)

REPLACE = "replace"
ANNOTATED = "annotated"
VIEWS = (REPLACE, ANNOTATED)

COMPLETED = "completed"
ROUND_LIMIT = "round_limit"
EVAL_LIMIT = "eval_limit"
BACKEND_ERROR = "backend_error"
SCANNER_ERROR = "scanner_error"


def splice_text(outcome: EvalOutcome) -> str:
    """Captured output, then a newline, then the value or error text."""
    result = outcome.result_text()
    if outcome.output and result:
        return outcome.output + "\n" + result
    return outcome.output + result


def terminal_annotation(status: str) -> str:
    return f"#<replisp: turn stopped ({status})>"


@dataclass(frozen=True)
class SplicePolicy:
    client_view: str = REPLACE
    context_view: str = REPLACE
    result_open: str = "<lisp-result>"
    result_close: str = "</lisp-result>"

    def __post_init__(self):
        for name in ("client_view", "context_view"):
            if getattr(self, name) not in VIEWS:
                raise ValueError(f"{name} must be one of {', '.join(VIEWS)}")
        if not self.result_open or not self.result_close:
            raise ValueError("result literals must be non-empty")
        literals = {self.result_open, self.result_close}
        if len(literals) != 2 or literals & {OPEN_TAG, CLOSE_TAG}:
            raise ValueError("result literals must differ from each other and from the lisp tags")

    def render(self, view: str, code: str, outcome: EvalOutcome) -> str:
        result = splice_text(outcome)
        if view == REPLACE:
            return result
        return self.result_open + code + self.result_close + result

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True)
class TurnLimits:
    max_rounds: int = 8
    max_evals: int = 16
    budget: Optional[EvalBudget] = None

    def __post_init__(self):
        for name in ("max_rounds", "max_evals"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"{name} must be a positive integer")
        if self.max_evals < self.max_rounds:
            raise ValueError("max_evals must be >= max_rounds")

    def merged(self, overrides: Optional[dict]) -> "TurnLimits":
        if not overrides:
            return self
        unknown = set(overrides) - {"max_rounds", "max_evals"}
        if unknown:
            raise ValueError(f"unknown limit {sorted(unknown)[0]!r}")
        return TurnLimits(overrides.get("max_rounds", self.max_rounds), overrides.get("max_evals", self.max_evals), self.budget)


@dataclass
class EvalRecord:
    code: str
    outcome: EvalOutcome
    latency_ms: int

    def to_dict(self) -> dict:
        return {"code": self.code, "outcome": self.outcome.to_dict(), "latency_ms": self.latency_ms}


@dataclass
class RoundTrace:
    index: int
    emitted_chars: int = 0
    evals: List[EvalRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"index": self.index, "emitted_chars": self.emitted_chars, "evals": [e.to_dict() for e in self.evals]}


@dataclass
class TurnTrace:
    request_id: str
    session_id: str
    rounds: List[RoundTrace] = field(default_factory=list)
    status: Optional[str] = None
    error: Optional[str] = None

    @property
    def eval_count(self) -> int:
        return sum(len(r.evals) for r in self.rounds)

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "session_id": self.session_id,
            "status": self.status,
            "error": self.error,
            "eval_count": self.eval_count,
            "rounds": [r.to_dict() for r in self.rounds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)


@dataclass(frozen=True)
class TurnEvent:
    """``text`` carries client-visible text; the single ``end`` event carries the status."""

    kind: str
    text: str = ""


class Orchestrator:
    def __init__(
        self,
        backend,
        store: SessionStore,
        *,
        policy: Optional[SplicePolicy] = None,
        limits: Optional[TurnLimits] = None,
        max_code_bytes: int = DEFAULT_MAX_CODE_BYTES,
        unterminated: str = FLUSH_AS_TEXT,
        clock=SYSTEM_CLOCK,
    ):
        self.backend = backend
        self.store = store
        self.policy = policy or SplicePolicy()
        self.limits = limits or TurnLimits()
        self.max_code_bytes = max_code_bytes
        self.unterminated = unterminated
        self.clock = clock

    def direct_eval(self, session_id: str, source: str) -> EvalOutcome:
        """Evaluate in a session without the model, exactly as a tag would."""
        session = self.store.get_or_create(session_id)
        return self.store.eval_in_session(session, source)

    async def run_turn(
        self,
        request: GenerationRequest,
        session: Session,
        *,
        limits: Optional[TurnLimits] = None,
        policy: Optional[SplicePolicy] = None,
        request_id: Optional[str] = None,
        trace: Optional[TurnTrace] = None,
    ) -> AsyncIterator[TurnEvent]:
        """Yield client events for one user request; fills ``trace`` as it goes.

        The caller is expected to hold the session lease for the whole turn.
        """
        limits = limits or self.limits
        policy = policy or self.policy
        if trace is None:
            trace = TurnTrace(request_id or uuid.uuid4().hex, session.id)
        session.turns += 1
        turn = session.turns
        req = request
        restarts = 0
        context = ""
        status = None
        while status is None:
            rnd = RoundTrace(restarts)
            trace.rounds.append(rnd)
            pending: List[str] = []  # text the client sees after the splice
            code: Optional[List[str]] = None
            closed = False
            stream = None
            try:
                stream = await self.backend.open_stream(req)
                scanner = TagScanner(self.max_code_bytes, self.unterminated)
                async for ev in stream:
                    if ev.delta:
                        for sev in scanner.feed(ev.delta):
                            if closed:
                                # remainder of the closing chunk, up to the next block
                                if sev.kind != TEXT:
                                    break
                                pending.append(sev.payload)
                            elif sev.kind == TEXT:
                                context += sev.payload
                                rnd.emitted_chars += len(sev.payload)
                                yield TurnEvent("text", sev.payload)
                            elif sev.kind == CODE_BEGIN:
                                code = []
                            elif sev.kind == CODE_FRAGMENT:
                                code.append(sev.payload)
                            elif sev.kind == CODE_END:
                                closed = True
                    if closed:
                        await stream.cancel()
                        break
                    if ev.done:
                        break
                if not closed:
                    for sev in scanner.finish():
                        if sev.kind == TEXT:
                            text = sev.payload
                        elif sev.kind == UNTERMINATED and self.unterminated == FLUSH_AS_TEXT:
                            # never evaluate half a form
                            text = OPEN_TAG + sev.payload
                        else:
                            status = SCANNER_ERROR
                            trace.error = "unterminated code block"
                            break
                        context += text
                        rnd.emitted_chars += len(text)
                        yield TurnEvent("text", text)
                    status = status or COMPLETED
                    break
            except CodeTooLong as exc:
                status, trace.error = SCANNER_ERROR, str(exc)
                break
            except BackendError as exc:
                status, trace.error = BACKEND_ERROR, f"{exc.code}: {exc}"
                break
            finally:
                if stream is not None:
                    await stream.cancel()

            source = "".join(code or [])
            if trace.eval_count >= limits.max_evals:
                status = EVAL_LIMIT
                break
            started = self.clock.monotonic()
            outcome = await asyncio.to_thread(self.store.eval_in_session, session, source, turn, limits.budget)
            latency = int(round((self.clock.monotonic() - started) * 1000))
            rnd.evals.append(EvalRecord(source, outcome, latency))
            log.info(
                "evaluation",
                extra={"session_id": session.id, "request_id": trace.request_id, "status": outcome.status,
                       "error_kind": outcome.error_kind, "steps": outcome.steps_used, "latency_ms": latency},
            )
            shown = policy.render(policy.client_view, source, outcome)
            context += policy.render(policy.context_view, source, outcome)
            rest = "".join(pending)
            context += rest
            rnd.emitted_chars += len(shown) + len(rest)
            if shown or rest:
                yield TurnEvent("text", shown + rest)
            if restarts >= limits.max_rounds:
                status = ROUND_LIMIT
                break
            try:
                req = build_continuation(request, context, getattr(self.backend, "prefill_supported", True))
            except PrefillUnsupported:
                # nothing to continue with; the splice is the end of the answer
                status = COMPLETED
                break
            restarts += 1

        trace.status = status
        if status in (ROUND_LIMIT, EVAL_LIMIT, SCANNER_ERROR):
            note = terminal_annotation(status)
            trace.rounds[-1].emitted_chars += len(note)
            yield TurnEvent("text", note)
        yield TurnEvent("end", status)

    async def collect(self, request: GenerationRequest, session: Session, **kw) -> tuple:
        """Run a whole turn; returns (client text, TurnTrace)."""
        trace = kw.pop("trace", None) or TurnTrace(kw.pop("request_id", None) or uuid.uuid4().hex, session.id)
        parts = []
        async for ev in self.run_turn(request, session, trace=trace, **kw):
            if ev.kind == "text":
                parts.append(ev.text)
        return "".join(parts), trace
