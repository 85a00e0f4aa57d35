"""Scripted end-to-end runs: every turn of a MockScript through the orchestrator."""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field
from typing import List, Optional

from .backend import GenerationRequest, MockBackend, MockScript, ScriptMismatch
from .clock import SYSTEM_CLOCK
from .orchestrator import COMPLETED, Orchestrator, SplicePolicy, TurnLimits, TurnTrace
from .sessions import SessionStore


@dataclass
class TurnResult:
    text: str
    trace: TurnTrace


@dataclass
class TranscriptResult:
    turns: List[TurnResult] = field(default_factory=list)
    failure: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failure is None

    @property
    def stdout(self) -> str:
        return "".join(t.text + "\n" for t in self.turns)

    def trace_json(self) -> str:
        doc = {"ok": self.ok, "failure": self.failure, "turns": [t.trace.to_dict() for t in self.turns]}
        return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


async def run_script(
    script: MockScript,
    store: SessionStore,
    *,
    limits: Optional[TurnLimits] = None,
    policy: Optional[SplicePolicy] = None,
    clock=SYSTEM_CLOCK,
    model: str = "mock",
) -> TranscriptResult:
    """Run every turn; stops at the first expectation failure.

    A turn without a ``session`` runs in its own ephemeral session.
    """
    mock = MockBackend(script)
    orch = Orchestrator(mock, store, policy=policy, limits=limits, clock=clock)
    result = TranscriptResult()
    for index, turn in enumerate(script.turns):
        if turn.session is None:
            session = store.create_ephemeral(session_id=f"ephemeral-{index}")
        else:
            session = store.get_or_create(turn.session)
        turn_limits = orch.limits.merged(turn.limits)
        request = GenerationRequest(model, [{"role": "user", "content": turn.user}])
        trace = TurnTrace(f"turn-{index}", session.id)
        try:
            async with store.lease(session):
                text, trace = await orch.collect(request, session, limits=turn_limits, trace=trace)
        except ScriptMismatch as exc:
            result.turns.append(TurnResult("", trace))
            result.failure = str(exc)
            return result
        result.turns.append(TurnResult(text, trace))
        if not mock.turn_complete(index):
            rounds = len(trace.rounds)
            result.failure = f"turn {index} round {rounds}: scripted round was never requested (turn ended {trace.status})"
            return result
        if trace.status != COMPLETED:
            result.failure = f"turn {index}: terminal status {trace.status}" + (f" ({trace.error})" if trace.error else "")
            return result
        if turn.expect_text is not None and text != turn.expect_text:
            result.failure = f"turn {index} (line {turn.line}): expected text {turn.expect_text!r}, got {text!r}"
            return result
    try:
        mock.verify_complete()
    except ScriptMismatch as exc:
        result.failure = str(exc)
    return result


def run_script_sync(script: MockScript, store: SessionStore, **kw) -> TranscriptResult:
    return asyncio.run(run_script(script, store, **kw))
