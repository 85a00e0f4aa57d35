"""Persistent per-conversation Lisp sessions.

A session's durable state is its journal of successful top-level sources;
the environment is rebuilt by replaying the journal into a fresh builtin
environment. Closures are never serialized.
"""

from __future__ import annotations

import asyncio
import logging
import re
import shutil
import threading
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from . import journal
from .clock import SYSTEM_CLOCK
from .journal import JournalEntry, JournalFormatError
from .lisp import CapabilityPolicy, Env, EvalBudget, EvalOutcome, eval_top_level

log = logging.getLogger(__name__)

SESSION_ID_RE = re.compile(r"[A-Za-z0-9._-]{1,128}\Z")

DEFAULT_MAX_SESSIONS = 1024
DEFAULT_TTL_S = 24 * 3600
DEFAULT_QUEUE_DEPTH = 16
REPLAY_FACTOR = 10


class SessionError(Exception):
    """Base class; ``code`` names the error kind on the wire."""

    code = "SessionError"


class InvalidSessionId(SessionError):
    code = "InvalidSessionId"


class PolicyMismatch(SessionError):
    code = "PolicyMismatch"


class StoreFull(SessionError):
    code = "StoreFull"


class SessionBusy(SessionError):
    code = "SessionBusy"


class UnknownSession(SessionError):
    code = "UnknownSession"


class ReplayDivergence(SessionError):
    code = "ReplayDivergence"

    def __init__(self, session_id: str, seq: int, error: Optional[dict]):
        kind = error["kind"] if error else "?"
        message = error["message"] if error else ""
        super().__init__(f"session {session_id}: journal entry {seq} failed on replay: {kind} {message}")
        self.session_id = session_id
        self.seq = seq
        self.error = error


def validate_session_id(session_id: str) -> str:
    if not isinstance(session_id, str) or not SESSION_ID_RE.match(session_id):
        raise InvalidSessionId(f"invalid session id {session_id!r}: use 1-128 characters from [A-Za-z0-9._-]")
    return session_id


@dataclass(eq=False)
class Session:
    id: str
    env: Optional[Env]
    policy: CapabilityPolicy
    budget: EvalBudget
    created_at: float
    last_used_at: float
    journal: List[JournalEntry] = field(default_factory=list)
    eval_count: int = 0
    turns: int = 0
    persistent: bool = True
    waiting: int = 0
    leases: int = 0
    eval_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    turn_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def in_flight(self) -> bool:
        return self.waiting > 0 or self.leases > 0 or self.eval_lock.locked()

    @property
    def next_seq(self) -> int:
        return len(self.journal)

    def meta(self) -> dict:
        return {
            "id": self.id,
            "policy": self.policy.to_dict(),
            "budget": self.budget.to_dict(),
            "created_at": self.created_at,
            "last_used_at": self.last_used_at,
            "eval_count": self.eval_count,
            "turns": self.turns,
        }

    def info(self) -> dict:
        return {
            "id": self.id,
            "loaded": True,
            "eval_count": self.eval_count,
            "journal_length": len(self.journal),
            "created_at": self.created_at,
            "last_used_at": self.last_used_at,
            "policy": self.policy.to_dict(),
            "persistent": self.persistent,
        }


class EmbeddedEvaluator:
    """Evaluates sources with the in-process interpreter."""

    kind = "embedded"

    def __init__(self, clock=SYSTEM_CLOCK, fs_root: Optional[str] = None):
        self.clock = clock
        self.fs_root = fs_root

    def new_env(self, policy: CapabilityPolicy) -> Env:
        return Env(policy, fs_root=self.fs_root)

    def evaluate(self, session: Session, source: str, budget: Optional[EvalBudget] = None) -> EvalOutcome:
        return eval_top_level(source, session.env, budget or session.budget, clock=self.clock.monotonic)

    def replay(self, session: Session, entries: List[JournalEntry]) -> None:
        budget = session.budget.scaled(REPLAY_FACTOR)
        for entry in entries:
            outcome = eval_top_level(entry.source, session.env, budget, clock=self.clock.monotonic)
            if not outcome.ok:
                raise ReplayDivergence(session.id, entry.seq, outcome.error)


class SessionStore:
    def __init__(
        self,
        data_dir: Optional[str] = None,
        *,
        max_sessions: int = DEFAULT_MAX_SESSIONS,
        ttl_s: float = DEFAULT_TTL_S,
        queue_depth: int = DEFAULT_QUEUE_DEPTH,
        default_policy: Optional[CapabilityPolicy] = None,
        default_budget: Optional[EvalBudget] = None,
        clock=SYSTEM_CLOCK,
        evaluator=None,
    ):
        self.data_dir = Path(data_dir) if data_dir else None
        self.max_sessions = max_sessions
        self.ttl_s = ttl_s
        self.queue_depth = queue_depth
        self.default_policy = default_policy or CapabilityPolicy()
        self.default_budget = default_budget or EvalBudget()
        self.clock = clock
        self.evaluator = evaluator or EmbeddedEvaluator(clock)
        self._sessions: Dict[str, Session] = {}
        self._corrupt: Dict[str, ReplayDivergence] = {}
        self._lock = threading.RLock()

    # -- paths --------------------------------------------------------------

    @property
    def sessions_dir(self) -> Optional[Path]:
        return self.data_dir / "sessions" if self.data_dir else None

    def journal_path(self, session_id: str) -> Path:
        if self.sessions_dir is None:
            raise SessionError("no data_dir configured")
        return self.sessions_dir / f"{validate_session_id(session_id)}.journal"

    def persisted_ids(self) -> List[str]:
        if self.sessions_dir is None or not self.sessions_dir.is_dir():
            return []
        return sorted(p.name[: -len(".journal")] for p in self.sessions_dir.glob("*.journal"))

    def has_snapshot(self, session_id: str) -> bool:
        return self.sessions_dir is not None and self.journal_path(session_id).exists()

    # -- lifecycle ----------------------------------------------------------

    def _new_session(self, session_id: str, policy: CapabilityPolicy, persistent: bool) -> Session:
        now = self.clock.now()
        return Session(
            id=session_id,
            env=self.evaluator.new_env(policy),
            policy=policy,
            budget=self.default_budget,
            created_at=now,
            last_used_at=now,
            persistent=persistent,
        )

    def create_ephemeral(self, policy: Optional[CapabilityPolicy] = None, session_id: Optional[str] = None) -> Session:
        """A session that is never registered or persisted."""
        session_id = session_id or f"ephemeral-{uuid.uuid4().hex[:12]}"
        return self._new_session(session_id, policy or self.default_policy, False)

    def get(self, session_id: str) -> Optional[Session]:
        with self._lock:
            return self._sessions.get(session_id)

    def exists(self, session_id: str) -> bool:
        validate_session_id(session_id)
        return session_id in self._sessions or self.has_snapshot(session_id)

    def get_or_create(self, session_id: str, policy: Optional[CapabilityPolicy] = None) -> Session:
        validate_session_id(session_id)
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                if session_id in self._corrupt:
                    raise self._corrupt[session_id]
                self._make_room()
                if self.has_snapshot(session_id):
                    session = self._restore_locked(session_id)
                else:
                    session = self._new_session(session_id, policy or self.default_policy, True)
                    self._sessions[session_id] = session
            if policy is not None and policy != session.policy:
                raise PolicyMismatch(
                    f"session {session_id} was created with policy {session.policy.to_dict()}, not {policy.to_dict()}"
                )
            return session

    def _make_room(self) -> None:
        if len(self._sessions) < self.max_sessions:
            return
        idle = [s for s in self._sessions.values() if not s.in_flight]
        if not idle:
            raise StoreFull(f"{self.max_sessions} sessions live and none evictable")
        victim = min(idle, key=lambda s: s.last_used_at)
        self._unload(victim)

    def _unload(self, session: Session) -> None:
        if self.data_dir is not None:
            self._write_snapshot(session)
        self._sessions.pop(session.id, None)
        self._release(session.id)
        log.info("session unloaded", extra={"session_id": session.id})

    def _release(self, session_id: str) -> None:
        forget = getattr(self.evaluator, "forget", None)
        if forget is not None:
            forget(session_id)

    # -- evaluation ---------------------------------------------------------

    def eval_in_session(self, session, source: str, turn: Optional[int] = None, budget: Optional[EvalBudget] = None) -> EvalOutcome:
        """Evaluate ``source`` in a session, journaling it on success.

        ``session`` is a :class:`Session` or a session id (created on demand).
        ``turn`` defaults to the session's current turn number.
        """
        if not isinstance(session, Session):
            session = self.get_or_create(session)
        with self._lock:
            if session.waiting >= self.queue_depth:
                raise SessionBusy(f"session {session.id} has {session.waiting} evaluations queued")
            session.waiting += 1
        try:
            with session.eval_lock:
                try:
                    outcome = self.evaluator.evaluate(session, source, budget)
                except ReplayDivergence as exc:
                    # an external evaluator could not rebuild the session
                    with self._lock:
                        self._corrupt[session.id] = exc
                        self._sessions.pop(session.id, None)
                    raise
                turn = session.turns if turn is None else turn
                session.eval_count += 1
                session.last_used_at = self.clock.now()
                if outcome.ok:
                    session.journal.append(JournalEntry(session.next_seq, turn, source, outcome.value))
                if session.persistent and self.data_dir is not None:
                    self._write_snapshot(session)
            return outcome
        finally:
            with self._lock:
                session.waiting -= 1

    @asynccontextmanager
    async def lease(self, session: Session):
        """Hold a session for a whole turn so turns never interleave."""
        with self._lock:
            if session.leases >= self.queue_depth:
                raise SessionBusy(f"session {session.id} has {session.leases} turns queued")
            session.leases += 1
        try:
            while not session.turn_lock.acquire(blocking=False):
                await asyncio.sleep(0.005)
            try:
                yield session
            finally:
                session.turn_lock.release()
        finally:
            with self._lock:
                session.leases -= 1

    # -- persistence --------------------------------------------------------

    def _write_snapshot(self, session: Session) -> Path:
        path = self.journal_path(session.id)
        journal.write_atomic(path, journal.encode(session.meta(), session.journal))
        return path

    def snapshot(self, session_id: str) -> Path:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise UnknownSession(f"session {session_id} is not live")
        with session.eval_lock:
            return self._write_snapshot(session)

    def restore(self, session_id: str) -> Session:
        validate_session_id(session_id)
        with self._lock:
            return self._restore_locked(session_id)

    def _restore_locked(self, session_id: str) -> Session:
        path = self.journal_path(session_id)
        if not path.exists():
            raise UnknownSession(f"no snapshot for session {session_id}")
        meta, entries = journal.load(path)
        policy = CapabilityPolicy.from_dict(meta.get("policy"))
        session = self._new_session(session_id, policy, True)
        session.budget = EvalBudget.from_dict(meta["budget"]) if meta.get("budget") else self.default_budget
        session.created_at = meta.get("created_at", session.created_at)
        try:
            self.evaluator.replay(session, entries)
        except ReplayDivergence as exc:
            self._corrupt[session_id] = exc
            log.error("replay diverged", extra={"session_id": session_id, "seq": exc.seq})
            raise
        session.journal = list(entries)
        session.eval_count = max(int(meta.get("eval_count", 0)), len(entries))
        session.turns = max([int(meta.get("turns", 0))] + [e.turn for e in entries])
        session.last_used_at = self.clock.now()
        self._sessions[session_id] = session
        return session

    def sweep(self, now: Optional[float] = None, ttl: Optional[float] = None) -> List[str]:
        """Snapshot and unload sessions idle longer than ``ttl`` (0 disables)."""
        now = self.clock.now() if now is None else now
        ttl = self.ttl_s if ttl is None else ttl
        if not ttl:
            return []
        evicted = []
        with self._lock:
            for session in list(self._sessions.values()):
                if session.in_flight or now - session.last_used_at <= ttl:
                    continue
                try:
                    self._unload(session)
                    evicted.append(session.id)
                except Exception:
                    log.exception("eviction failed", extra={"session_id": session.id})
        return evicted

    def delete(self, session_id: str) -> bool:
        """Snapshot a session into ``sessions/deleted/`` and forget it."""
        validate_session_id(session_id)
        with self._lock:
            session = self._sessions.pop(session_id, None)
            self._corrupt.pop(session_id, None)
            self._release(session_id)
            found = session is not None
            if self.data_dir is not None:
                path = self.journal_path(session_id)
                if session is not None:
                    self._write_snapshot(session)
                if path.exists():
                    found = True
                    archive = self.sessions_dir / "deleted"
                    archive.mkdir(parents=True, exist_ok=True)
                    stamp = int(self.clock.now() * 1000)
                    shutil.move(str(path), str(archive / f"{session_id}.{stamp}.journal"))
            return found

    def import_journal(self, session_id: str, data: bytes) -> Session:
        """Install a journal under ``session_id`` after validating every record."""
        validate_session_id(session_id)
        meta, entries = journal.decode(data)
        journal.validate_sources(entries)
        with self._lock:
            if session_id in self._sessions or self.has_snapshot(session_id):
                raise SessionError(f"session {session_id} already exists")
            meta = dict(meta, id=session_id)
            journal.write_atomic(self.journal_path(session_id), journal.encode(meta, entries))
            try:
                return self._restore_locked(session_id)
            except ReplayDivergence:
                self.journal_path(session_id).unlink()
                self._corrupt.pop(session_id, None)
                raise

    def shutdown(self) -> None:
        """Snapshot every live persistent session."""
        if self.data_dir is None:
            return
        with self._lock:
            for session in self._sessions.values():
                if session.persistent:
                    try:
                        self._write_snapshot(session)
                    except Exception:
                        log.exception("snapshot failed", extra={"session_id": session.id})

    # -- listing ------------------------------------------------------------

    def live_count(self) -> int:
        return len(self._sessions)

    def list_sessions(self) -> List[dict]:
        with self._lock:
            out = {sid: s.info() for sid, s in self._sessions.items()}
        for sid in self.persisted_ids():
            if sid in out:
                continue
            item = {"id": sid, "loaded": False}
            try:
                meta, entries = journal.load(self.journal_path(sid))
                item.update(eval_count=meta.get("eval_count", len(entries)), journal_length=len(entries))
            except (OSError, JournalFormatError) as exc:
                item["error"] = str(exc)
            out[sid] = item
        return [out[k] for k in sorted(out)]
