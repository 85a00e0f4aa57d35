"""Evaluation through an external Common Lisp process over pipes.

One child process serves every session; each session gets its own CL
package. Requests are wrapper forms written to stdin; results come back as
a frame on stdout that starts with 0x1E and a per-boot random secret, so
user output cannot forge the end of a result.

The external Lisp is NOT sandboxed. Run it in an isolated container.
"""

from __future__ import annotations

import codecs
import collections
import logging
import os
import re
import secrets
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from string import Template
from typing import Dict, List, Optional, Sequence

from .clock import SYSTEM_CLOCK
from .journal import JournalEntry
from .lisp import EvalBudget, EvalOutcome, ReaderError, read
from .sessions import EmbeddedEvaluator, ReplayDivergence, Session

log = logging.getLogger(__name__)

WRAPPER_VERSION = 1
FS = "\x1e"
FALLBACK_EMBEDDED = "embedded"
FALLBACK_ERROR = "error"


class BridgeError(Exception):
    code = "BridgeError"


class SpawnFailure(BridgeError):
    code = "SpawnFailure"


class HandshakeTimeout(BridgeError):
    code = "HandshakeTimeout"


class BridgeTimeout(BridgeError):
    code = "BridgeTimeout"


class BridgeDead(BridgeError):
    code = "BridgeDead"


class RestartLimitExceeded(BridgeError):
    code = "RestartLimitExceeded"


def _asset_lines(name: str) -> List[str]:
    text = resources.files("replisp.assets").joinpath(name).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip() and not line.lstrip().startswith(";")]


WRAPPER = Template(" ".join(_asset_lines(f"bridge_wrapper_v{WRAPPER_VERSION}.lisp")))
RESET = Template(" ".join(_asset_lines(f"bridge_reset_v{WRAPPER_VERSION}.lisp")))
PRELUDE = _asset_lines("compat_prelude.lisp")


def cl_string_expr(text: str) -> str:
    """A single-line CL expression that evaluates to ``text``."""
    parts: List[str] = []
    buf: List[str] = []

    def flush():
        if buf:
            parts.append('"' + "".join(buf) + '"')
            buf.clear()

    for ch in text:
        if ord(ch) < 32 or ord(ch) == 127:
            flush()
            parts.append(f"(string (code-char {ord(ch)}))")
        elif ch in '"\\':
            buf.append("\\" + ch)
        else:
            buf.append(ch)
    flush()
    if not parts:
        return '""'
    if len(parts) == 1 and parts[0].startswith('"'):
        return parts[0]
    return "(concatenate 'string " + " ".join(parts) + ")"


def session_package(session_id: str) -> str:
    # ids are [A-Za-z0-9._-], safe inside a CL string literal
    return f"REPLISP/{session_id}"


@dataclass
class BridgeConfig:
    command: Sequence[str]
    eval_timeout_ms: int = 5000
    restart_limit: int = 10
    sentinel_secret: str = field(default_factory=lambda: secrets.token_hex(16))
    fallback: str = FALLBACK_ERROR
    cwd: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.command, str):
            self.command = shlex.split(self.command)
        if not self.command:
            raise ValueError("bridge command must be non-empty")
        if self.eval_timeout_ms <= 0:
            raise ValueError("eval_timeout_ms must be positive")
        if self.restart_limit < 0:
            raise ValueError("restart_limit must be >= 0")
        if not re.fullmatch(r"[0-9a-f]{32}", self.sentinel_secret):
            raise ValueError("sentinel_secret must be 32 lowercase hex digits")
        if self.fallback not in (FALLBACK_EMBEDDED, FALLBACK_ERROR):
            raise ValueError(f"fallback must be {FALLBACK_EMBEDDED!r} or {FALLBACK_ERROR!r}")


class _Frame:
    __slots__ = ("status", "value", "output")

    def __init__(self, status, value, output):
        self.status = status
        self.value = value
        self.output = output


def parse_frame(buf: str, secret: str):
    """Find one result frame in ``buf``.

    Returns ``(frame, end)`` or ``(None, keep_from)`` when no complete
    frame is present yet; text before the frame is noise.
    """
    marker = FS + secret + " "
    start = buf.find(marker)
    if start < 0:
        # keep a possible partial marker at the tail
        return None, max(0, len(buf) - len(marker))
    pos = start + len(marker)
    sep = buf.find(FS, pos)
    if sep < 0:
        return None, start
    status = buf[pos:sep]
    pos = sep + 1
    sections = []
    for _ in range(2):
        colon = buf.find(":", pos)
        if colon < 0:
            return None, start
        digits = buf[pos:colon]
        if not digits.isdigit():
            raise BridgeDead(f"garbled frame length {digits[:20]!r}")
        n = int(digits)
        if len(buf) < colon + 1 + n:
            return None, start
        sections.append(buf[colon + 1:colon + 1 + n])
        pos = colon + 1 + n
    return _Frame(status, sections[0], sections[1]), pos


class LispProcess:
    """A child Lisp REPL with a reader thread collecting stdout."""

    def __init__(self, config: BridgeConfig):
        self.config = config
        self.proc: Optional[subprocess.Popen] = None
        self._buf = ""
        self._cond = threading.Condition()
        self._eof = False

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None and not self._eof

    def start(self) -> None:
        try:
            self.proc = subprocess.Popen(
                list(self.config.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=self.config.cwd,
                start_new_session=True,
            )
        except OSError as exc:
            raise SpawnFailure(f"cannot launch {self.config.command[0]!r}: {exc.strerror or exc}") from None
        threading.Thread(target=self._pump_stdout, daemon=True, name="replisp-bridge-out").start()
        threading.Thread(target=self._pump_stderr, daemon=True, name="replisp-bridge-err").start()
        for line in PRELUDE:
            self._write(line)
        self._write("(progn (princ (concatenate 'string (string (code-char 30)) "
                    f"\"{self.config.sentinel_secret} READY\" (string (code-char 30)) \"0:0:\")) "
                    "(terpri) (finish-output) (values))")
        try:
            frame = self.wait_frame(self.config.eval_timeout_ms / 1000)
        except BridgeTimeout:
            self.kill()
            raise HandshakeTimeout(f"no handshake within {self.config.eval_timeout_ms} ms") from None
        except BridgeDead as exc:
            self.kill()
            raise SpawnFailure(f"process exited during handshake: {exc}") from None
        if frame.status != "READY":
            self.kill()
            raise HandshakeTimeout(f"unexpected handshake reply {frame.status!r}")

    def _pump_stdout(self) -> None:
        decoder = codecs.getincrementaldecoder("utf-8")("replace")
        fd = self.proc.stdout.fileno()
        while True:
            try:
                data = os.read(fd, 65536)
            except OSError:
                data = b""
            with self._cond:
                if data:
                    self._buf += decoder.decode(data)
                else:
                    self._buf += decoder.decode(b"", final=True)
                    self._eof = True
                self._cond.notify_all()
            if not data:
                return

    def _pump_stderr(self) -> None:
        for raw in iter(self.proc.stderr.readline, b""):
            log.debug("bridge stderr", extra={"line": raw.decode("utf-8", "replace").rstrip()[:500]})

    def _write(self, line: str) -> None:
        try:
            self.proc.stdin.write(line.encode("utf-8") + b"\n")
            self.proc.stdin.flush()
        except (OSError, ValueError):
            raise BridgeDead("cannot write to the Lisp process") from None

    def wait_frame(self, timeout: float) -> _Frame:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                frame, pos = parse_frame(self._buf, self.config.sentinel_secret)
                if frame is not None:
                    self._buf = self._buf[pos:]
                    return frame
                self._buf = self._buf[pos:]
                if self._eof:
                    raise BridgeDead("Lisp process exited")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise BridgeTimeout(f"no result within {int(timeout * 1000)} ms")
                self._cond.wait(left)

    def request(self, form: str, timeout: float) -> _Frame:
        with self._cond:
            self._buf = ""
        self._write(form)
        return self.wait_frame(timeout)

    def kill(self) -> None:
        if self.proc is None:
            return
        try:
            self.proc.kill()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass
        for stream in (self.proc.stdin, self.proc.stdout, self.proc.stderr):
            try:
                stream.close()
            except (OSError, ValueError):
                pass
        with self._cond:
            self._eof = True
            self._cond.notify_all()


class Bridge:
    """Serialized access to one external Lisp, with restart accounting."""

    def __init__(self, config: BridgeConfig, clock=SYSTEM_CLOCK):
        self.config = config
        self.clock = clock
        self.process: Optional[LispProcess] = None
        self.generation = 0
        self.disabled = False
        self._restarts = collections.deque()
        self._lock = threading.Lock()

    @property
    def state(self) -> str:
        if self.disabled:
            return "disabled"
        return "running" if self.process is not None and self.process.alive else "dead"

    @property
    def restarts_this_hour(self) -> int:
        self._prune()
        return len(self._restarts)

    def _prune(self) -> None:
        now = time.monotonic()
        while self._restarts and now - self._restarts[0] > 3600:
            self._restarts.popleft()

    def start(self) -> None:
        with self._lock:
            self._start_locked(counted=False)

    def _start_locked(self, counted: bool) -> None:
        if self.disabled:
            raise RestartLimitExceeded("bridge disabled after too many restarts")
        if counted:
            self._prune()
            if len(self._restarts) >= self.config.restart_limit:
                self.disabled = True
                raise RestartLimitExceeded(f"{self.config.restart_limit} restarts within an hour")
            self._restarts.append(time.monotonic())
        proc = LispProcess(self.config)
        proc.start()
        self.process = proc
        self.generation += 1
        log.info("bridge ready", extra={"command": self.config.command[0], "generation": self.generation})

    def ensure_running(self) -> bool:
        """Start or restart the process; True if a new process was started."""
        with self._lock:
            if self.process is not None and self.process.alive:
                return False
            if self.process is not None:
                self.process.kill()
            self._start_locked(counted=self.generation > 0)
            return True

    def eval_remote(self, session_id: str, source: str) -> EvalOutcome:
        """Evaluate ``source`` in the session's package."""
        started = time.monotonic()
        try:
            read(source)
        except ReaderError as exc:
            return _error("ReaderError", exc.message, source, started)
        form = WRAPPER.substitute(
            package=session_package(session_id),
            payload=cl_string_expr(source),
            secret=self.config.sentinel_secret,
        )
        with self._lock:
            proc = self.process
            if proc is None or not proc.alive:
                raise BridgeDead("Lisp process is not running")
            try:
                frame = proc.request(form, self.config.eval_timeout_ms / 1000)
            except BridgeTimeout:
                proc.kill()
                raise
            except BridgeDead:
                proc.kill()
                raise
        if frame.status == "ok":
            return EvalOutcome("ok", frame.value, frame.output, wall_ms=_ms(started))
        return EvalOutcome(
            "error",
            output=frame.output,
            error={"kind": "RemoteCondition", "message": frame.value, "form": source[:200], "form_index": None},
            wall_ms=_ms(started),
        )

    def reset_session(self, session_id: str) -> None:
        form = RESET.substitute(package=session_package(session_id))
        ack = ("(progn " + form + " (princ (concatenate 'string (string (code-char 30)) "
               f"\"{self.config.sentinel_secret} ok\" (string (code-char 30)) \"0:0:\")) (terpri) (finish-output) (values))")
        with self._lock:
            if self.process is None or not self.process.alive:
                raise BridgeDead("Lisp process is not running")
            self.process.request(ack, self.config.eval_timeout_ms / 1000)

    def kill(self) -> None:
        """Kill the child (used by tests and shutdown); the next eval restarts it."""
        with self._lock:
            if self.process is not None:
                self.process.kill()

    def shutdown(self) -> None:
        self.kill()


def _ms(started: float) -> int:
    return int(round((time.monotonic() - started) * 1000))


def _error(kind: str, message: str, source: str, started: float, output: str = "") -> EvalOutcome:
    return EvalOutcome(
        "error",
        output=output,
        error={"kind": kind, "message": message, "form": source[:200], "form_index": None},
        wall_ms=_ms(started),
    )


class BridgeEvaluator:
    """SessionStore evaluator that routes sources to a :class:`Bridge`.

    Sessions are rehydrated lazily: after a restart, the first evaluation
    in a session replays its journal into the new process.
    """

    kind = "bridge"

    def __init__(self, bridge: Bridge, clock=SYSTEM_CLOCK, fs_root: Optional[str] = None):
        self.bridge = bridge
        self.embedded = EmbeddedEvaluator(clock, fs_root)
        self._hydrated: Dict[str, int] = {}
        self._lock = threading.Lock()

    def new_env(self, policy):
        return None

    @property
    def fell_back(self) -> bool:
        return self.bridge.disabled and self.bridge.config.fallback == FALLBACK_EMBEDDED

    def evaluate(self, session: Session, source: str, budget: Optional[EvalBudget] = None) -> EvalOutcome:
        started = time.monotonic()
        try:
            self._prepare(session)
            outcome = self.bridge.eval_remote(session.id, source)
        except RestartLimitExceeded as exc:
            if self.fell_back:
                return self._embedded(session, source, budget)
            return _error(exc.code, str(exc), source, started)
        except BridgeTimeout as exc:
            self._hydrated.pop(session.id, None)
            return _error(exc.code, str(exc), source, started)
        except BridgeError as exc:
            self._hydrated.pop(session.id, None)
            return _error(exc.code, str(exc), source, started)
        self._hydrated[session.id] = self.bridge.generation
        return outcome

    def _embedded(self, session: Session, source: str, budget) -> EvalOutcome:
        if session.env is None:
            session.env = self.embedded.new_env(session.policy)
            self.embedded.replay(session, session.journal)
        return self.embedded.evaluate(session, source, budget)

    def _prepare(self, session: Session) -> None:
        if self.fell_back:
            raise RestartLimitExceeded("bridge disabled")
        self.bridge.ensure_running()
        if self._hydrated.get(session.id) != self.bridge.generation:
            self.rehydrate(session, session.journal)

    def rehydrate(self, session: Session, entries: List[JournalEntry]) -> None:
        """Replay ``entries`` into a clean package in the current process."""
        self.bridge.reset_session(session.id)
        for entry in entries:
            outcome = self.bridge.eval_remote(session.id, entry.source)
            if not outcome.ok:
                raise ReplayDivergence(session.id, entry.seq, outcome.error)
        self._hydrated[session.id] = self.bridge.generation

    def replay(self, session: Session, entries: List[JournalEntry]) -> None:
        if self.fell_back:
            session.env = self.embedded.new_env(session.policy)
            self.embedded.replay(session, entries)
            return
        self.bridge.ensure_running()
        self.rehydrate(session, entries)

    def forget(self, session_id: str) -> None:
        self._hydrated.pop(session_id, None)


class PerSessionBridgeEvaluator:
    """One external Lisp process per live session.

    Processes start on a session's first evaluation and stop when the store
    unloads or deletes the session. Restart accounting is per process.
    """

    kind = "bridge"

    def __init__(self, config: BridgeConfig, clock=SYSTEM_CLOCK, fs_root: Optional[str] = None):
        self.config = config
        self.clock = clock
        self.fs_root = fs_root
        self._workers: Dict[str, BridgeEvaluator] = {}
        self._lock = threading.Lock()

    def new_env(self, policy):
        return None

    def worker(self, session_id: str) -> BridgeEvaluator:
        with self._lock:
            worker = self._workers.get(session_id)
            if worker is None:
                # every process gets its own sentinel secret
                bridge = Bridge(replace(self.config, sentinel_secret=secrets.token_hex(16)), self.clock)
                worker = self._workers[session_id] = BridgeEvaluator(bridge, self.clock, self.fs_root)
            return worker

    @property
    def process_count(self) -> int:
        with self._lock:
            return sum(1 for w in self._workers.values() if w.bridge.state == "running")

    def evaluate(self, session: Session, source: str, budget: Optional[EvalBudget] = None) -> EvalOutcome:
        return self.worker(session.id).evaluate(session, source, budget)

    def replay(self, session: Session, entries: List[JournalEntry]) -> None:
        self.worker(session.id).replay(session, entries)

    def forget(self, session_id: str) -> None:
        with self._lock:
            worker = self._workers.pop(session_id, None)
        if worker is not None:
            worker.bridge.shutdown()

    def shutdown(self) -> None:
        with self._lock:
            workers, self._workers = list(self._workers.values()), {}
        for worker in workers:
            worker.bridge.shutdown()
