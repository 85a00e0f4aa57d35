"""Incremental scanner for ``<lisp>...</lisp>`` blocks in a token stream.

The scanner consumes text chunks with no alignment guarantee and emits a
lossless event sequence. Tag literals may be split across any number of
chunks; an ambiguous trailing prefix such as ``<li`` is held back until the
next chunk (or :meth:`TagScanner.finish`) disambiguates it.

Grammar (normative for system-prompt authors):

* the open tag is exactly ``<lisp>`` and the close tag exactly ``</lisp>``,
  case-sensitive, no attributes, no whitespace tolerance;
* blocks do not nest; the first ``</lisp>`` inside a block closes it, even
  inside a Lisp string literal;
* all other text, including other tags such as ``<thinking>``, is passed
  through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional

OPEN_TAG = "<lisp>"
CLOSE_TAG = "</lisp>"

DEFAULT_MAX_CODE_BYTES = 65536

FLUSH_AS_TEXT = "flush-as-text"
ERROR = "error"
UNTERMINATED_POLICIES = (FLUSH_AS_TEXT, ERROR)

# ScanEvent kinds
TEXT = "text"
CODE_BEGIN = "code_begin"
CODE_FRAGMENT = "code_fragment"
CODE_END = "code_end"
UNTERMINATED = "unterminated"

# ScannerState modes
MODE_TEXT = "TEXT"
MODE_PARTIAL_OPEN = "PARTIAL_OPEN"
MODE_CODE = "CODE"
MODE_PARTIAL_CLOSE = "PARTIAL_CLOSE"


class CodeTooLong(Exception):
    """A code block grew past ``max_code_bytes``; the scanner is poisoned."""

    def __init__(self, limit: int):
        super().__init__(f"code block exceeds {limit} bytes")
        self.limit = limit


@dataclass(frozen=True)
class ScanEvent:
    kind: str
    payload: str = ""

    def __repr__(self) -> str:
        if self.kind in (CODE_BEGIN, CODE_END):
            return f"ScanEvent({self.kind})"
        return f"ScanEvent({self.kind}, {self.payload!r})"


def Text(payload: str) -> ScanEvent:
    return ScanEvent(TEXT, payload)


def CodeFragment(payload: str) -> ScanEvent:
    return ScanEvent(CODE_FRAGMENT, payload)


def Unterminated(payload: str) -> ScanEvent:
    return ScanEvent(UNTERMINATED, payload)


CodeBegin = ScanEvent(CODE_BEGIN)
CodeEnd = ScanEvent(CODE_END)


class TagScanner:
    """State machine over the decoded text stream.

    One instance per generation round. ``feed`` returns the events that are
    unambiguous so far; adjacent text (and adjacent code) within one call is
    already coalesced.
    """

    def __init__(
        self,
        max_code_bytes: int = DEFAULT_MAX_CODE_BYTES,
        unterminated: str = FLUSH_AS_TEXT,
    ):
        if max_code_bytes <= 0:
            raise ValueError("max_code_bytes must be positive")
        if unterminated not in UNTERMINATED_POLICIES:
            raise ValueError(f"unknown unterminated policy {unterminated!r}")
        self.max_code_bytes = max_code_bytes
        self.unterminated = unterminated
        self.in_code = False
        self.held = ""
        self.code_bytes = 0
        self._code: List[str] = []
        self.poisoned = False
        self.finished = False

    @property
    def mode(self) -> str:
        if self.in_code:
            return MODE_PARTIAL_CLOSE if self.held else MODE_CODE
        return MODE_PARTIAL_OPEN if self.held else MODE_TEXT

    def feed(self, chunk: str) -> List[ScanEvent]:
        if self.poisoned:
            raise CodeTooLong(self.max_code_bytes)
        if self.finished:
            raise RuntimeError("feed() after finish()")
        out = _EventBuffer()
        data = self.held + chunk
        self.held = ""
        i = 0
        n = len(data)
        while i < n:
            tag = CLOSE_TAG if self.in_code else OPEN_TAG
            lt = data.find("<", i)
            if lt < 0:
                self._emit_plain(out, data[i:])
                break
            if lt > i:
                self._emit_plain(out, data[i:lt])
            avail = data[lt:lt + len(tag)]
            if avail == tag:
                if self.in_code:
                    out.end_code()
                    self.in_code = False
                    self.code_bytes = 0
                    self._code = []
                else:
                    out.begin_code()
                    self.in_code = True
                i = lt + len(tag)
            elif tag.startswith(avail):
                # ambiguous prefix running to the end of the data
                self.held = avail
                break
            else:
                self._emit_plain(out, "<")
                i = lt + 1
        return out.events

    def finish(self) -> List[ScanEvent]:
        """Flush held bytes at end of stream."""
        if self.finished:
            return []
        self.finished = True
        held, self.held = self.held, ""
        if not self.in_code:
            return [Text(held)] if held else []
        payload = "".join(self._code) + held
        self._code = []
        self.in_code = False
        return [Unterminated(payload)]

    def _emit_plain(self, out: "_EventBuffer", s: str) -> None:
        if not s:
            return
        if self.in_code:
            size = len(s.encode("utf-8"))
            if self.code_bytes + size > self.max_code_bytes:
                self.poisoned = True
                raise CodeTooLong(self.max_code_bytes)
            self.code_bytes += size
            self._code.append(s)
            out.code(s)
        else:
            out.text(s)


class _EventBuffer:
    def __init__(self) -> None:
        self.events: List[ScanEvent] = []

    def _push(self, kind: str, s: str) -> None:
        if self.events and self.events[-1].kind == kind:
            self.events[-1] = ScanEvent(kind, self.events[-1].payload + s)
        else:
            self.events.append(ScanEvent(kind, s))

    def text(self, s: str) -> None:
        self._push(TEXT, s)

    def code(self, s: str) -> None:
        self._push(CODE_FRAGMENT, s)

    def begin_code(self) -> None:
        self.events.append(CodeBegin)

    def end_code(self) -> None:
        self.events.append(CodeEnd)


def scan(chunks: Iterable[str], **kwargs) -> List[ScanEvent]:
    """Run a fresh scanner over ``chunks`` and return every event."""
    scanner = TagScanner(**kwargs)
    events: List[ScanEvent] = []
    for chunk in chunks:
        events.extend(scanner.feed(chunk))
    events.extend(scanner.finish())
    return events


def coalesce(events: Iterable[ScanEvent]) -> List[ScanEvent]:
    """Merge adjacent Text events and adjacent CodeFragment events; drop empties."""
    out: List[ScanEvent] = []
    for ev in events:
        if ev.kind in (TEXT, CODE_FRAGMENT):
            if not ev.payload:
                continue
            if out and out[-1].kind == ev.kind:
                out[-1] = ScanEvent(ev.kind, out[-1].payload + ev.payload)
                continue
        out.append(ev)
    return out


def reconstruct(events: Iterable[ScanEvent]) -> str:
    """Rebuild the scanned text from its events."""
    parts: List[str] = []
    block: Optional[List[str]] = None
    for ev in events:
        if ev.kind == TEXT:
            parts.append(ev.payload)
        elif ev.kind == CODE_BEGIN:
            block = []
        elif ev.kind == CODE_FRAGMENT:
            assert block is not None
            block.append(ev.payload)
        elif ev.kind == CODE_END:
            parts.append(OPEN_TAG + "".join(block or ()) + CLOSE_TAG)
            block = None
        elif ev.kind == UNTERMINATED:
            # the payload already carries every fragment of the open block
            parts.append(OPEN_TAG + ev.payload)
            block = None
    return "".join(parts)


def iter_blocks(events: Iterable[ScanEvent]) -> Iterator[str]:
    """Yield the code of each complete block."""
    block: List[str] = []
    for ev in events:
        if ev.kind == CODE_BEGIN:
            block = []
        elif ev.kind == CODE_FRAGMENT:
            block.append(ev.payload)
        elif ev.kind == CODE_END:
            yield "".join(block)
