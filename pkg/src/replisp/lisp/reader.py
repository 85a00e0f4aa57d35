"""S-expression reader for the supported Common Lisp subset.

The reader is iterative, so nesting depth is bounded only by input size.
Alongside the forms it can return the source span of every list it built,
which is how defining forms remember their original text.
"""

from __future__ import annotations

import math
import re
from typing import Any, Dict, List, Tuple

from .types import INT_MAX, INT_MIN, NIL, Cons, ReaderError, intern, keyword

QUOTE = intern("QUOTE")
QUASIQUOTE = intern("QUASIQUOTE")
UNQUOTE = intern("UNQUOTE")
UNQUOTE_SPLICING = intern("UNQUOTE-SPLICING")
FUNCTION = intern("FUNCTION")

WHITESPACE = " \t\n\r\f\v"
TERMINATORS = WHITESPACE + "()'`,\";"

_INT_RE = re.compile(r"[+-]?\d+\.?\Z")
_FLOAT_RE = re.compile(
    r"[+-]?(?:\d*\.\d+(?:[eEdDfFsSlL][+-]?\d+)?|\d+(?:\.\d*)?[eEdDfFsSlL][+-]?\d+)\Z"
)

Spans = Dict[int, Tuple[int, int]]


class _Frame:
    __slots__ = ("start", "items", "tail", "dot", "wrappers")

    def __init__(self, start: int, wrappers: list):
        self.start = start
        self.items: List[Any] = []
        self.tail: Any = NIL
        # 0: no dot seen, 1: dot seen and tail pending, 2: tail read
        self.dot = 0
        self.wrappers = wrappers


def read(text: str) -> List[Any]:
    """Parse every top-level form in ``text``."""
    return read_with_spans(text)[0]


def read_with_spans(text: str) -> Tuple[List[Any], List[Tuple[int, int]], Spans]:
    """Parse ``text``.

    Returns ``(forms, form_spans, spans)`` where ``form_spans[i]`` is the
    ``(start, end)`` slice of top-level form ``i`` and ``spans`` maps
    ``id(cons)`` of each list read from source to its slice.
    """
    forms: List[Any] = []
    form_spans: List[Tuple[int, int]] = []
    spans: Spans = {}
    stack: List[_Frame] = []
    pending: List[Tuple[Any, int]] = []  # quote-family wrappers awaiting a datum
    n = len(text)
    i = 0

    def deliver(datum: Any, start: int, end: int) -> None:
        nonlocal pending
        for sym, pos in reversed(pending):
            datum = Cons(sym, Cons(datum, NIL))
            spans[id(datum)] = (pos, end)
            start = pos
        pending = []
        if not stack:
            forms.append(datum)
            form_spans.append((start, end))
            return
        frame = stack[-1]
        if frame.dot == 0:
            frame.items.append(datum)
        elif frame.dot == 1:
            frame.tail = datum
            frame.dot = 2
        else:
            raise ReaderError("more than one object after dot", start)

    while i < n:
        c = text[i]
        if c in WHITESPACE:
            i += 1
        elif c == ";":
            j = text.find("\n", i)
            i = n if j < 0 else j + 1
        elif c == "(":
            stack.append(_Frame(i, pending))
            pending = []
            i += 1
        elif c == ")":
            if not stack:
                raise ReaderError("unexpected ')'", i)
            if pending:
                raise ReaderError("dangling quote before ')'", i)
            frame = stack.pop()
            if frame.dot == 1:
                raise ReaderError("missing object after dot", i)
            lst = frame.tail
            for item in reversed(frame.items):
                lst = Cons(item, lst)
            if lst is not NIL:
                spans[id(lst)] = (frame.start, i + 1)
            pending = frame.wrappers
            deliver(lst, frame.start, i + 1)
            i += 1
        elif c == "'":
            pending.append((QUOTE, i))
            i += 1
        elif c == "`":
            pending.append((QUASIQUOTE, i))
            i += 1
        elif c == ",":
            if i + 1 < n and text[i + 1] == "@":
                pending.append((UNQUOTE_SPLICING, i))
                i += 2
            else:
                pending.append((UNQUOTE, i))
                i += 1
        elif c == '"':
            start = i
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise ReaderError("unterminated string", start)
                ch = text[i]
                if ch == "\\":
                    if i + 1 >= n:
                        raise ReaderError("unterminated string", start)
                    buf.append(text[i + 1])
                    i += 2
                elif ch == '"':
                    i += 1
                    break
                else:
                    buf.append(ch)
                    i += 1
            deliver("".join(buf), start, i)
        elif c == "#":
            nxt = text[i + 1] if i + 1 < n else ""
            if nxt == "'":
                pending.append((FUNCTION, i))
                i += 2
            elif nxt == "|":
                i = _skip_block_comment(text, i)
            else:
                raise ReaderError(f"unsupported syntax '#{nxt}'", i)
        else:
            start = i
            datum, i = _read_token(text, i)
            if datum is _DOT:
                if not stack or not stack[-1].items or stack[-1].dot != 0 or pending:
                    raise ReaderError("unexpected dot", start)
                stack[-1].dot = 1
                continue
            deliver(datum, start, i)

    if stack:
        raise ReaderError("unbalanced parentheses: missing ')'", stack[-1].start)
    if pending:
        raise ReaderError("dangling quote at end of input", pending[-1][1])
    return forms, form_spans, spans


_DOT = object()


def _skip_block_comment(text: str, i: int) -> int:
    start = i
    depth = 0
    n = len(text)
    while i < n:
        if text.startswith("#|", i):
            depth += 1
            i += 2
        elif text.startswith("|#", i):
            depth -= 1
            i += 2
            if depth == 0:
                return i
        else:
            i += 1
    raise ReaderError("unterminated block comment", start)


def _read_token(text: str, i: int) -> Tuple[Any, int]:
    start = i
    n = len(text)
    chars = []
    escaped_any = False
    in_bars = False
    while i < n:
        ch = text[i]
        if in_bars:
            if ch == "|":
                in_bars = False
            elif ch == "\\":
                if i + 1 >= n:
                    break
                i += 1
                chars.append(text[i])
            else:
                chars.append(ch)
            i += 1
            continue
        if ch in TERMINATORS:
            break
        if ch == "|":
            in_bars = True
            escaped_any = True
        elif ch == "\\":
            if i + 1 >= n:
                raise ReaderError("escape at end of input", i)
            escaped_any = True
            i += 1
            chars.append(text[i])
        else:
            chars.append(ch.upper())
        i += 1
    if in_bars:
        raise ReaderError("unterminated |symbol|", start)
    raw = text[start:i]
    if not escaped_any:
        if raw == ".":
            return _DOT, i
        if _INT_RE.match(raw):
            value = int(raw.rstrip("."))
            if value < INT_MIN or value > INT_MAX:
                raise ReaderError(f"integer literal {raw} out of 64-bit range", start)
            return value, i
        if _FLOAT_RE.match(raw):
            value = float(re.sub(r"[dDfFsSlL]", "e", raw))
            if math.isinf(value) or math.isnan(value):
                raise ReaderError(f"invalid number {raw}", start)
            return value, i
        if raw.startswith(":"):
            name = "".join(chars)[1:]
            if not name or ":" in name:
                raise ReaderError(f"invalid keyword {raw}", start)
            return keyword(name), i
        if ":" in raw:
            raise ReaderError(f"package prefixes are not supported: {raw}", start)
        if set(raw) == {"."}:
            raise ReaderError("too many dots", start)
    return intern("".join(chars)), i
