"""Deterministic printer. Data round-trips through the reader."""

from __future__ import annotations

import re
from typing import Any, List, Optional

from .types import NIL, Builtin, Closure, Cons, Macro, Symbol, intern

_SHORTHAND = {
    intern("QUOTE"): "'",
    intern("FUNCTION"): "#'",
    intern("QUASIQUOTE"): "`",
    intern("UNQUOTE"): ",",
    intern("UNQUOTE-SPLICING"): ",@",
}

_NUMBERISH = re.compile(
    r"[+-]?(?:\d+\.?|\d*\.\d+(?:[eEdDfFsSlL][+-]?\d+)?|\d+(?:\.\d*)?[eEdDfFsSlL][+-]?\d+)\Z"
)
_SPECIAL_CHARS = set(" \t\n\r\f\v()'`,\";|\\#:")


class _Lit:
    __slots__ = ("s",)

    def __init__(self, s: str):
        self.s = s


class _Tail:
    __slots__ = ("x",)

    def __init__(self, x: Any):
        self.x = x


def format_float(x: float) -> str:
    r = repr(x)
    if "e" in r:
        mant, exp = r.split("e")
        if "." not in mant:
            mant += ".0"
        return f"{mant}e{int(exp)}"
    return r


def _symbol_name(name: str, escape: bool) -> str:
    if not escape:
        return name
    if (
        not name
        or any(c in _SPECIAL_CHARS or c != c.upper() for c in name)
        or _NUMBERISH.match(name)
        or set(name) == {"."}
    ):
        return "|" + name.replace("\\", "\\\\").replace("|", "\\|") + "|"
    return name


def _atom(x: Any, escape: bool) -> str:
    if isinstance(x, Symbol):
        if x.keyword:
            return ":" + _symbol_name(x.name, escape)
        if not x.interned and escape:
            return "#:" + _symbol_name(x.name, escape)
        return _symbol_name(x.name, escape)
    if isinstance(x, bool):
        raise TypeError("bool is not a Lisp value")
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        return format_float(x)
    if isinstance(x, str):
        if not escape:
            return x
        return '"' + x.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(x, Builtin):
        return f"#<FUNCTION {x.name}>"
    if isinstance(x, Closure):
        if x.name is not None:
            return f"#<FUNCTION {_symbol_name(x.name.name, True)}>"
        return f"#<FUNCTION (LAMBDA {print_value(x.params.source)})>"
    if isinstance(x, Macro):
        return f"#<MACRO {_symbol_name(x.name.name, True)}>"
    return f"#<{type(x).__name__}>"


def write(value: Any, escape: bool = True, limit: Optional[int] = None) -> str:
    out: List[str] = []
    size = 0
    stack: List[Any] = [value]
    while stack:
        if limit is not None and size > limit:
            break
        item = stack.pop()
        t = type(item)
        if t is _Lit:
            piece = item.s
        elif t is _Tail:
            x = item.x
            if x is NIL:
                piece = ")"
            elif isinstance(x, Cons):
                piece = " "
                stack.append(_Tail(x.cdr))
                stack.append(x.car)
            else:
                piece = " . "
                stack.append(_Lit(")"))
                stack.append(x)
        elif t is Cons:
            prefix = _SHORTHAND.get(item.car) if isinstance(item.car, Symbol) else None
            if prefix is not None and type(item.cdr) is Cons and item.cdr.cdr is NIL:
                piece = prefix
                stack.append(item.cdr.car)
            else:
                piece = "("
                stack.append(_Tail(item.cdr))
                stack.append(item.car)
        else:
            piece = _atom(item, escape)
        out.append(piece)
        size += len(piece)
    text = "".join(out)
    if limit is not None and len(text) > limit:
        return text[:limit] + "..."
    return text


def print_value(value: Any, limit: Optional[int] = None) -> str:
    """``prin1``-style representation."""
    return write(value, True, limit)


def princ_value(value: Any) -> str:
    """``princ``-style representation (no string quotes or symbol bars)."""
    return write(value, False)
