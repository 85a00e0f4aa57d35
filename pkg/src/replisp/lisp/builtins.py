"""The builtin library. With every capability flag off this table *is* the sandbox."""

from __future__ import annotations

import math
import subprocess as _subprocess
import time as _time
import urllib.request
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from .printer import print_value, princ_value
from .types import (
    NIL,
    T,
    Builtin,
    Closure,
    Cons,
    LispError,
    Macro,
    Symbol,
    check_int,
    intern,
    is_function,
    is_number,
    keyword,
    lisp_type_error,
)

PURE = "pure"

_REGISTRY: Dict[str, List[Builtin]] = {}


def builtin(name: str, min_args: int = 0, max_args: Optional[int] = None, group: str = PURE):
    def register(fn: Callable) -> Callable:
        _REGISTRY.setdefault(group, []).append(Builtin(name, fn, min_args, max_args, group))
        return fn

    return register


def builtin_library(policy=None) -> Dict[Symbol, Builtin]:
    """Global function table for ``policy`` (default: every capability off)."""
    groups = [PURE] + (policy.enabled_groups() if policy is not None else [])
    table: Dict[Symbol, Builtin] = {}
    for group in groups:
        for b in _REGISTRY.get(group, ()):
            table[intern(b.name)] = b
    return table


def _bool(x: bool) -> Symbol:
    return T if x else NIL


def _num(x: Any) -> Any:
    if not is_number(x):
        raise lisp_type_error("a number", x)
    return x


def _int(x: Any) -> int:
    if not isinstance(x, int) or isinstance(x, bool):
        raise lisp_type_error("an integer", x)
    return x


def _str(x: Any) -> str:
    if type(x) is not str:
        raise lisp_type_error("a string", x)
    return x


def _norm(x: Any) -> Any:
    if isinstance(x, float):
        if math.isinf(x) or math.isnan(x):
            raise LispError("ArithmeticError", "floating point overflow")
        return x
    return check_int(x)


def _items(x: Any, what: str = "a proper list") -> List[Any]:
    if x is NIL:
        return []
    if type(x) is not Cons:
        raise lisp_type_error(what, x)
    return list(x)


def _keywords(args: tuple, allowed: Dict[str, Any], fname: str) -> Dict[str, Any]:
    if len(args) % 2:
        raise LispError("ProgramError", f"odd number of keyword arguments to {fname}")
    out = dict(allowed)
    for i in range(0, len(args), 2):
        k = args[i]
        if type(k) is not Symbol or not k.keyword or k.name not in allowed:
            raise LispError("ProgramError", f"unknown keyword {print_value(k, limit=40)} for {fname}")
        out[k.name] = args[i + 1]
    return out


# -- arithmetic ---------------------------------------------------------------


@builtin("+")
def _add(m, *args):
    total = 0
    for a in args:
        total += _num(a)
    return _norm(total)


@builtin("*")
def _mul(m, *args):
    total = 1
    for a in args:
        total *= _num(a)
        if isinstance(total, int):
            check_int(total)
    return _norm(total)


@builtin("-", 1)
def _sub(m, first, *rest):
    if not rest:
        return _norm(-_num(first))
    total = _num(first)
    for a in rest:
        total -= _num(a)
    return _norm(total)


def _divide(a, b):
    if b == 0:
        raise LispError("DivisionByZero", f"division of {print_value(a)} by zero")
    if isinstance(a, int) and isinstance(b, int):
        if a % b == 0:
            return a // b
        return a / b
    return a / b


@builtin("/", 1)
def _div(m, first, *rest):
    if not rest:
        return _norm(_divide(1, _num(first)))
    total = _num(first)
    for a in rest:
        total = _divide(total, _num(a))
    return _norm(total)


@builtin("MOD", 2, 2)
def _mod(m, a, b):
    _num(a)
    if _num(b) == 0:
        raise LispError("DivisionByZero", f"MOD of {print_value(a)} by zero")
    return _norm(a % b)


@builtin("ABS", 1, 1)
def _abs(m, a):
    return _norm(abs(_num(a)))


@builtin("MIN", 1)
def _min(m, *args):
    best = _num(args[0])
    for a in args[1:]:
        if _num(a) < best:
            best = a
    return best


@builtin("MAX", 1)
def _max(m, *args):
    best = _num(args[0])
    for a in args[1:]:
        if _num(a) > best:
            best = a
    return best


def _chain(op):
    def compare(m, *args):
        for a in args:
            _num(a)
        return _bool(all(op(args[i], args[i + 1]) for i in range(len(args) - 1)))

    return compare


builtin("<", 1)(_chain(lambda a, b: a < b))
builtin("<=", 1)(_chain(lambda a, b: a <= b))
builtin(">", 1)(_chain(lambda a, b: a > b))
builtin(">=", 1)(_chain(lambda a, b: a >= b))
builtin("=", 1)(_chain(lambda a, b: a == b))


@builtin("/=", 1)
def _neq(m, *args):
    for a in args:
        _num(a)
    for i in range(len(args)):
        for j in range(i + 1, len(args)):
            if args[i] == args[j]:
                return NIL
    return T


# -- equality -----------------------------------------------------------------


def eql(a: Any, b: Any) -> bool:
    if a is b:
        return True
    if isinstance(a, bool) or isinstance(b, bool):
        return False
    if type(a) is int and type(b) is int:
        return a == b
    if type(a) is float and type(b) is float:
        return a == b and math.copysign(1.0, a) == math.copysign(1.0, b)
    return False


def equal(a: Any, b: Any) -> bool:
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        if type(x) is Cons:
            if type(y) is not Cons:
                return False
            stack.append((x.cdr, y.cdr))
            stack.append((x.car, y.car))
        elif type(x) is str:
            if type(y) is not str or x != y:
                return False
        elif not eql(x, y):
            return False
    return True


@builtin("EQ", 2, 2)
def _eq(m, a, b):
    return _bool(eql(a, b))


@builtin("EQL", 2, 2)
def _eql(m, a, b):
    return _bool(eql(a, b))


@builtin("EQUAL", 2, 2)
def _equal(m, a, b):
    return _bool(equal(a, b))


# -- lists ----------------------------------------------------------------------


@builtin("CONS", 2, 2)
def _cons(m, a, b):
    return m.cons(a, b)


@builtin("CAR", 1, 1)
def _car(m, x):
    if x is NIL:
        return NIL
    if type(x) is not Cons:
        raise lisp_type_error("a list", x)
    return x.car


@builtin("CDR", 1, 1)
def _cdr(m, x):
    if x is NIL:
        return NIL
    if type(x) is not Cons:
        raise lisp_type_error("a list", x)
    return x.cdr


@builtin("LIST")
def _list(m, *args):
    return m.list_from(args)


@builtin("APPEND")
def _append(m, *args):
    if not args:
        return NIL
    items: List[Any] = []
    for a in args[:-1]:
        items.extend(_items(a))
    return m.list_from(items, args[-1])


@builtin("LENGTH", 1, 1)
def _length(m, x):
    if type(x) is str:
        return len(x)
    return len(_items(x, "a sequence"))


@builtin("REVERSE", 1, 1)
def _reverse(m, x):
    if type(x) is str:
        return x[::-1]
    return m.list_from(reversed(_items(x, "a sequence")))


@builtin("NTH", 2, 2)
def _nth(m, n, lst):
    if _int(n) < 0:
        raise lisp_type_error("a non-negative integer", n)
    x = lst
    for _ in range(n):
        if x is NIL:
            return NIL
        if type(x) is not Cons:
            raise lisp_type_error("a list", lst)
        x = x.cdr
    if x is NIL:
        return NIL
    if type(x) is not Cons:
        raise lisp_type_error("a list", lst)
    return x.car


@builtin("NULL", 1, 1)
def _null(m, x):
    return _bool(x is NIL)


@builtin("NOT", 1, 1)
def _not(m, x):
    return _bool(x is NIL)


@builtin("ATOM", 1, 1)
def _atom(m, x):
    return _bool(type(x) is not Cons)


@builtin("CONSP", 1, 1)
def _consp(m, x):
    return _bool(type(x) is Cons)


@builtin("SYMBOLP", 1, 1)
def _symbolp(m, x):
    return _bool(type(x) is Symbol)


@builtin("STRINGP", 1, 1)
def _stringp(m, x):
    return _bool(type(x) is str)


@builtin("NUMBERP", 1, 1)
def _numberp(m, x):
    return _bool(is_number(x))


@builtin("FUNCTIONP", 1, 1)
def _functionp(m, x):
    return _bool(is_function(x))


@builtin("MAPCAR", 2)
def _mapcar(m, fn, *lists):
    fn = m.resolve_function(fn)
    cursors = list(lists)
    for c in cursors:
        if c is not NIL and type(c) is not Cons:
            raise lisp_type_error("a list", c)
    out = []
    while all(type(c) is Cons for c in cursors):
        out.append(m.apply(fn, [c.car for c in cursors]))
        cursors = [c.cdr for c in cursors]
        for c in cursors:
            if c is not NIL and type(c) is not Cons:
                raise lisp_type_error("a proper list", c)
    return m.list_from(out)


_MISSING = object()


@builtin("REDUCE", 2)
def _reduce(m, fn, seq, *kwargs):
    opts = _keywords(kwargs, {"INITIAL-VALUE": _MISSING, "FROM-END": NIL}, "REDUCE")
    fn = m.resolve_function(fn)
    items = _items(seq, "a list")
    init = opts["INITIAL-VALUE"]
    if opts["FROM-END"] is not NIL:
        items.reverse()
        step = lambda acc, x: m.apply(fn, [x, acc])
    else:
        step = lambda acc, x: m.apply(fn, [acc, x])
    if init is _MISSING:
        if not items:
            return m.apply(fn, [])
        acc, items = items[0], items[1:]
    else:
        acc = init
    for x in items:
        acc = step(acc, x)
    return acc


def _tester(m, opts):
    test = opts["TEST"]
    if test is NIL:
        return eql
    fn = m.resolve_function(test)
    return lambda a, b: m.apply(fn, [a, b]) is not NIL


@builtin("ASSOC", 2)
def _assoc(m, item, alist, *kwargs):
    test = _tester(m, _keywords(kwargs, {"TEST": NIL}, "ASSOC"))
    for entry in _items(alist, "an association list"):
        if entry is NIL:
            continue
        if type(entry) is not Cons:
            raise lisp_type_error("a cons", entry)
        if test(item, entry.car):
            return entry
    return NIL


@builtin("MEMBER", 2)
def _member(m, item, lst, *kwargs):
    test = _tester(m, _keywords(kwargs, {"TEST": NIL}, "MEMBER"))
    x = lst
    while type(x) is Cons:
        if test(item, x.car):
            return x
        x = x.cdr
    if x is not NIL:
        raise lisp_type_error("a proper list", lst)
    return NIL


# -- strings and symbols --------------------------------------------------------


def _designator(x: Any) -> str:
    if type(x) is str:
        return x
    if type(x) is Symbol:
        return x.name
    raise lisp_type_error("a string designator", x)


@builtin("STRING=", 2, 2)
def _string_eq(m, a, b):
    return _bool(_designator(a) == _designator(b))


@builtin("STRING-APPEND")
def _string_append(m, *args):
    return "".join(_str(a) for a in args)


@builtin("SUBSEQ", 2, 3)
def _subseq(m, seq, start, end=NIL):
    if type(seq) is str:
        size = len(seq)
    else:
        items = _items(seq, "a sequence")
        size = len(items)
    start = _int(start)
    stop = size if end is NIL else _int(end)
    if not 0 <= start <= stop <= size:
        raise LispError("TypeError", f"bounding indices {start} and {print_value(end)} are bad for a sequence of length {size}")
    if type(seq) is str:
        return seq[start:stop]
    return m.list_from(items[start:stop])


@builtin("STRING-LENGTH", 1, 1)
def _string_length(m, s):
    return len(_str(s))


@builtin("SYMBOL-NAME", 1, 1)
def _symbol_name(m, s):
    if type(s) is not Symbol:
        raise lisp_type_error("a symbol", s)
    return s.name


@builtin("INTERN", 1, 1)
def _intern(m, s):
    return intern(_str(s))


@builtin("GENSYM", 0, 1)
def _gensym(m, prefix="G"):
    prefix = _str(prefix)
    n = m.env.gensym_counter
    m.env.gensym_counter += 1
    return Symbol(f"{prefix}{n}", interned=False)


# -- application ------------------------------------------------------------------


@builtin("FUNCALL", 1)
def _funcall(m, fn, *args):
    return m.apply(m.resolve_function(fn), list(args))


@builtin("APPLY", 2)
def _apply(m, fn, *args):
    spread = list(args[:-1]) + _items(args[-1])
    return m.apply(m.resolve_function(fn), spread)


# -- output -----------------------------------------------------------------------


@builtin("PRINC", 1, 1)
def _princ(m, x):
    m.emit(princ_value(x))
    return x


@builtin("PRINT", 1, 1)
def _print(m, x):
    m.emit("\n" + print_value(x) + " ")
    return x


@builtin("TERPRI", 0, 0)
def _terpri(m):
    m.emit("\n")
    return NIL


# -- introspection --------------------------------------------------------------------


@builtin("LIST-DEFINITIONS", 0, 0)
def _list_definitions(m):
    return m.list_from(m.env.definitions.keys())


@builtin("FUNCTION-SOURCE", 1, 1)
def _function_source(m, name):
    if type(name) is not Symbol:
        raise lisp_type_error("a symbol", name)
    env = m.env
    if name in env.functions or name in env.macros:
        return env.sources.get(name, NIL)
    raise LispError("UnboundFunction", f"undefined function {print_value(name)}")


def _arity_text(lo: int, hi: Optional[int]) -> str:
    if hi is None:
        return f"{lo}+"
    return str(lo) if lo == hi else f"{lo}-{hi}"


@builtin("DESCRIBE", 1, 1)
def _describe(m, name):
    from .evaluator import SPECIAL_FORMS

    if type(name) is not Symbol:
        raise lisp_type_error("a symbol", name)
    env = m.env
    shown = print_value(name)
    parts = []
    if name in SPECIAL_FORMS:
        parts.append(f"{shown} names a special form")
    fn = env.functions.get(name)
    if isinstance(fn, Builtin):
        parts.append(f"{shown} names a builtin function with arity {_arity_text(fn.min_args, fn.max_args)}")
    elif isinstance(fn, Closure):
        parts.append(
            f"{shown} names a function with arity {_arity_text(fn.params.min_args, fn.params.max_args)}"
            f" and parameters {print_value(fn.params.source)}"
        )
    macro = env.macros.get(name)
    if isinstance(macro, Macro):
        parts.append(
            f"{shown} names a macro with arity {_arity_text(macro.params.min_args, macro.params.max_args)}"
            f" and parameters {print_value(macro.params.source)}"
        )
    if name in env.variables:
        parts.append(f"{shown} names a variable whose value is {print_value(env.variables[name], limit=80)}")
    if not parts:
        return f"{shown} is unbound"
    return "; ".join(parts)


# -- capability-gated groups ------------------------------------------------------------


def _remaining_s(m, cap: float) -> float:
    return max(0.001, min(cap, m.deadline - m.clock()))


def _confined(m, path: Any) -> Path:
    if m.env.fs_root is None:
        raise LispError("CapabilityError", "no filesystem root configured")
    root = Path(m.env.fs_root).resolve()
    target = (root / _str(path)).resolve()
    if target != root and root not in target.parents:
        raise LispError("CapabilityError", f"path {path!r} escapes the sandbox root")
    return target


@builtin("READ-FILE", 1, 1, group="filesystem")
def _read_file(m, path):
    try:
        return _confined(m, path).read_text(encoding="utf-8")
    except OSError as exc:
        raise LispError("FileError", str(exc.strerror or exc)) from None


@builtin("WRITE-FILE", 2, 2, group="filesystem")
def _write_file(m, path, text):
    target = _confined(m, path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(_str(text), encoding="utf-8")
    except OSError as exc:
        raise LispError("FileError", str(exc.strerror or exc)) from None
    return text


@builtin("PROBE-FILE", 1, 1, group="filesystem")
def _probe_file(m, path):
    return _bool(_confined(m, path).exists())


@builtin("HTTP-GET", 1, 1, group="network")
def _http_get(m, url):
    url = _str(url)
    if not url.startswith(("http://", "https://")):
        raise LispError("CapabilityError", "only http and https URLs are allowed")
    try:
        with urllib.request.urlopen(url, timeout=_remaining_s(m, 10.0)) as resp:
            data = resp.read(m.budget.max_output_bytes)
    except OSError as exc:
        raise LispError("NetworkError", str(exc)) from None
    return data.decode("utf-8", "replace")


@builtin("RUN-PROGRAM", 1, 2, group="subprocess")
def _run_program(m, program, args=NIL):
    argv = [_str(program)] + [_str(a) for a in _items(args)]
    try:
        proc = _subprocess.run(argv, capture_output=True, timeout=_remaining_s(m, 30.0), text=True)
    except (OSError, _subprocess.TimeoutExpired) as exc:
        raise LispError("SubprocessError", str(exc)) from None
    return m.list_from([proc.returncode, proc.stdout])


@builtin("GET-UNIVERSAL-TIME", 0, 0, group="time")
def _universal_time(m):
    return int(_time.time()) + 2208988800


@builtin("GET-INTERNAL-REAL-TIME", 0, 0, group="time")
def _internal_real_time(m):
    return int(_time.monotonic() * 1000)
