"""Value universe shared by code and data.

Integers and floats are plain Python ``int``/``float`` (never ``bool``),
strings are ``str``. Symbols are interned; ``NIL`` is both the empty list
and false.
"""

from __future__ import annotations

import threading
from typing import Any, Dict, Iterator, List, Optional

INT_MIN = -(2 ** 63)
INT_MAX = 2 ** 63 - 1


class LispError(Exception):
    """An evaluation error carried back to the caller as data.

    ``kind`` is one of the documented error kinds (``UnboundSymbol``,
    ``TypeError``, ``BudgetExhausted`` ...).
    """

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


class ReaderError(LispError):
    def __init__(self, message: str, position: int):
        super().__init__("ReaderError", f"{message} at position {position}")
        self.position = position


class BudgetExhausted(LispError):
    def __init__(self, limit: str, detail: str = ""):
        msg = limit if not detail else f"{limit} ({detail})"
        super().__init__("BudgetExhausted", msg)
        self.limit = limit


def lisp_type_error(what: str, value: Any) -> LispError:
    from .printer import print_value

    return LispError("TypeError", f"{print_value(value, limit=80)} is not {what}")


class Symbol:
    __slots__ = ("name", "keyword", "interned", "__weakref__")

    def __init__(self, name: str, keyword: bool = False, interned: bool = True):
        self.name = name
        self.keyword = keyword
        self.interned = interned

    def __repr__(self) -> str:
        return f"Symbol({':' if self.keyword else ''}{self.name})"


_symbols: Dict[str, Symbol] = {}
_keywords: Dict[str, Symbol] = {}
_intern_lock = threading.Lock()


def intern(name: str) -> Symbol:
    sym = _symbols.get(name)
    if sym is None:
        with _intern_lock:
            sym = _symbols.setdefault(name, Symbol(name))
    return sym


def keyword(name: str) -> Symbol:
    sym = _keywords.get(name)
    if sym is None:
        with _intern_lock:
            sym = _keywords.setdefault(name, Symbol(name, keyword=True))
    return sym


NIL = intern("NIL")
T = intern("T")


class Cons:
    __slots__ = ("car", "cdr")

    def __init__(self, car: Any, cdr: Any):
        self.car = car
        self.cdr = cdr

    def __iter__(self) -> Iterator[Any]:
        """Iterate a proper list; dotted tails raise TypeError."""
        x: Any = self
        while isinstance(x, Cons):
            yield x.car
            x = x.cdr
        if x is not NIL:
            raise lisp_type_error("a proper list", self)

    def __repr__(self) -> str:
        from .printer import print_value

        return f"Cons<{print_value(self, limit=60)}>"


class Builtin:
    __slots__ = ("name", "fn", "min_args", "max_args", "group")

    def __init__(self, name: str, fn, min_args: int, max_args: Optional[int], group: str = "pure"):
        self.name = name
        self.fn = fn
        self.min_args = min_args
        self.max_args = max_args
        self.group = group

    def __repr__(self) -> str:
        return f"Builtin({self.name})"


class LambdaList:
    """Parsed parameter list.

    ``required`` holds symbols, or nested lambda lists when destructuring
    (macros only). ``optional`` and ``keys`` carry their default forms.
    """

    __slots__ = ("required", "optional", "rest", "keys", "source")

    def __init__(self, required, optional, rest, keys, source):
        self.required: List[Any] = required
        self.optional: List[tuple] = optional  # (symbol, default form)
        self.rest: Optional[Symbol] = rest
        self.keys: List[tuple] = keys  # (symbol, keyword, default form)
        self.source = source

    @property
    def min_args(self) -> int:
        return len(self.required)

    @property
    def max_args(self) -> Optional[int]:
        if self.rest is not None or self.keys:
            return None
        return len(self.required) + len(self.optional)


class Closure:
    __slots__ = ("params", "body", "env", "name")

    def __init__(self, params: LambdaList, body: Any, env, name: Optional[Symbol] = None):
        self.params = params
        self.body = body
        self.env = env
        self.name = name

    def __repr__(self) -> str:
        return f"Closure({self.name.name if self.name else 'LAMBDA'})"


class Macro:
    __slots__ = ("params", "body", "env", "name")

    def __init__(self, params: LambdaList, body: Any, env, name: Symbol):
        self.params = params
        self.body = body
        self.env = env
        self.name = name

    def __repr__(self) -> str:
        return f"Macro({self.name.name})"


def is_number(x: Any) -> bool:
    return (isinstance(x, int) and not isinstance(x, bool)) or isinstance(x, float)


def is_function(x: Any) -> bool:
    return isinstance(x, (Builtin, Closure))


def is_list(x: Any) -> bool:
    return x is NIL or isinstance(x, Cons)


def from_list(items, tail: Any = NIL) -> Any:
    """Build a Lisp list from a Python sequence (no budget accounting)."""
    out = tail
    for item in reversed(list(items)):
        out = Cons(item, out)
    return out


def to_list(x: Any) -> List[Any]:
    if x is NIL:
        return []
    if not isinstance(x, Cons):
        raise lisp_type_error("a list", x)
    return list(x)


def check_int(value: int) -> int:
    if value < INT_MIN or value > INT_MAX:
        raise LispError("IntegerOverflow", f"result {value} does not fit in 64 bits")
    return value
