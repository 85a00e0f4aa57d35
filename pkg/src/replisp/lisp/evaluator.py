"""Budgeted evaluator, macro expander and top-level driver."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional

from .printer import print_value
from .reader import FUNCTION, QUASIQUOTE, QUOTE, UNQUOTE, UNQUOTE_SPLICING, read_with_spans
from .stack import run_deep
from .types import (
    NIL,
    T,
    Builtin,
    BudgetExhausted,
    Closure,
    Cons,
    LambdaList,
    LispError,
    Macro,
    ReaderError,
    Symbol,
    intern,
    is_function,
    keyword,
    lisp_type_error,
)

Clock = Callable[[], float]

_MISSING = object()

AMP_OPTIONAL = intern("&OPTIONAL")
AMP_REST = intern("&REST")
AMP_BODY = intern("&BODY")
AMP_KEY = intern("&KEY")
LAMBDA = intern("LAMBDA")

# Evaluation nesting allowed per unit of max_depth; keeps Python recursion
# well inside the limits set in stack.py.
NESTING_PER_DEPTH = 16
WALL_CHECK_MASK = 1023


@dataclass(frozen=True)
class EvalBudget:
    max_steps: int = 1_000_000
    max_depth: int = 512
    max_cells: int = 1_000_000
    max_output_bytes: int = 65536
    max_wall_ms: int = 2000

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"budget {name} must be a positive integer, got {value!r}")

    def scaled(self, factor: int) -> "EvalBudget":
        return EvalBudget(**{k: v * factor for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalBudget":
        return cls(**data)


@dataclass(frozen=True)
class CapabilityPolicy:
    filesystem: bool = False
    network: bool = False
    subprocess: bool = False
    time: bool = False

    def enabled_groups(self) -> List[str]:
        return [k for k, v in asdict(self).items() if v]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "CapabilityPolicy":
        return cls(**(data or {}))


@dataclass
class EvalOutcome:
    status: str  # "ok" | "error"
    value: Optional[str] = None
    output: str = ""
    error: Optional[Dict[str, Any]] = None
    steps_used: int = 0
    cells_used: int = 0
    wall_ms: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def error_kind(self) -> Optional[str]:
        return self.error["kind"] if self.error else None

    def error_text(self) -> str:
        assert self.error is not None
        return f"#<error: {self.error['kind']} {self.error['message']}>"

    def result_text(self) -> str:
        """Value text, or the unreadable error marker."""
        return self.value if self.ok else self.error_text()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalOutcome":
        return cls(**data)


class Frame:
    __slots__ = ("vars", "parent")

    def __init__(self, vars: Dict[Symbol, Any], parent: Optional["Frame"]):
        self.vars = vars
        self.parent = parent


class Env:
    """Global state of one session: values, functions, macros and sources."""

    def __init__(self, policy: Optional[CapabilityPolicy] = None, fs_root: Optional[str] = None):
        from .builtins import builtin_library

        self.policy = policy or CapabilityPolicy()
        self.fs_root = fs_root
        self.variables: Dict[Symbol, Any] = {}
        self.functions: Dict[Symbol, Any] = dict(builtin_library(self.policy))
        self.macros: Dict[Symbol, Macro] = {}
        self.sources: Dict[Symbol, str] = {}
        # user-defined global names in first-definition order
        self.definitions: Dict[Symbol, str] = {}
        self.gensym_counter = 1

    def define(self, name: Symbol, kind: str) -> None:
        self.definitions.setdefault(name, kind)


class Machine:
    """State of a single evaluation: budget counters and captured output."""

    def __init__(self, env: Env, budget: EvalBudget, clock: Optional[Clock] = None):
        self.env = env
        self.budget = budget
        self.clock = clock or time.monotonic
        self.steps = 0
        self.cells = 0
        self.depth = 0
        self.nesting = 0
        self.max_nesting = budget.max_depth * NESTING_PER_DEPTH
        self.output: List[str] = []
        self.output_bytes = 0
        self.started = self.clock()
        self.deadline = self.started + budget.max_wall_ms / 1000.0
        self.source_text = ""
        self.spans: Dict[int, tuple] = {}

    # -- accounting ---------------------------------------------------------

    def tick(self) -> None:
        self.steps += 1
        if self.steps > self.budget.max_steps:
            raise BudgetExhausted("max_steps", f"{self.budget.max_steps} steps")
        if not self.steps & WALL_CHECK_MASK and self.clock() > self.deadline:
            raise BudgetExhausted("max_wall_ms", f"{self.budget.max_wall_ms} ms")

    def alloc(self, n: int) -> None:
        self.cells += n
        if self.cells > self.budget.max_cells:
            raise BudgetExhausted("max_cells", f"{self.budget.max_cells} cells")

    def cons(self, car: Any, cdr: Any) -> Cons:
        self.alloc(1)
        return Cons(car, cdr)

    def list_from(self, items, tail: Any = NIL) -> Any:
        items = list(items)
        self.alloc(len(items))
        out = tail
        for item in reversed(items):
            out = Cons(item, out)
        return out

    def emit(self, text: str) -> None:
        data = text.encode("utf-8")
        room = self.budget.max_output_bytes - self.output_bytes
        if len(data) > room:
            if room > 0:
                self.output.append(data[:room].decode("utf-8", "ignore"))
                self.output_bytes = self.budget.max_output_bytes
            raise BudgetExhausted("max_output_bytes", f"{self.budget.max_output_bytes} bytes")
        self.output.append(text)
        self.output_bytes += len(data)

    def _enter(self) -> None:
        self.nesting += 1
        if self.nesting > self.max_nesting:
            raise BudgetExhausted("max_depth", "expression nesting")

    # -- lookup -------------------------------------------------------------

    def lexical(self, sym: Symbol, frame: Optional[Frame]) -> Any:
        while frame is not None:
            v = frame.vars.get(sym, _MISSING)
            if v is not _MISSING:
                return v
            frame = frame.parent
        return _MISSING

    def global_function(self, sym: Symbol) -> Any:
        fn = self.env.functions.get(sym)
        if fn is None:
            if sym in self.env.macros or sym in SPECIAL_FORMS:
                raise LispError("UnboundFunction", f"{sym.name} names a macro or special form, not a function")
            raise LispError("UnboundFunction", f"undefined function {print_value(sym)}")
        return fn

    def resolve_function(self, designator: Any) -> Any:
        if type(designator) is Symbol:
            return self.global_function(designator)
        if is_function(designator):
            return designator
        raise lisp_type_error("a function designator", designator)

    # -- core ---------------------------------------------------------------

    def eval(self, x: Any, frame: Optional[Frame]) -> Any:
        self.tick()
        tx = type(x)
        if tx is Symbol:
            if x.keyword or x is NIL or x is T:
                return x
            f = frame
            while f is not None:
                v = f.vars.get(x, _MISSING)
                if v is not _MISSING:
                    return v
                f = f.parent
            v = self.env.variables.get(x, _MISSING)
            if v is _MISSING:
                raise LispError("UnboundSymbol", f"the variable {print_value(x)} is unbound")
            return v
        if tx is not Cons:
            return x
        self._enter()
        try:
            head = x.car
            if type(head) is Symbol:
                special = SPECIAL_FORMS.get(head)
                if special is not None:
                    return special(self, x, frame)
                fn = self.lexical(head, frame) if frame is not None else _MISSING
                if not is_function(fn):
                    macro = self.env.macros.get(head)
                    if macro is not None:
                        return self.eval(self.expand_macro(macro, x), frame)
                    fn = self.global_function(head)
            else:
                fn = self.eval(head, frame)
                if not is_function(fn):
                    raise lisp_type_error("a function", fn)
            args = []
            a = x.cdr
            while type(a) is Cons:
                args.append(self.eval(a.car, frame))
                a = a.cdr
            if a is not NIL:
                raise LispError("ProgramError", f"dotted argument list in {print_value(x, limit=80)}")
            return self.apply(fn, args)
        finally:
            self.nesting -= 1

    def apply(self, fn: Any, args: List[Any]) -> Any:
        self.tick()
        if type(fn) is Symbol:
            fn = self.global_function(fn)
        self.depth += 1
        self.nesting += 1
        try:
            if self.depth > self.budget.max_depth:
                raise BudgetExhausted("max_depth", f"{self.budget.max_depth} nested calls")
            if self.nesting > self.max_nesting:
                raise BudgetExhausted("max_depth", "expression nesting")
            tf = type(fn)
            if tf is Builtin:
                n = len(args)
                if n < fn.min_args or (fn.max_args is not None and n > fn.max_args):
                    raise LispError("WrongArity", f"{fn.name} called with {n} argument{'s' if n != 1 else ''}, expects {_arity(fn.min_args, fn.max_args)}")
                return fn.fn(self, *args)
            if tf is Closure:
                frame = Frame({}, fn.env)
                self.bind(fn.params, args, frame, fn.name)
                return self.progn(fn.body, frame)
            raise lisp_type_error("a function", fn)
        finally:
            self.depth -= 1
            self.nesting -= 1

    def progn(self, body: Any, frame: Optional[Frame]) -> Any:
        result = NIL
        while type(body) is Cons:
            result = self.eval(body.car, frame)
            body = body.cdr
        return result

    def bind(self, ll: LambdaList, args: List[Any], frame: Frame, name: Optional[Symbol]) -> None:
        n = len(args)
        if n < ll.min_args or (ll.max_args is not None and n > ll.max_args):
            who = name.name if name is not None else "anonymous function"
            raise LispError("WrongArity", f"{who} called with {n} argument{'s' if n != 1 else ''}, expects {_arity(ll.min_args, ll.max_args)}")
        i = 0
        for p in ll.required:
            if type(p) is Symbol:
                frame.vars[p] = args[i]
            else:
                value = args[i]
                if value is not NIL and type(value) is not Cons:
                    raise lisp_type_error("a list matching the macro lambda list", value)
                self.bind(p, list(value) if value is not NIL else [], frame, name)
            i += 1
        for sym, default in ll.optional:
            if i < n:
                frame.vars[sym] = args[i]
                i += 1
            else:
                frame.vars[sym] = self.eval(default, frame)
        rest = args[i:]
        if ll.rest is not None:
            frame.vars[ll.rest] = self.list_from(rest)
        if ll.keys:
            if len(rest) % 2:
                raise LispError("ProgramError", "odd number of keyword arguments")
            supplied: Dict[Symbol, Any] = {}
            for k in range(0, len(rest), 2):
                kw = rest[k]
                if type(kw) is not Symbol or not kw.keyword:
                    raise LispError("ProgramError", f"{print_value(kw, limit=40)} is not a keyword")
                supplied.setdefault(kw, rest[k + 1])
            known = {kw for _, kw, _ in ll.keys}
            unknown = [kw for kw in supplied if kw not in known]
            if unknown:
                raise LispError("ProgramError", f"unknown keyword argument {print_value(unknown[0])}")
            for sym, kw, default in ll.keys:
                frame.vars[sym] = supplied[kw] if kw in supplied else self.eval(default, frame)

    def expand_macro(self, macro: Macro, form: Cons) -> Any:
        self.tick()
        self.depth += 1
        try:
            if self.depth > self.budget.max_depth:
                raise BudgetExhausted("max_depth", f"{self.budget.max_depth} nested calls")
            args = form.cdr
            if args is not NIL and type(args) is not Cons:
                raise LispError("ProgramError", "dotted macro call")
            frame = Frame({}, macro.env)
            self.bind(macro.params, list(args) if args is not NIL else [], frame, macro.name)
            return self.progn(macro.body, frame)
        finally:
            self.depth -= 1

    def macroexpand(self, form: Any, frame: Optional[Frame] = None) -> Any:
        while type(form) is Cons and type(form.car) is Symbol:
            head = form.car
            if head in SPECIAL_FORMS:
                break
            if frame is not None and is_function(self.lexical(head, frame)):
                break
            macro = self.env.macros.get(head)
            if macro is None:
                break
            form = self.expand_macro(macro, form)
        return form

    def source_of(self, form: Cons) -> str:
        span = self.spans.get(id(form))
        if span is not None:
            return self.source_text[span[0]:span[1]]
        return print_value(form)


# -- special forms ------------------------------------------------------------


def _arity(lo: int, hi: Optional[int]) -> str:
    if hi is None:
        return f"at least {lo}"
    if lo == hi:
        return str(lo)
    return f"{lo} to {hi}"


def _args(x: Cons, lo: int, hi: Optional[int] = None) -> List[Any]:
    items = []
    a = x.cdr
    while type(a) is Cons:
        items.append(a.car)
        a = a.cdr
    if a is not NIL or len(items) < lo or (hi is not None and len(items) > hi):
        raise LispError("ProgramError", f"malformed {x.car.name} form: {print_value(x, limit=80)}")
    return items


def _check_variable(sym: Any, what: str) -> Symbol:
    if type(sym) is not Symbol or sym.keyword or sym is NIL or sym is T:
        raise LispError("ProgramError", f"{print_value(sym, limit=40)} cannot be used as {what}")
    return sym


def parse_lambda_list(form: Any, destructuring: bool = False) -> LambdaList:
    required: List[Any] = []
    optional: List[tuple] = []
    rest: Optional[Symbol] = None
    keys: List[tuple] = []
    seen = set()
    state = "required"

    def note(sym: Symbol) -> Symbol:
        _check_variable(sym, "a parameter name")
        if sym in seen:
            raise LispError("ProgramError", f"duplicate parameter {sym.name}")
        seen.add(sym)
        return sym

    if form is not NIL and type(form) is not Cons:
        raise LispError("ProgramError", f"malformed lambda list {print_value(form, limit=60)}")
    x = form
    while type(x) is Cons:
        item = x.car
        if item is AMP_OPTIONAL:
            if state != "required":
                raise LispError("ProgramError", "misplaced &OPTIONAL")
            state = "optional"
        elif item is AMP_REST or item is AMP_BODY:
            if state in ("rest", "after-rest", "key"):
                raise LispError("ProgramError", "misplaced &REST")
            state = "rest"
        elif item is AMP_KEY:
            if state == "rest":
                raise LispError("ProgramError", "&REST without a variable")
            state = "key"
        elif state == "required":
            if destructuring and (type(item) is Cons or item is NIL):
                required.append(parse_lambda_list(item, True))
            else:
                required.append(note(item))
        elif state in ("optional", "key"):
            if type(item) is Cons:
                parts = list(item)
                if not 1 <= len(parts) <= 2:
                    raise LispError("ProgramError", f"malformed parameter {print_value(item, limit=60)}")
                sym, default = note(parts[0]), (parts[1] if len(parts) == 2 else NIL)
            else:
                sym, default = note(item), NIL
            if state == "optional":
                optional.append((sym, default))
            else:
                keys.append((sym, keyword(sym.name), default))
        elif state == "rest":
            rest = note(item)
            state = "after-rest"
        else:
            raise LispError("ProgramError", f"unexpected {print_value(item, limit=40)} after &REST variable")
        x = x.cdr
    if x is not NIL:
        if not destructuring or rest is not None or type(x) is not Symbol:
            raise LispError("ProgramError", "malformed dotted lambda list")
        rest = note(x)
    if state == "rest":
        raise LispError("ProgramError", "&REST without a variable")
    return LambdaList(required, optional, rest, keys, form)


def _body(forms: Any) -> Any:
    """Drop a leading docstring when more forms follow."""
    if type(forms) is Cons and type(forms.car) is str and type(forms.cdr) is Cons:
        return forms.cdr
    return forms


def sf_quote(m: Machine, x: Cons, frame):
    return _args(x, 1, 1)[0]


def sf_if(m: Machine, x: Cons, frame):
    items = _args(x, 2, 3)
    if m.eval(items[0], frame) is not NIL:
        return m.eval(items[1], frame)
    return m.eval(items[2], frame) if len(items) == 3 else NIL


def sf_progn(m: Machine, x: Cons, frame):
    _args(x, 0)
    return m.progn(x.cdr, frame)


def _parse_bindings(m: Machine, x: Cons) -> List[tuple]:
    items = _args(x, 1)
    spec = items[0]
    if spec is not NIL and type(spec) is not Cons:
        raise LispError("ProgramError", f"malformed bindings in {print_value(x, limit=80)}")
    out = []
    for b in (spec if spec is not NIL else ()):
        if type(b) is Cons:
            parts = list(b)
            if not 1 <= len(parts) <= 2:
                raise LispError("ProgramError", f"malformed binding {print_value(b, limit=60)}")
            out.append((_check_variable(parts[0], "a variable"), parts[1] if len(parts) == 2 else NIL))
        else:
            out.append((_check_variable(b, "a variable"), NIL))
    return out


def sf_let(m: Machine, x: Cons, frame):
    bindings = _parse_bindings(m, x)
    values = {}
    for sym, form in bindings:
        values[sym] = m.eval(form, frame)
    return m.progn(x.cdr.cdr, Frame(values, frame))


def sf_let_star(m: Machine, x: Cons, frame):
    bindings = _parse_bindings(m, x)
    for sym, form in bindings:
        frame = Frame({sym: m.eval(form, frame)}, frame)
    return m.progn(x.cdr.cdr, frame)


def sf_lambda(m: Machine, x: Cons, frame):
    items = _args(x, 1)
    return Closure(parse_lambda_list(items[0]), _body(x.cdr.cdr), frame)


def sf_function(m: Machine, x: Cons, frame):
    target = _args(x, 1, 1)[0]
    if type(target) is Symbol:
        fn = m.lexical(target, frame) if frame is not None else _MISSING
        if is_function(fn):
            return fn
        return m.global_function(target)
    if type(target) is Cons and target.car is LAMBDA:
        return sf_lambda(m, target, frame)
    raise LispError("ProgramError", f"malformed FUNCTION form: {print_value(x, limit=80)}")


def _check_definable(name: Any, what: str) -> Symbol:
    sym = _check_variable(name, what)
    if sym in SPECIAL_FORMS:
        raise LispError("ProgramError", f"cannot redefine special form {sym.name}")
    return sym


def sf_defun(m: Machine, x: Cons, frame):
    items = _args(x, 2)
    name = _check_definable(items[0], "a function name")
    closure = Closure(parse_lambda_list(items[1]), _body(x.cdr.cdr.cdr), frame, name)
    env = m.env
    env.macros.pop(name, None)
    env.functions[name] = closure
    env.sources[name] = m.source_of(x)
    env.define(name, "function")
    return name


def sf_defmacro(m: Machine, x: Cons, frame):
    items = _args(x, 2)
    name = _check_definable(items[0], "a macro name")
    macro = Macro(parse_lambda_list(items[1], destructuring=True), _body(x.cdr.cdr.cdr), frame, name)
    env = m.env
    env.functions.pop(name, None)
    env.macros[name] = macro
    env.sources[name] = m.source_of(x)
    env.define(name, "macro")
    return name


def sf_defparameter(m: Machine, x: Cons, frame):
    items = _args(x, 2, 3)
    name = _check_variable(items[0], "a variable name")
    m.env.variables[name] = m.eval(items[1], frame)
    m.env.define(name, "variable")
    return name


def sf_setq(m: Machine, x: Cons, frame):
    items = _args(x, 0)
    if len(items) % 2:
        raise LispError("ProgramError", f"odd number of arguments to SETQ: {print_value(x, limit=80)}")
    value = NIL
    for k in range(0, len(items), 2):
        sym = _check_variable(items[k], "a variable")
        value = m.eval(items[k + 1], frame)
        f = frame
        while f is not None:
            if sym in f.vars:
                f.vars[sym] = value
                break
            f = f.parent
        else:
            m.env.variables[sym] = value
            m.env.define(sym, "variable")
    return value


def sf_cond(m: Machine, x: Cons, frame):
    for clause in _args(x, 0):
        if type(clause) is not Cons:
            raise LispError("ProgramError", f"malformed COND clause {print_value(clause, limit=60)}")
        test = m.eval(clause.car, frame)
        if test is not NIL:
            if clause.cdr is NIL:
                return test
            return m.progn(clause.cdr, frame)
    return NIL


def sf_and(m: Machine, x: Cons, frame):
    value = T
    for form in _args(x, 0):
        value = m.eval(form, frame)
        if value is NIL:
            return NIL
    return value


def sf_or(m: Machine, x: Cons, frame):
    for form in _args(x, 0):
        value = m.eval(form, frame)
        if value is not NIL:
            return value
    return NIL


def sf_while(m: Machine, x: Cons, frame):
    items = _args(x, 1)
    body = x.cdr.cdr
    while m.eval(items[0], frame) is not NIL:
        m.progn(body, frame)
    return NIL


def sf_quasiquote(m: Machine, x: Cons, frame):
    return _qq(m, _args(x, 1, 1)[0], 1, frame)


def sf_unquote(m: Machine, x: Cons, frame):
    raise LispError("ProgramError", "comma outside of backquote")


def _is_form(x: Any, head: Symbol) -> bool:
    return type(x) is Cons and x.car is head and type(x.cdr) is Cons and x.cdr.cdr is NIL


def _qq(m: Machine, x: Any, level: int, frame) -> Any:
    if type(x) is not Cons:
        return x
    m._enter()
    try:
        if _is_form(x, UNQUOTE):
            if level == 1:
                return m.eval(x.cdr.car, frame)
            return m.list_from([UNQUOTE, _qq(m, x.cdr.car, level - 1, frame)])
        if _is_form(x, QUASIQUOTE):
            return m.list_from([QUASIQUOTE, _qq(m, x.cdr.car, level + 1, frame)])
        if _is_form(x, UNQUOTE_SPLICING):
            if level == 1:
                raise LispError("ProgramError", ",@ after backquote is not allowed here")
            return m.list_from([UNQUOTE_SPLICING, _qq(m, x.cdr.car, level - 1, frame)])
        items: List[Any] = []
        tail: Any = NIL
        p: Any = x
        while type(p) is Cons:
            if p is not x and (_is_form(p, UNQUOTE) or _is_form(p, QUASIQUOTE)):
                # `(a . ,b) reads as (a UNQUOTE b)
                tail = _qq(m, p, level, frame)
                break
            item = p.car
            if level == 1 and _is_form(item, UNQUOTE_SPLICING):
                spliced = m.eval(item.cdr.car, frame)
                if spliced is not NIL:
                    if type(spliced) is not Cons:
                        raise lisp_type_error("a list to splice", spliced)
                    items.extend(spliced)
            else:
                items.append(_qq(m, item, level, frame))
            p = p.cdr
        else:
            tail = p
        return m.list_from(items, tail)
    finally:
        m.nesting -= 1


SPECIAL_FORMS: Dict[Symbol, Callable] = {
    intern("QUOTE"): sf_quote,
    intern("IF"): sf_if,
    intern("PROGN"): sf_progn,
    intern("LET"): sf_let,
    intern("LET*"): sf_let_star,
    intern("LAMBDA"): sf_lambda,
    intern("DEFUN"): sf_defun,
    intern("DEFMACRO"): sf_defmacro,
    intern("DEFPARAMETER"): sf_defparameter,
    intern("SETQ"): sf_setq,
    intern("COND"): sf_cond,
    intern("AND"): sf_and,
    intern("OR"): sf_or,
    intern("QUASIQUOTE"): sf_quasiquote,
    intern("UNQUOTE"): sf_unquote,
    intern("UNQUOTE-SPLICING"): sf_unquote,
    intern("WHILE"): sf_while,
    intern("FUNCTION"): sf_function,
}


# -- entry points -----------------------------------------------------------


def _snippet(text: str, limit: int = 200) -> str:
    text = text.strip()
    return text if len(text) <= limit else text[:limit] + "..."


def _error_outcome(m: Optional[Machine], err: LispError, form: str, index: Optional[int], wall_ms: int) -> EvalOutcome:
    return EvalOutcome(
        status="error",
        output="".join(m.output) if m else "",
        error={"kind": err.kind, "message": err.message, "form": form, "form_index": index},
        steps_used=m.steps if m else 0,
        cells_used=m.cells if m else 0,
        wall_ms=wall_ms,
    )


def _eval_top_level(source: str, env: Env, budget: EvalBudget, clock: Optional[Clock]) -> EvalOutcome:
    m = Machine(env, budget, clock)

    def elapsed() -> int:
        return max(0, int(round((m.clock() - m.started) * 1000)))

    try:
        forms, form_spans, spans = read_with_spans(source)
    except ReaderError as err:
        return _error_outcome(m, err, _snippet(source[max(0, err.position - 20):err.position + 40]), None, elapsed())
    m.source_text = source
    m.spans = spans
    value: Any = NIL
    for index, form in enumerate(forms):
        try:
            value = m.eval(form, None)
        except LispError as err:
            start, end = form_spans[index]
            return _error_outcome(m, err, _snippet(source[start:end]), index, elapsed())
        except RecursionError:
            start, end = form_spans[index]
            err = BudgetExhausted("max_depth", "interpreter stack")
            return _error_outcome(m, err, _snippet(source[start:end]), index, elapsed())
    return EvalOutcome(
        status="ok",
        value=print_value(value),
        output="".join(m.output),
        steps_used=m.steps,
        cells_used=m.cells,
        wall_ms=elapsed(),
    )


def eval_top_level(source: str, env: Env, budget: Optional[EvalBudget] = None, clock: Optional[Clock] = None) -> EvalOutcome:
    """Read and evaluate every form in ``source`` under one shared budget.

    The outcome's value is the printed value of the last form; evaluation
    stops at the first error. Empty source evaluates to ``NIL``.
    """
    return run_deep(_eval_top_level, source, env, budget or EvalBudget(), clock)


def evaluate(expr: Any, env: Env, budget: Optional[EvalBudget] = None, clock: Optional[Clock] = None) -> Any:
    """Evaluate one already-read expression and return the raw value."""

    def run():
        m = Machine(env, budget or EvalBudget(), clock)
        try:
            return m.eval(expr, None)
        except RecursionError:
            raise BudgetExhausted("max_depth", "interpreter stack") from None

    return run_deep(run)


def macroexpand(expr: Any, env: Env, budget: Optional[EvalBudget] = None, clock: Optional[Clock] = None) -> Any:
    """Expand head-position macros until the head is no longer a macro."""

    def run():
        m = Machine(env, budget or EvalBudget(), clock)
        try:
            return m.macroexpand(expr)
        except RecursionError:
            raise BudgetExhausted("max_depth", "interpreter stack") from None

    return run_deep(run)
