"""Embedded, budgeted interpreter for a Common Lisp subset."""

from .builtins import builtin_library
from .evaluator import (
    SPECIAL_FORMS,
    CapabilityPolicy,
    Env,
    EvalBudget,
    EvalOutcome,
    eval_top_level,
    evaluate,
    macroexpand,
)
from .printer import print_value, princ_value
from .reader import read, read_with_spans
from .types import NIL, T, Cons, LispError, ReaderError, Symbol, intern

__all__ = [
    "NIL",
    "SPECIAL_FORMS",
    "T",
    "CapabilityPolicy",
    "Cons",
    "Env",
    "EvalBudget",
    "EvalOutcome",
    "LispError",
    "ReaderError",
    "Symbol",
    "builtin_library",
    "eval_top_level",
    "evaluate",
    "intern",
    "macroexpand",
    "print_value",
    "princ_value",
    "read",
    "read_with_spans",
]
