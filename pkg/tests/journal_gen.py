"""Random journals of pure definitions (unique names, no mutation) for replay tests."""

import random


def _expr(rng, args, funcs, depth=0):
    roll = rng.random()
    if depth > 2 or roll < 0.3:
        return rng.choice(args + [str(rng.randint(-9, 9))])
    if funcs and roll < 0.5:
        f, arity = rng.choice(funcs)
        return f"({f} {' '.join(_expr(rng, args, funcs, depth + 1) for _ in range(arity))})"
    op = rng.choice(["+", "-", "*", "max", "min"])
    return f"({op} {_expr(rng, args, funcs, depth + 1)} {_expr(rng, args, funcs, depth + 1)})"


def random_sources(rng: random.Random, n: int):
    funcs, params, macros, out = [], [], [], []
    for i in range(n):
        kind = rng.choice(["defun", "defun", "defparameter", "defmacro", "call", "list"])
        if kind == "defun":
            arity = rng.randint(1, 2)
            args = ["x", "y"][:arity]
            name = f"f{i}"
            out.append(f"(defun {name} ({' '.join(args)}) {_expr(rng, args + params, funcs)})")
            funcs.append((name, arity))
        elif kind == "defparameter":
            name = f"*p{i}*"
            out.append(f"(defparameter {name} {_expr(rng, params, funcs)})")
            params.append(name)
        elif kind == "defmacro":
            name = f"m{i}"
            out.append(f"(defmacro {name} (a b) `(list ,a ,b '{name}))")
            macros.append(name)
        elif kind == "call" and funcs:
            f, arity = rng.choice(funcs)
            out.append(f"({f} {' '.join(str(rng.randint(-5, 5)) for _ in range(arity))})")
        elif macros:
            out.append(f"({rng.choice(macros)} {_expr(rng, params, funcs)} \"s{i}\")")
        else:
            out.append(f"(list {i} \"t{i}\" 'sym{i})")
    return out
