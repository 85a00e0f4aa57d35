"""Non-incremental reference scan of a whole string, used to check TagScanner."""

import random
import re

from replisp.scanner import CodeBegin, CodeEnd, CodeFragment, Text, Unterminated

BLOCK = re.compile(r"<lisp>(.*?)</lisp>", re.S)

# pieces that stress every tag-prefix state
PIECES = [
    "<lisp>", "</lisp>", "<lispy>", "</lis", "<lisp", "</", "<", "<l", "<li", "lisp>", "/lisp>",
    ">", "a", "hello ", "(+ 1 2)", "\"s\"", "<thinking>", "</thinking>", "<<", "é", "\U0001F600", "\n", " ",
]


def oracle_scan(s: str):
    """Coalesced events for ``s`` scanned in one piece."""
    events = []
    pos = 0
    for m in BLOCK.finditer(s):
        if m.start() > pos:
            events.append(Text(s[pos:m.start()]))
        events.append(CodeBegin)
        if m.group(1):
            events.append(CodeFragment(m.group(1)))
        events.append(CodeEnd)
        pos = m.end()
    rest = s[pos:]
    k = rest.find("<lisp>")
    if k < 0:
        if rest:
            events.append(Text(rest))
        return events
    if k:
        events.append(Text(rest[:k]))
    code = rest[k + len("<lisp>"):]
    events.append(CodeBegin)
    # a trailing close-tag prefix is never emitted as a fragment, only in the final event
    held = next((code[i:] for i in range(len(code)) if "</lisp>".startswith(code[i:])), "")
    if len(code) > len(held):
        events.append(CodeFragment(code[:len(code) - len(held)]))
    events.append(Unterminated(code))
    return events


def random_text(rng: random.Random, max_pieces: int = 30) -> str:
    return "".join(rng.choice(PIECES) for _ in range(rng.randint(0, max_pieces)))


def random_partition(rng: random.Random, s: str):
    if not s:
        return [""]
    cuts = sorted(rng.sample(range(1, len(s)), min(len(s) - 1, rng.randint(0, 8)))) if len(s) > 1 else []
    bounds = [0] + cuts + [len(s)]
    return [s[a:b] for a, b in zip(bounds, bounds[1:])]
