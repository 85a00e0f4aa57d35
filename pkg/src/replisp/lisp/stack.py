"""Run evaluator calls on worker threads with a large C stack.

The evaluator is recursive; on CPython 3.10 every Lisp-level nesting costs
C stack. The evaluator's own nesting guard trips far below
``RECURSION_LIMIT``, and ``STACK_BYTES`` leaves headroom above that.
"""

from __future__ import annotations

import sys
import threading
from concurrent.futures import ThreadPoolExecutor

STACK_BYTES = 512 * 1024 * 1024
RECURSION_LIMIT = 400_000
MAX_WORKERS = 8

_local = threading.local()
_lock = threading.Lock()
_pool = None


def _mark() -> None:
    _local.deep = True


def _get_pool() -> ThreadPoolExecutor:
    global _pool
    if _pool is None:
        if sys.getrecursionlimit() < RECURSION_LIMIT:
            sys.setrecursionlimit(RECURSION_LIMIT)
        _pool = ThreadPoolExecutor(
            max_workers=MAX_WORKERS, thread_name_prefix="lisp-eval", initializer=_mark
        )
    return _pool


def run_deep(fn, *args, **kwargs):
    """Call ``fn`` on a big-stack thread and block for its result."""
    if getattr(_local, "deep", False):
        return fn(*args, **kwargs)
    with _lock:
        pool = _get_pool()
        old = threading.stack_size(STACK_BYTES)
        try:
            future = pool.submit(fn, *args, **kwargs)
        finally:
            threading.stack_size(old)
    return future.result()
