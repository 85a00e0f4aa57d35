"""Injectable clocks; ``FixedClock`` pins every timestamp for reproducible runs."""

from __future__ import annotations

import time


class SystemClock:
    fixed = False

    def now(self) -> float:
        return time.time()

    def monotonic(self) -> float:
        return time.monotonic()


class FixedClock:
    """Wall time frozen at ``epoch``; monotonic time never advances.

    With this clock evaluation wall budgets never trip (step budgets still
    bound every evaluation) and all latencies read as zero.
    """

    fixed = True

    def __init__(self, epoch: float = 1_700_000_000.0):
        self.epoch = epoch

    def now(self) -> float:
        return self.epoch

    def monotonic(self) -> float:
        return 0.0


SYSTEM_CLOCK = SystemClock()
