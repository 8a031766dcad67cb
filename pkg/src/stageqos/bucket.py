"""Token bucket (DRL) pacing one channel.

Rates are in tokens per second and time is monotonic nanoseconds. A metadata
request costs one token; a data request costs its size in bytes.
"""

from __future__ import annotations

import math
import threading
import time

NS_PER_S = 1_000_000_000

# wait hint returned while the rate is zero; only a set_rate can unblock
BLOCKED = math.inf

DEFAULT_BURST_SECONDS = 0.1


class BurstExceedsCapacity(ValueError):
    """A single draw asked for more tokens than the bucket can ever hold."""


def capacity_for(rate: float, burst_seconds: float = DEFAULT_BURST_SECONDS) -> float:
    return max(1.0, rate * burst_seconds)


class TokenBucket:
    """Thread-safe token bucket with an adjustable rate.

    Capacity follows ``max(1, rate * burst_seconds)`` and is recomputed on
    every rate change unless a fixed ``capacity`` is given. The bucket starts
    full.

    :meth:`try_consume` never blocks: it returns ``0.0`` when the tokens were
    granted, otherwise the number of seconds until ``cost`` tokens will be
    available at the current rate (:data:`BLOCKED` when the rate is zero).
    :meth:`consume` blocks, and re-evaluates its wait whenever the rate
    changes.
    """

    __slots__ = ("rate", "capacity", "tokens", "last_refill", "burst_seconds",
                 "_fixed_capacity", "lock", "cond")

    def __init__(self, rate: float, capacity: float | None = None, *,
                 burst_seconds: float = DEFAULT_BURST_SECONDS, now: int | None = None):
        if rate < 0:
            raise ValueError("rate must be >= 0")
        if capacity is not None and capacity <= 0:
            raise ValueError("capacity must be > 0")
        if burst_seconds <= 0:
            raise ValueError("burst_seconds must be > 0")
        self.rate = float(rate)
        self.burst_seconds = burst_seconds
        self._fixed_capacity = capacity
        self.capacity = float(capacity) if capacity is not None else capacity_for(rate, burst_seconds)
        self.tokens = self.capacity
        self.last_refill = time.monotonic_ns() if now is None else now
        # holders of ``lock`` may call the underscored helpers directly
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)

    def _refill(self, now: int) -> None:
        # caller holds self.cond
        elapsed = now - self.last_refill
        if elapsed > 0:
            tokens = self.tokens + self.rate * elapsed / NS_PER_S
            self.tokens = tokens if tokens < self.capacity else self.capacity
            self.last_refill = now
        else:
            assert elapsed == 0, "non-monotonic clock passed to token bucket"

    def _take(self, cost: float, now: int) -> float:
        # caller holds self.cond; returns 0.0 on grant, otherwise wait seconds
        if cost > self.capacity:
            raise BurstExceedsCapacity(
                f"burst exceeds capacity: cost {cost} > capacity {self.capacity}")
        self._refill(now)
        if self.tokens >= cost:
            self.tokens -= cost
            return 0.0
        if self.rate <= 0.0:
            return BLOCKED
        return (cost - self.tokens) / self.rate

    def try_consume(self, cost: float, now: int | None = None) -> float:
        if cost <= 0:
            raise ValueError("cost must be > 0")
        with self.cond:
            if now is None:
                now = time.monotonic_ns()
            elif now < self.last_refill:
                raise AssertionError("non-monotonic clock passed to token bucket")
            return self._take(cost, now)

    def consume(self, cost: float, timeout: float | None = None) -> bool:
        """Block until ``cost`` tokens are granted. Returns False on timeout."""
        if cost <= 0:
            raise ValueError("cost must be > 0")
        deadline = None if timeout is None else time.monotonic() + timeout
        with self.cond:
            while True:
                wait = self._take(cost, time.monotonic_ns())
                if wait == 0.0:
                    return True
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return False
                    wait = min(wait, remaining)
                self.cond.wait(None if wait == BLOCKED else wait)

    def set_rate(self, new_rate: float, now: int | None = None) -> None:
        """Change the rate; tokens accrued so far are kept (clamped to the new capacity)."""
        if new_rate < 0 or math.isnan(new_rate):
            raise ValueError("rate must be >= 0")
        with self.cond:
            if now is None:
                now = time.monotonic_ns()
            elif now < self.last_refill:
                raise AssertionError("non-monotonic clock passed to token bucket")
            self._refill(now)
            self.rate = float(new_rate)
            if self._fixed_capacity is None:
                self.capacity = capacity_for(self.rate, self.burst_seconds)
            if self.tokens > self.capacity:
                self.tokens = self.capacity
            self.cond.notify_all()

    def wait_hint(self, cost: float, now: int | None = None) -> float:
        """Seconds until ``cost`` tokens are available, without consuming anything."""
        with self.cond:
            self._refill(time.monotonic_ns() if now is None else now)
            if self.tokens >= cost:
                return 0.0
            if self.rate <= 0.0:
                return BLOCKED
            return (cost - self.tokens) / self.rate
