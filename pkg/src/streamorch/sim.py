"""Discrete-event scheduler with a simulated (or wall) millisecond clock.

The scheduler only advances time when nothing is runnable at the current
instant. Events at the same instant run in (priority, insertion) order;
passing ``rng`` shuffles equal-time, equal-priority events instead, which the
tests use to explore interleavings.
"""

from __future__ import annotations

import heapq
import itertools
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

NORMAL = 0
# Timeouts fire after every other event scheduled for the same instant.
LATE = 10


class SimClock:
    mode = "sim"

    def __init__(self, start: int = 0) -> None:
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            return self._now

    def advance_to(self, t: int) -> None:
        with self._lock:
            if t < self._now:
                raise ValueError(f"clock cannot run backwards ({t} < {self._now})")
            self._now = t


class WallClock:
    """Milliseconds elapsed since construction; advancing means sleeping."""

    mode = "wall"

    def __init__(self) -> None:
        self._t0 = time.monotonic()

    def now(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def advance_to(self, t: int) -> None:
        delay = t - self.now()
        if delay > 0:
            time.sleep(delay / 1000)


@dataclass(order=True)
class _Event:
    when: int
    priority: int
    tiebreak: float
    seq: int
    fn: Callable[[], None] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)


class Handle:
    __slots__ = ("_event",)

    def __init__(self, event: _Event) -> None:
        self._event = event

    @property
    def when(self) -> int:
        return self._event.when

    def cancel(self) -> None:
        self._event.cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._event.cancelled


class Scheduler:
    def __init__(self, clock=None, rng: Optional[random.Random] = None) -> None:
        self.clock = clock if clock is not None else SimClock()
        self.rng = rng
        self._queue: list[_Event] = []
        self._counter = itertools.count()

    def now(self) -> int:
        return self.clock.now()

    def call_at(self, when: int, fn: Callable[[], None], *, priority: int = NORMAL) -> Handle:
        when = max(int(when), self.now())
        tiebreak = self.rng.random() if self.rng is not None else 0.0
        ev = _Event(when, priority, tiebreak, next(self._counter), fn)
        heapq.heappush(self._queue, ev)
        return Handle(ev)

    def call_later(self, delay: int, fn: Callable[[], None], *, priority: int = NORMAL) -> Handle:
        return self.call_at(self.now() + int(delay), fn, priority=priority)

    def call_soon(self, fn: Callable[[], None]) -> Handle:
        return self.call_at(self.now(), fn)

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def step(self) -> bool:
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            if ev.when > self.now():
                self.clock.advance_to(ev.when)
            ev.fn()
            return True
        return False

    def run(self, until: Optional[Callable[[], bool]] = None, max_steps: int = 10_000_000) -> int:
        """Run events until the queue drains or ``until()`` turns true."""
        steps = 0
        while steps < max_steps:
            if until is not None and until():
                break
            if not self.step():
                break
            steps += 1
        else:
            raise RuntimeError("scheduler step limit exceeded")
        return steps
