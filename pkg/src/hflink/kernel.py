"""Deterministic discrete-event simulation kernel.

Simulated time is an integer count of microseconds since the start of the
run, which keeps event ordering exact (no floating-point drift) over well
beyond 10^6 simulated seconds.  Events fire in (fire_at, seq) order where
seq is the insertion counter, so two runs that schedule the same events in
the same order dispatch them identically.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

US_PER_S = 1_000_000


def us(seconds: float) -> int:
    """Convert seconds to integer microseconds, rounding to nearest."""
    return round(seconds * US_PER_S)


def seconds(t_us: int) -> float:
    return t_us / US_PER_S


class SchedulingError(RuntimeError):
    """An event was scheduled before the current simulation time."""


class RngStream:
    """Named pseudo-random stream derived from the master seed.

    The same (master_seed, stream_id) pair always reproduces the same draw
    sequence; distinct stream ids give statistically independent streams.
    Stream ids are hashed with SHA-256 so the derivation does not depend on
    process-level hash randomization.
    """

    def __init__(self, master_seed: int, stream_id: str):
        self.stream_id = stream_id
        digest = hashlib.sha256(f"{master_seed}/{stream_id}".encode()).digest()
        entropy = int.from_bytes(digest[:16], "little")
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def random(self) -> float:
        return float(self.gen.random())

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return int(self.gen.integers(low, high))

    def __repr__(self):
        return f"RngStream({self.stream_id!r})"


@dataclass
class Event:
    fire_at: int
    seq: int
    target: str
    fn: Callable[[], None]
    payload: Any = None
    cancelled: bool = field(default=False, compare=False)


class Simulator:
    """Single-threaded event loop with a monotone integer-microsecond clock.

    One Simulator instance is one isolated run: no state is shared between
    instances, so independent runs (seed or SNR sweep points) may execute in
    parallel processes.
    """

    def __init__(self, master_seed: int, keep_log: bool = True):
        self.master_seed = master_seed
        self._now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._streams: dict[str, RngStream] = {}
        self.keep_log = keep_log
        self.event_log: list[tuple[int, int, str]] = []
        self.dispatched = 0

    def now(self) -> int:
        return self._now

    def rng(self, stream_id: str) -> RngStream:
        """Return the named stream, creating it on first use."""
        stream = self._streams.get(stream_id)
        if stream is None:
            stream = RngStream(self.master_seed, stream_id)
            self._streams[stream_id] = stream
        return stream

    def schedule(self, fire_at: int, target: str, fn: Callable[[], None], payload: Any = None) -> Event:
        """Schedule fn to run at absolute time fire_at; returns a cancellable handle."""
        if fire_at < self._now:
            raise SchedulingError(
                f"event {target!r} scheduled at {fire_at} us, before current time {self._now} us"
            )
        ev = Event(fire_at, self._seq, target, fn, payload)
        self._seq += 1
        heapq.heappush(self._heap, (fire_at, ev.seq, ev))
        return ev

    def schedule_in(self, delay_us: int, target: str, fn: Callable[[], None], payload: Any = None) -> Event:
        return self.schedule(self._now + delay_us, target, fn, payload)

    def cancel(self, ev: Event) -> None:
        """Mark an event cancelled; it will be skipped when popped."""
        ev.cancelled = True

    def run_until(self, t_end: int) -> int:
        """Dispatch every event with fire_at <= t_end in (fire_at, seq) order.

        Returns the number of events dispatched.  The clock ends at t_end
        even if the queue empties early (or never held anything).
        """
        if t_end < self._now:
            raise SchedulingError(f"run_until({t_end}) is before current time {self._now}")
        count = 0
        while self._heap and self._heap[0][0] <= t_end:
            fire_at, seq, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self._now = fire_at
            if self.keep_log:
                self.event_log.append((fire_at, seq, ev.target))
            ev.fn()
            count += 1
        self._now = t_end
        self.dispatched += count
        return count

    def queue_empty(self) -> bool:
        return not any(not ev.cancelled for _, _, ev in self._heap)
