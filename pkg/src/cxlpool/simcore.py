"""Deterministic discrete-event engine.

Virtual time is in nanoseconds. Events with equal timestamps fire in the order
they were scheduled. All randomness goes through ``Engine.rng`` so that a run
is fully determined by its seed.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import LivelockDetected


class EventKind(enum.Enum):
    CHANNEL_POLL = "ChannelPoll"
    DMA_COMPLETE = "DmaComplete"
    DEVICE_DONE = "DeviceDone"
    HEARTBEAT = "Heartbeat"
    FAILURE_INJECT = "FailureInject"
    TIMER = "Timer"


@dataclass(order=True)
class Event:
    fire_at_ns: float
    seq: int
    actor: str = field(compare=False)
    kind: EventKind = field(compare=False)
    action: Callable[[], Any] | None = field(compare=False, default=None)
    detail: Any = field(compare=False, default=None)
    cancelled: bool = field(compare=False, default=False)


@dataclass(frozen=True)
class TraceRecord:
    time_ns: float
    actor: str
    kind: str
    detail: Any

    def to_json(self) -> str:
        return json.dumps(
            {"t": self.time_ns, "actor": self.actor, "kind": self.kind, "detail": self.detail},
            sort_keys=True, default=str,
        )


class TraceLog:
    def __init__(self):
        self.records: list[TraceRecord] = []

    def append(self, time_ns, actor, kind, detail=None):
        if self.records and time_ns < self.records[-1].time_ns:
            raise AssertionError("trace time went backwards")
        self.records.append(TraceRecord(time_ns, actor, kind, detail))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_kind(self, kind):
        return [r for r in self.records if r.kind == kind]

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json().encode())
            h.update(b"\n")
        return h.hexdigest()

    def dump(self, path):
        with open(path, "w") as f:
            for r in self.records:
                f.write(r.to_json() + "\n")


class Engine:
    """Event queue plus clock, seeded RNG and trace log."""

    def __init__(self, seed: int = 0, max_events: int = 50_000_000, trace: bool = True):
        self.now = 0.0
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.max_events = max_events
        self.trace = TraceLog()
        self._trace_on = trace
        self._queue: list[Event] = []
        self._seq = 0
        self.processed = 0

    def schedule(self, delay_ns: float, action: Callable[[], Any] | None = None, *,
                 actor: str = "engine", kind: EventKind = EventKind.TIMER, detail=None) -> Event:
        if delay_ns < 0:
            raise ValueError(f"negative delay {delay_ns}")
        return self.schedule_at(self.now + delay_ns, action, actor=actor, kind=kind, detail=detail)

    def schedule_at(self, time_ns: float, action=None, *, actor="engine",
                    kind=EventKind.TIMER, detail=None) -> Event:
        if time_ns < self.now:
            raise ValueError(f"cannot schedule in the past ({time_ns} < {self.now})")
        ev = Event(time_ns, self._seq, actor, kind, action, detail)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def cancel(self, event: Event):
        event.cancelled = True

    def log(self, actor: str, kind: str, detail=None):
        if self._trace_on:
            self.trace.append(self.now, actor, kind, detail)

    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def step(self) -> bool:
        """Fire the next live event. Returns False when the queue is empty."""
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.processed += 1
            if self.processed > self.max_events:
                raise LivelockDetected(
                    f"more than {self.max_events} events processed (now={self.now})")
            self.now = ev.fire_at_ns
            if ev.action is not None:
                ev.action()
            return True
        return False

    def run_until(self, t_ns: float | None = None) -> float:
        """Run to quiescence, or until the clock would pass ``t_ns``."""
        while self._queue:
            head = self._queue[0]
            if head.cancelled:
                heapq.heappop(self._queue)
                continue
            if t_ns is not None and head.fire_at_ns > t_ns:
                break
            self.step()
        if t_ns is not None and t_ns > self.now:
            self.now = t_ns
        return self.now


class Poller:
    """Periodic poll loop owned by one simulated actor.

    Polls are issued on a fixed grid ``phase + k * interval``; several loads may
    be in flight at once, so a poll does not delay the next tick. A zero
    interval means the actor spins and sees data the instant it lands.

    Polls that would find nothing have no side effects, so they are elided:
    an idle poller sleeps until :meth:`kick` reports a write to the memory it
    watches, then wakes at the first grid tick at or after that write. The
    observable timing is identical to polling every tick.

    ``on_tick`` returns a truthy value when the poll found work.
    """

    def __init__(self, engine: Engine, actor: str, interval_ns: float, on_tick: Callable[[], Any],
                 phase_ns: float = 0.0):
        self.engine = engine
        self.actor = actor
        self.interval = interval_ns
        self.phase = phase_ns
        self.on_tick = on_tick
        self._armed: Event | None = None
        self.running = False
        self.ticks = 0

    def next_tick(self, t: float) -> float:
        if self.interval == 0:
            return t
        k = -(-(t - self.phase) // self.interval)
        return self.phase + max(k, 0) * self.interval

    def start(self):
        self.running = True
        self.kick()

    def stop(self):
        self.running = False
        if self._armed is not None:
            self.engine.cancel(self._armed)
            self._armed = None

    def kick(self):
        """Report that watched memory may have changed at the current time."""
        if self.running and self._armed is None:
            self._arm(self.next_tick(self.engine.now))

    def _arm(self, t):
        self._armed = self.engine.schedule_at(t, self._fire, actor=self.actor,
                                              kind=EventKind.CHANNEL_POLL)

    def _fire(self):
        self._armed = None
        if not self.running:
            return
        self.ticks += 1
        busy = self.on_tick()
        if busy and self.running and self._armed is None:
            # more may be queued behind what we just took
            self._arm(self.engine.now + self.interval)
