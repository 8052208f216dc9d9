"""Deterministic event queue and per-channel FIFO message network."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Hashable


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Min-heap ordered by ``(time, seq)``; ``seq`` is the insertion counter."""

    def __init__(self) -> None:
        self._heap: list[Event] = []
        self._seq = itertools.count()
        self.now = 0.0

    def push(self, time: float, kind: str, payload: Any = None) -> Event:
        if time < self.now:
            raise ValueError(f"cannot schedule {kind} at {time} before now={self.now}")
        ev = Event(time, next(self._seq), kind, payload)
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        return ev

    def peek_time(self) -> float | None:
        return self._heap[0].time if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


class Network:
    """Point-to-point links with latency; each (src, dst) channel stays FIFO.

    Delivery is scheduled on ``queue`` as ``"deliver"`` events whose payload is
    ``(src, dst, message)``. Arrival order at a destination is the order its
    inbox processes messages.
    """

    def __init__(self, queue: EventQueue, latency: float = 0.0) -> None:
        self.queue = queue
        self.latency = latency
        self._last: dict[tuple[Hashable, Hashable], float] = {}
        self.sent = 0

    def send(self, src: Hashable, dst: Hashable, message: Any, delay: float | None = None) -> float:
        t = self.queue.now + (self.latency if delay is None else delay)
        t = max(t, self._last.get((src, dst), t))
        self._last[(src, dst)] = t
        self.queue.push(t, "deliver", (src, dst, message))
        self.sent += 1
        return t
