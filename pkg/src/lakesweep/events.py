"""Totally ordered, thread-safe event log used for auditing and metrics."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator


@dataclass(frozen=True)
class Event:
    seq: int
    t: float  # seconds, from the log's clock
    kind: str
    fields: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.fields[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.fields.get(key, default)


class EventLog:
    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self._clock = clock
        self._lock = threading.Lock()
        self._events: list[Event] = []

    def emit(self, kind: str, **fields: Any) -> Event:
        with self._lock:
            ev = Event(len(self._events), self._clock(), kind, fields)
            self._events.append(ev)
        return ev

    def __len__(self) -> int:
        return len(self._events)

    def __bool__(self) -> bool:
        # an empty log is still a log; ``events or NullLog()`` must keep it
        return True

    def __iter__(self) -> Iterator[Event]:
        with self._lock:
            return iter(list(self._events))

    def select(self, kind: str | None = None, **match: Any) -> list[Event]:
        out = []
        for ev in self:
            if kind is not None and ev.kind != kind:
                continue
            if all(ev.fields.get(k) == v for k, v in match.items()):
                out.append(ev)
        return out

    def first(self, kind: str, **match: Any) -> Event | None:
        found = self.select(kind, **match)
        return found[0] if found else None

    def last(self, kind: str, **match: Any) -> Event | None:
        found = self.select(kind, **match)
        return found[-1] if found else None

    def as_tuples(self, with_time: bool = True) -> list[tuple]:
        rows = []
        for ev in self:
            key = tuple(sorted((k, repr(v)) for k, v in ev.fields.items()))
            rows.append((ev.seq, ev.t, ev.kind, key) if with_time else (ev.seq, ev.kind, key))
        return rows


class NullLog(EventLog):
    """Drop-in log that records nothing."""

    def emit(self, kind: str, **fields: Any) -> Event:
        return Event(-1, 0.0, kind, fields)
