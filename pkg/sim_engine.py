import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

# Simulation time is an integer count of microseconds everywhere.
SimTime = int


class SchedulingError(ValueError):
    """Raised for events scheduled in the past, re-used events or a re-entrant run."""


class SimulationError(RuntimeError):
    """An event handler failed; carries the event context of the failure."""

    def __init__(self, message: str, t_us: int, kind: "EventKind", seq: int):
        super().__init__(f"{message} (t_us={t_us}, kind={kind.value}, seq={seq})")
        self.t_us = t_us
        self.kind = kind
        self.seq = seq


class EventKind(str, Enum):
    PACKET_ARRIVAL = "PacketArrival"
    POLICY_TICK = "PolicyTick"
    MOBILITY_STEP = "MobilityStep"
    DEEP_SLEEP_TIMER = "DeepSleepTimer"
    OFF_WINDOW_START = "OffWindowStart"
    OFF_WINDOW_END = "OffWindowEnd"
    FLOW_START = "FlowStart"
    FLOW_STOP = "FlowStop"
    SIM_END = "SimEnd"
    PHY_TRANSITION = "PhyTransition"
    HANDOVER_COMPLETE = "HandoverComplete"


@dataclass
class Event:
    fire_at: SimTime
    kind: EventKind
    payload: Dict[str, Any] = field(default_factory=dict)
    seq: int = -1

    def summary(self) -> str:
        parts = []
        for key in sorted(self.payload):
            if key.startswith("_"):
                continue
            value = self.payload[key]
            if isinstance(value, Enum):
                value = value.value
            parts.append(f"{key}={value}")
        return ";".join(parts)


class EventHandle:
    """Cancellation token returned by `Simulator.schedule`."""

    __slots__ = ("event", "cancelled", "fired")

    def __init__(self, event: Event):
        self.event = event
        self.cancelled = False
        self.fired = False

    @property
    def pending(self) -> bool:
        return not (self.cancelled or self.fired)


class RandomSource:
    """
    Seeded random stream for one concern of a run.

    Uses numpy's PCG64 bit generator. Independent streams are derived from one root seed
    through `SeedSequence(seed, spawn_key=...)`, so the draws of one concern (mobility of
    UE 3, say) never depend on how many draws another concern made.
    """

    STREAMS = {"topology": 0, "mobility": 1, "traffic": 2, "policy": 3}

    def __init__(self, seed: int, spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    @property
    def algorithm(self) -> str:
        return "PCG64"

    def split(self, concern: str, *key: int) -> "RandomSource":
        if concern not in self.STREAMS:
            raise ValueError(f"Unknown random stream concern: {concern!r}")
        return RandomSource(self.seed, self.spawn_key + (self.STREAMS[concern],) + tuple(key))

    def uniform(self, low: float, high: float) -> float:
        return float(self._generator.uniform(low, high))

    def integers(self, low: int, high: int) -> int:
        """Integer in [low, high)."""
        return int(self._generator.integers(low, high))


class Simulator:
    """
    Deterministic discrete-event kernel.

    Events are dispatched in (fire_at, seq) order, seq being the insertion counter, so two
    events at the same instant fire in the order they were scheduled. Handlers are
    registered per event kind.
    """

    def __init__(self, record_log: bool = False):
        self.now: SimTime = 0
        self._queue: List[tuple] = []
        self._seq = 0
        self._running = False
        self._handlers: Dict[EventKind, Callable[[Event], None]] = {}
        self.record_log = record_log
        self.event_log: List[str] = []
        self.dispatched = 0

    def register(self, kind: EventKind, handler: Callable[[Event], None]) -> None:
        self._handlers[kind] = handler

    def schedule(self, event: Event) -> EventHandle:
        if event.seq >= 0:
            raise SchedulingError(f"Event already scheduled (seq={event.seq})")
        if event.fire_at < self.now:
            raise SchedulingError(
                f"Cannot schedule {event.kind.value} at t_us={event.fire_at}; clock is at {self.now}"
            )
        event.seq = self._seq
        self._seq += 1
        handle = EventHandle(event)
        heapq.heappush(self._queue, (event.fire_at, event.seq, handle))
        return handle

    def schedule_at(self, fire_at: SimTime, kind: EventKind, **payload) -> EventHandle:
        return self.schedule(Event(fire_at=fire_at, kind=kind, payload=payload))

    def cancel(self, handle: Optional[EventHandle]) -> bool:
        if handle is None or not handle.pending:
            return False
        handle.cancelled = True
        return True

    def run_until(self, end: SimTime) -> int:
        if self._running:
            raise SchedulingError("Simulator is already running")
        if end < self.now:
            raise SchedulingError(f"run_until({end}) is before the clock ({self.now})")
        self._running = True
        count = 0
        try:
            while self._queue and self._queue[0][0] <= end:
                fire_at, seq, handle = heapq.heappop(self._queue)
                if handle.cancelled:
                    continue
                self.now = fire_at
                handle.fired = True
                event = handle.event
                if self.record_log:
                    self.event_log.append(f"{fire_at},{event.kind.value},{event.summary()}")
                handler = self._handlers.get(event.kind)
                if handler is not None:
                    try:
                        handler(event)
                    except Exception as exc:
                        logger.error("Handler for %s failed at t_us=%s", event.kind.value, fire_at)
                        raise SimulationError(str(exc) or type(exc).__name__, fire_at, event.kind, seq) from exc
                count += 1
            self.now = end
        finally:
            self._running = False
        self.dispatched += count
        return count
