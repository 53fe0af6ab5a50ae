import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Type

from helper import US_PER_S, watts_to_mw
from sim_engine import Event, EventHandle, EventKind, SimTime, Simulator

logger = logging.getLogger(__name__)


class LedgerError(RuntimeError):
    """Corrupted ledger usage: time regression, double finalize, forbidden transition."""


class TraceError(ValueError):
    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (record {index})")
        self.index = index


class RadioUnavailableError(RuntimeError):
    """Radio activity requested on a switched-off base station."""


class UePhyState(str, Enum):
    IDLE = "IDLE"
    RX_CTRL = "RX_CTRL"
    RX_DATA = "RX_DATA"
    TX = "TX"


class BsPhyState(str, Enum):
    IDLE = "IDLE"
    RX_CTRL = "RX_CTRL"
    RX_DATA = "RX_DATA"
    TX = "TX"
    DEEP_SLEEP = "DEEP_SLEEP"
    OFF = "OFF"


@dataclass(frozen=True, order=True)
class NodeId:
    kind: str  # "bs" | "ue"
    index: int

    def __str__(self):
        return f"{self.kind}{self.index}"

    @property
    def is_bs(self) -> bool:
        return self.kind == "bs"


def bs_node(index: int) -> NodeId:
    return NodeId("bs", index)


def ue_node(index: int) -> NodeId:
    return NodeId("ue", index)


@dataclass(frozen=True)
class PowerProfile:
    """Per-state power draw of a node class, stored as integer milliwatts."""

    state_type: Type[Enum]
    milliwatts: Mapping[Enum, int]
    deep_sleep_threshold_us: Optional[SimTime] = None

    def __post_init__(self):
        missing = [s for s in self.state_type if s not in self.milliwatts]
        if missing:
            raise ValueError(f"Power profile missing states: {[s.value for s in missing]}")
        for state, mw in self.milliwatts.items():
            if mw < 0:
                raise ValueError(f"Negative power for {state.value}: {mw} mW")
        if self.deep_sleep_threshold_us is not None and self.deep_sleep_threshold_us <= 0:
            raise ValueError("deep_sleep_threshold must be > 0")

    @classmethod
    def from_watts(cls, state_type, watts: Mapping[str, float], deep_sleep_threshold_us=None):
        mw = {}
        for name, value in watts.items():
            try:
                state = state_type(str(name).upper())
            except ValueError:
                raise ValueError(f"Unknown {state_type.__name__} state: {name!r}") from None
            mw[state] = watts_to_mw(value)
        return cls(state_type=state_type, milliwatts=mw, deep_sleep_threshold_us=deep_sleep_threshold_us)

    def coerce(self, state) -> Enum:
        value = state.value if isinstance(state, Enum) else str(state)
        return self.state_type(value)

    def power_mw(self, state) -> int:
        return self.milliwatts[self.coerce(state)]


def default_ue_profile() -> PowerProfile:
    return PowerProfile.from_watts(
        UePhyState, {"IDLE": 0.045, "RX_CTRL": 0.175, "RX_DATA": 0.350, "TX": 0.350}
    )


def default_bs_profile(deep_sleep_threshold_us: SimTime = US_PER_S) -> PowerProfile:
    return PowerProfile.from_watts(
        BsPhyState,
        {"RX_CTRL": 138.9, "RX_DATA": 138.9, "TX": 742.2, "IDLE": 86.3, "DEEP_SLEEP": 6.2, "OFF": 0},
        deep_sleep_threshold_us=deep_sleep_threshold_us,
    )


@dataclass(frozen=True)
class StateChangeRecord:
    at: SimTime
    from_state: Enum
    to_state: Enum


@dataclass
class EnergyLedger:
    """
    Dwell time and energy per PHY state of one node.

    Energy is kept in nanojoules (mW x us), so energy[s] == P[s] * dwell[s] holds exactly.
    """

    node: NodeId
    profile: PowerProfile
    birth: SimTime
    current_state: Enum
    state_entered_at: SimTime
    dwell_us: Dict[Enum, int] = field(default_factory=dict)
    energy_nj: Dict[Enum, int] = field(default_factory=dict)
    trace: List[StateChangeRecord] = field(default_factory=list)
    initial_state: Optional[Enum] = None
    finalized_at: Optional[SimTime] = None

    def __post_init__(self):
        if self.initial_state is None:
            self.initial_state = self.current_state
        for state in self.profile.state_type:
            self.dwell_us.setdefault(state, 0)
            self.energy_nj.setdefault(state, 0)

    def _close(self, at: SimTime) -> None:
        dt = at - self.state_entered_at
        self.dwell_us[self.current_state] += dt
        self.energy_nj[self.current_state] += self.profile.milliwatts[self.current_state] * dt
        self.state_entered_at = at

    @property
    def total_energy_nj(self) -> int:
        return sum(self.energy_nj.values())

    @property
    def total_dwell_us(self) -> int:
        return sum(self.dwell_us.values())

    @property
    def finalized(self) -> bool:
        return self.finalized_at is not None


def recompute_from_trace(
    trace: Sequence[StateChangeRecord],
    profile: PowerProfile,
    end: SimTime,
    initial_state=None,
    birth: SimTime = 0,
) -> int:
    """
    Independent oracle for E = sum(P_s * t_s): sums intervals straight from the trace.

    Returns the total in nanojoules. Raises TraceError naming the offending record.
    """
    state = profile.coerce(initial_state) if initial_state is not None else profile.state_type("IDLE")
    t = birth
    total = 0
    for i, rec in enumerate(trace):
        if rec.at < t:
            raise TraceError(f"time regression: {rec.at} < {t}", i)
        if profile.coerce(rec.from_state) != state:
            raise TraceError(f"from_state {rec.from_state.value} does not follow {state.value}", i)
        total += profile.milliwatts[state] * (rec.at - t)
        state = profile.coerce(rec.to_state)
        t = rec.at
    if end < t:
        raise TraceError(f"end {end} precedes last record at {t}", len(trace))
    total += profile.milliwatts[state] * (end - t)
    return total


Segment = Tuple[SimTime, SimTime, object]
Change = Tuple[NodeId, str, int, bool]  # node, state, booking epoch, is release


class PhyRegistry:
    """
    PHY state machines and energy ledgers of every node of a run.

    State changes reach the ledgers through `notify_state_change`, the trace sink. Radio
    work (packet service, handover signaling) is booked with `book`: changes due now are
    applied at once, later ones become PhyTransition events, one per instant for all nodes
    of the booking. A node's bookings form a FIFO timeline. Base stations with a deep-sleep
    threshold drop to DEEP_SLEEP after that long in IDLE unless they are held awake.
    """

    def __init__(self, sim: Simulator):
        self.sim = sim
        self._ledgers: Dict[NodeId, EnergyLedger] = {}
        self._epoch: Dict[NodeId, int] = {}
        self._busy_until: Dict[NodeId, SimTime] = {}
        self._releases: Dict[NodeId, Set[SimTime]] = {}
        self._idle_since: Dict[NodeId, SimTime] = {}
        self._held_until: Dict[NodeId, SimTime] = {}
        self._sleep_timers: Dict[NodeId, EventHandle] = {}
        self._pending_off: Dict[NodeId, Tuple[SimTime, EventHandle]] = {}
        sim.register(EventKind.PHY_TRANSITION, self._on_transition)
        sim.register(EventKind.DEEP_SLEEP_TIMER, self._on_deep_sleep_timer)

    # ---------------------------- nodes ----------------------------

    def add_node(self, node: NodeId, profile: PowerProfile, at: SimTime = 0, initial_state=None) -> EnergyLedger:
        if node in self._ledgers:
            raise ValueError(f"Node {node} already registered")
        state = profile.coerce(initial_state) if initial_state is not None else profile.state_type("IDLE")
        ledger = EnergyLedger(node=node, profile=profile, birth=at, current_state=state, state_entered_at=at)
        self._ledgers[node] = ledger
        self._epoch[node] = 0
        self._busy_until[node] = at
        self._releases[node] = set()
        if state.value == "IDLE":
            self._idle_since[node] = at
            self._arm_sleep_timer(node)
        return ledger

    def ledger(self, node: NodeId) -> EnergyLedger:
        try:
            return self._ledgers[node]
        except KeyError:
            raise KeyError(f"Unknown node {node}") from None

    def nodes(self) -> List[NodeId]:
        return sorted(self._ledgers)

    def state(self, node: NodeId) -> Enum:
        return self.ledger(node).current_state

    def is_off(self, node: NodeId) -> bool:
        return self.ledger(node).current_state.value == "OFF"

    def is_unavailable(self, node: NodeId) -> bool:
        """OFF, or draining towards a commanded switch-off."""
        return self.is_off(node) or node in self._pending_off

    def busy_until(self, node: NodeId) -> SimTime:
        return max(self._busy_until[node], self.sim.now)

    # ---------------------------- trace sink ----------------------------

    def notify_state_change(self, node: NodeId, to, at: SimTime) -> None:
        self._transition(node, to, at, commanded=False)

    def _transition(self, node: NodeId, to, at: SimTime, commanded: bool) -> None:
        ledger = self.ledger(node)
        if ledger.finalized:
            raise LedgerError(f"{node} already finalized at {ledger.finalized_at}")
        if at < ledger.state_entered_at:
            raise LedgerError(f"{node}: state change at {at} precedes {ledger.state_entered_at}")
        to = ledger.profile.coerce(to)
        current = ledger.current_state
        if to.value == "OFF" and current.value != "OFF" and not commanded:
            raise LedgerError(f"{node}: OFF is only reachable through switch_off")
        if current.value == "OFF" and to.value != "OFF" and not commanded:
            raise RadioUnavailableError(f"{node} is switched off")
        if to.value == "DEEP_SLEEP" and current.value not in ("IDLE", "DEEP_SLEEP"):
            raise LedgerError(f"{node}: DEEP_SLEEP entered from {current.value}")

        ledger._close(at)
        ledger.trace.append(StateChangeRecord(at=at, from_state=current, to_state=to))
        ledger.current_state = to

        if current.value == "IDLE" and to.value != "IDLE":
            self._idle_since.pop(node, None)
        elif to.value == "IDLE" and current.value != "IDLE":
            self._idle_since[node] = at
            self._arm_sleep_timer(node)

    # ---------------------------- deep sleep ----------------------------

    def _sleep_due(self, node: NodeId) -> Optional[SimTime]:
        threshold = self.ledger(node).profile.deep_sleep_threshold_us
        if threshold is None or node not in self._idle_since:
            return None
        return max(self._idle_since[node], self._held_until.get(node, 0)) + threshold

    def _arm_sleep_timer(self, node: NodeId) -> None:
        # one timer per node; an early timer is kept and re-armed when it fires
        due = self._sleep_due(node)
        if due is None:
            return
        timer = self._sleep_timers.get(node)
        if timer is not None and timer.pending:
            if timer.event.fire_at <= due:
                return
            self.sim.cancel(timer)
        self._sleep_timers[node] = self.sim.schedule_at(due, EventKind.DEEP_SLEEP_TIMER, node=str(node), _node=node)

    def _on_deep_sleep_timer(self, event: Event) -> None:
        node = event.payload["_node"]
        self._sleep_timers.pop(node, None)
        due = self._sleep_due(node)
        if due is None or self.state(node).value != "IDLE":
            return
        if due <= self.sim.now:
            self.notify_state_change(node, "DEEP_SLEEP", self.sim.now)
        else:
            self._arm_sleep_timer(node)

    def hold_awake(self, node: NodeId, at: SimTime, until: SimTime) -> None:
        """
        Keep a node out of DEEP_SLEEP until `until`, waking it at `at` if it sleeps. The
        usual threshold runs from `until` (or from its last activity, if later).
        """
        if self.is_off(node):
            raise RadioUnavailableError(f"{node} is switched off")
        self._held_until[node] = max(until, self._held_until.get(node, until))
        if self.state(node).value == "DEEP_SLEEP":
            self.notify_state_change(node, "IDLE", at)
        else:
            self._arm_sleep_timer(node)

    # ---------------------------- switching ----------------------------

    def _forget_bookings(self, node: NodeId) -> None:
        self._epoch[node] += 1
        self._releases[node].clear()
        self._held_until.pop(node, None)
        self.sim.cancel(self._sleep_timers.pop(node, None))
        draining = self._pending_off.pop(node, None)
        if draining is not None:
            self.sim.cancel(draining[1])

    def switch_off(self, bs: NodeId, at: SimTime) -> None:
        if self.is_off(bs):
            logger.debug("switch_off(%s) at %s: already OFF", bs, at)
            return
        self._forget_bookings(bs)
        self._transition(bs, "OFF", at, commanded=True)
        self._busy_until[bs] = at

    def drain_switch_off(self, bs: NodeId, at: SimTime) -> SimTime:
        """Switch off now, or when the radio's last reservation ends if it is still busy."""
        if self.is_unavailable(bs):
            logger.debug("switch_off(%s) at %s: already OFF or draining", bs, at)
            return self._pending_off[bs][0] if bs in self._pending_off else at
        drain_at = self._busy_until[bs]
        if drain_at <= at:
            self.switch_off(bs, at)
            return at
        handle = self.sim.schedule_at(drain_at, EventKind.PHY_TRANSITION, node=str(bs), to="OFF", _node=bs)
        self._pending_off[bs] = (drain_at, handle)
        return drain_at

    def switch_on(self, bs: NodeId, at: SimTime) -> None:
        draining = self._pending_off.pop(bs, None)
        if draining is not None:
            self.sim.cancel(draining[1])
            logger.debug("switch_on(%s) at %s: pending switch-off cancelled", bs, at)
            return
        if not self.is_off(bs):
            logger.debug("switch_on(%s) at %s: not OFF, no change", bs, at)
            return
        self._transition(bs, "IDLE", at, commanded=True)
        self._busy_until[bs] = at

    # ---------------------------- radio reservations ----------------------------

    def book(self, bookings: Mapping[NodeId, Iterable[Segment]]) -> SimTime:
        """
        Book consecutive radio segments (start, end, state) on several nodes at once.

        Each node's first segment must start at or after its `busy_until`. A node returns
        to IDLE at the end of its last segment unless another booking follows without a
        gap. Zero-length segments are skipped. Nothing is booked if any node is switched
        off or busy. Returns the latest end.
        """
        plan = []
        for node, segments in bookings.items():
            if self.is_unavailable(node):
                raise RadioUnavailableError(f"{node} is switched off")
            profile = self.ledger(node).profile
            booked = [(s, e, profile.coerce(st)) for s, e, st in segments if e > s]
            if not booked:
                continue
            if booked[0][0] < self.busy_until(node):
                raise LedgerError(
                    f"{node}: reservation at {booked[0][0]} overlaps busy radio until {self.busy_until(node)}"
                )
            plan.append((node, booked))

        now = self.sim.now
        latest = now
        changes: Dict[SimTime, List[Change]] = {}
        for node, booked in plan:
            epoch = self._epoch[node]
            releases = self._releases[node]
            releases.discard(booked[0][0])
            for start, _end, state in booked:
                changes.setdefault(start, []).append((node, state.value, epoch, False))
            end = booked[-1][1]
            changes.setdefault(end, []).append((node, "IDLE", epoch, True))
            releases.add(end)
            self._busy_until[node] = end
            latest = max(latest, end)

        for at in sorted(changes):
            if at == now:
                self._apply(changes[at], at)
            else:
                summary = "|".join(f"{node}:{to}" for node, to, _, _ in changes[at])
                self.sim.schedule_at(at, EventKind.PHY_TRANSITION, changes=summary, _changes=changes[at])
        return latest

    def reserve(self, node: NodeId, segments: Iterable[Segment]) -> SimTime:
        """`book` for a single node; returns the end of its booking."""
        self.book({node: segments})
        return self.busy_until(node)

    def _apply(self, changes: Sequence[Change], at: SimTime) -> None:
        for node, to, epoch, release in changes:
            if epoch != self._epoch[node]:
                continue
            if release:
                releases = self._releases[node]
                if at not in releases:
                    continue
                releases.discard(at)
            self.notify_state_change(node, to, at)

    def _on_transition(self, event: Event) -> None:
        if "_changes" in event.payload:
            self._apply(event.payload["_changes"], self.sim.now)
            return
        self.switch_off(event.payload["_node"], self.sim.now)

    # ---------------------------- finalize ----------------------------

    def finalize(self, node: NodeId, at: SimTime) -> EnergyLedger:
        ledger = self.ledger(node)
        if ledger.finalized:
            raise LedgerError(f"{node} already finalized at {ledger.finalized_at}")
        if at < ledger.state_entered_at:
            raise LedgerError(f"{node}: finalize at {at} precedes last change at {ledger.state_entered_at}")
        ledger._close(at)
        ledger.finalized_at = at
        self._forget_bookings(node)
        return ledger

    def finalize_all(self, at: SimTime) -> Dict[NodeId, EnergyLedger]:
        return {node: self.finalize(node, at) for node in self.nodes() if not self._ledgers[node].finalized}


def energy_of_intervals(profile: PowerProfile, intervals: Iterable[Tuple[object, SimTime]]) -> int:
    """Energy (nJ) of a list of (state, duration_us) pairs under `profile`."""
    return sum(profile.power_mw(state) * duration for state, duration in intervals)
