import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

from helper import US_PER_S
from phy_energy import BsPhyState, PhyRegistry, UePhyState, bs_node, ue_node
from sim_engine import Event, EventHandle, EventKind, RandomSource, SimTime, Simulator
from topology import MobilityTracker, Position, nearest_bs
from traffic import TrafficManager

logger = logging.getLogger(__name__)


class PolicyError(RuntimeError):
    """The switching policy produced an inconsistent association."""


class PolicyKind(str, Enum):
    ALWAYS_ON = "always_on"
    RANDOM_OFF = "random_off"
    UE_AWARE = "ue_aware"
    UE_DATA_AWARE = "ue_data_aware"


# ---------------------------- connection registry ----------------------------

class ConnectionTable:
    """
    BS -> connected UEs and UE -> serving BS, kept mutually consistent.

    Also integrates the number of connected UEs over time per BS for the time-weighted
    average reported at the end of a run.
    """

    def __init__(self, bs_ids: Iterable[int], ue_ids: Iterable[int], at: SimTime = 0):
        self.start = at
        self._members: Dict[int, Set[int]] = {b: set() for b in bs_ids}
        self._serving: Dict[int, Optional[int]] = {u: None for u in ue_ids}
        self._area: Dict[int, int] = {b: 0 for b in self._members}
        self._last_change: Dict[int, SimTime] = {b: at for b in self._members}

    def _account(self, bs: int, at: SimTime) -> None:
        self._area[bs] += len(self._members[bs]) * (at - self._last_change[bs])
        self._last_change[bs] = at

    def connect(self, ue: int, bs: int, at: SimTime) -> Optional[int]:
        if bs not in self._members:
            raise PolicyError(f"Unknown bs{bs}")
        previous = self.disconnect(ue, at)
        self._account(bs, at)
        self._members[bs].add(ue)
        self._serving[ue] = bs
        return previous

    def disconnect(self, ue: int, at: SimTime) -> Optional[int]:
        if ue not in self._serving:
            raise PolicyError(f"Unknown ue{ue}")
        previous = self._serving[ue]
        if previous is not None:
            self._account(previous, at)
            self._members[previous].discard(ue)
            self._serving[ue] = None
        return previous

    def serving_bs(self, ue: int) -> Optional[int]:
        return self._serving[ue]

    def ues_of(self, bs: int) -> List[int]:
        return sorted(self._members[bs])

    def bs_ids(self) -> List[int]:
        return sorted(self._members)

    def ue_ids(self) -> List[int]:
        return sorted(self._serving)

    def check_consistency(self) -> None:
        for bs, ues in self._members.items():
            for ue in ues:
                if self._serving.get(ue) != bs:
                    raise PolicyError(f"ue{ue} listed under bs{bs} but served by {self._serving.get(ue)}")
        for ue, bs in self._serving.items():
            if bs is not None and ue not in self._members[bs]:
                raise PolicyError(f"ue{ue} served by bs{bs} but missing from its member set")

    def avg_connected(self, bs: int, end: SimTime) -> float:
        span = end - self.start
        if span <= 0:
            return float(len(self._members[bs]))
        area = self._area[bs] + len(self._members[bs]) * (end - self._last_change[bs])
        return area / span


# ---------------------------- commands ----------------------------

@dataclass(frozen=True)
class SwitchOff:
    bs: int

    def describe(self) -> Tuple[str, str]:
        return "SwitchOff", f"bs={self.bs}"


@dataclass(frozen=True)
class SwitchOn:
    bs: int

    def describe(self) -> Tuple[str, str]:
        return "SwitchOn", f"bs={self.bs}"


@dataclass(frozen=True)
class Handover:
    ue: int
    from_bs: Optional[int]
    to_bs: int

    def describe(self) -> Tuple[str, str]:
        src = "-" if self.from_bs is None else self.from_bs
        return "Handover", f"ue={self.ue};from={src};to={self.to_bs}"


@dataclass(frozen=True)
class Bar:
    """Keep UEs away from `bs` until `until` without switching it off."""

    bs: int
    until: SimTime

    def describe(self) -> Tuple[str, str]:
        return "Bar", f"bs={self.bs}"


@dataclass(frozen=True)
class Unbar:
    bs: int

    def describe(self) -> Tuple[str, str]:
        return "Unbar", f"bs={self.bs}"


PolicyCommand = Union[SwitchOff, SwitchOn, Bar, Unbar, Handover]


@dataclass(frozen=True)
class RandomOffSchedule:
    """Per-BS barring window [X, X + length) with X a whole number of seconds."""

    off_start_s: Dict[int, int]
    length_s: int = 2

    @classmethod
    def draw(cls, bs_ids: Iterable[int], rng: RandomSource, upper_exclusive: int = 9, length_s: int = 2):
        return cls(off_start_s={b: rng.integers(0, upper_exclusive) for b in sorted(bs_ids)}, length_s=length_s)

    def window_us(self, bs: int) -> Tuple[SimTime, SimTime]:
        start = self.off_start_s[bs] * US_PER_S
        return start, start + self.length_s * US_PER_S


@dataclass
class HandoverStats:
    count: int = 0
    bs_signaling_nj: int = 0
    bs_signaling_us: int = 0
    ue_signaling_nj: int = 0
    per_ue: Dict[int, int] = field(default_factory=dict)


# ---------------------------- SmartMME ----------------------------

class SmartMME:
    """
    Mobility management entity hosted at the LTE anchor.

    Keeps the connection table (fed by connection callbacks), evaluates the switching
    policy on every tick and applies the resulting commands synchronously.
    """

    def __init__(
        self,
        sim: Simulator,
        phy: PhyRegistry,
        traffic: TrafficManager,
        mobility: MobilityTracker,
        bs_positions: Dict[int, Position],
        ue_ids: Iterable[int],
        policy: PolicyKind,
        idle_off_us: SimTime = US_PER_S,
        tick_us: SimTime = 100_000,
        ho_ctrl_us: SimTime = 5_000,
    ):
        self.sim = sim
        self.phy = phy
        self.traffic = traffic
        self.mobility = mobility
        self.bs_positions = dict(bs_positions)
        self.policy = PolicyKind(policy)
        self.idle_off_us = idle_off_us
        self.tick_us = tick_us
        self.ho_ctrl_us = ho_ctrl_us
        self.table = ConnectionTable(self.bs_positions, ue_ids, at=sim.now)
        self.stats = HandoverStats(per_ue={u: 0 for u in self.table.ue_ids()})
        self.decision_log: List[str] = []
        self.random_schedule: Optional[RandomOffSchedule] = None
        self._in_flight: Dict[int, Tuple[int, EventHandle]] = {}
        self._barred: Dict[int, SimTime] = {}
        traffic.mme = self
        sim.register(EventKind.POLICY_TICK, self._on_tick)
        sim.register(EventKind.OFF_WINDOW_START, self._on_window_start)
        sim.register(EventKind.OFF_WINDOW_END, self._on_window_end)
        sim.register(EventKind.HANDOVER_COMPLETE, self._on_handover_complete)

    # ---------------------------- callbacks ----------------------------

    def on_connection_established(self, ue: int, bs: int, at: SimTime) -> None:
        if self.phy.is_unavailable(bs_node(bs)):
            raise PolicyError(f"ue{ue} cannot connect to bs{bs}: BS is switched off")
        previous = self.table.connect(ue, bs, at)
        if previous is not None and previous != bs:
            logger.debug("ue%s moved bs%s -> bs%s at t_us=%s", ue, previous, bs, at)

    def report_unreachable(self, bs: int, ue: int, at: SimTime) -> None:
        logger.warning("bs%s unreachable for ue%s at t_us=%s; detaching", bs, ue, at)
        if self.table.serving_bs(ue) == bs:
            self.table.disconnect(ue, at)

    def serving_bs(self, ue: int) -> Optional[int]:
        return self.table.serving_bs(ue)

    def in_handover(self, ue: int) -> bool:
        return ue in self._in_flight

    def connect_initial(self, at: SimTime) -> None:
        """Connect every UE to its nearest ON BS, free of signaling."""
        positions = self.mobility.positions(at)
        available = self._available()
        if not available:
            return
        for ue in self.table.ue_ids():
            target = self._nearest(positions[ue], available)
            self.on_connection_established(ue, target, at)

    # ---------------------------- geometry helpers ----------------------------

    def _available(self) -> List[int]:
        return [
            b for b in sorted(self.bs_positions)
            if b not in self._barred and not self.phy.is_unavailable(bs_node(b))
        ]

    def is_barred(self, bs: int) -> bool:
        return bs in self._barred

    def _nearest(self, pos: Position, candidates: Iterable[int]) -> int:
        return nearest_bs(pos, [(b, self.bs_positions[b]) for b in candidates])

    def _needs_service(self, ue: int, now: SimTime) -> bool:
        return self.traffic.needs_service(ue, now, self.idle_off_us)

    # ---------------------------- policy ----------------------------

    def evaluate(self, now: SimTime) -> List[PolicyCommand]:
        """
        One pass of the switching logic over the connection table.

        (d) switch on an OFF BS that is the nearest BS of a UE (under UeDataAware only a UE
        that needs service counts); (c) hand every UE over to its nearest ON BS; (a) switch
        off a BS left without UEs; (b) under UeDataAware also switch off a BS idle for
        `idle_off_us` whose UEs are all idle. UEs of a BS being switched off are handed to
        their nearest remaining ON BS in the same batch. Barred BSs are never handover targets.
        """
        positions = self.mobility.positions(now)
        all_bs = sorted(self.bs_positions)
        ue_ids = self.table.ue_ids()
        available_now = self._available()
        aware = self.policy in (PolicyKind.UE_AWARE, PolicyKind.UE_DATA_AWARE)

        switch_on: List[int] = []
        if aware:
            for ue in ue_ids:
                if self.policy == PolicyKind.UE_DATA_AWARE and not self._needs_service(ue, now):
                    continue
                nearest = self._nearest(positions[ue], all_bs)
                if self.phy.is_off(bs_node(nearest)) and nearest not in switch_on:
                    switch_on.append(nearest)
        switch_on.sort()
        available = sorted(set(available_now) | set(switch_on))

        projected: Dict[int, Optional[int]] = {}
        handovers: Dict[int, Handover] = {}
        for ue in ue_ids:
            if ue in self._in_flight:
                projected[ue] = self._in_flight[ue][0]
                continue
            serving = self.table.serving_bs(ue)
            if not available:
                projected[ue] = serving
                continue
            target = self._nearest(positions[ue], available)
            projected[ue] = target
            if target != serving:
                handovers[ue] = Handover(ue, serving, target)

        switch_off: List[int] = []
        if aware:
            members_of: Dict[int, List[int]] = {}
            for ue in ue_ids:
                members_of.setdefault(projected[ue], []).append(ue)
            for bs in available_now:
                if bs in switch_on:
                    continue
                members = members_of.get(bs, [])
                if not members:
                    switch_off.append(bs)
                elif (
                    self.policy == PolicyKind.UE_DATA_AWARE
                    and self.traffic.idle_time(bs_node(bs), now) >= self.idle_off_us
                    and not any(self._needs_service(u, now) for u in members)
                ):
                    switch_off.append(bs)

        if switch_off:
            remaining = [b for b in available if b not in switch_off]
            for ue in ue_ids:
                if projected[ue] not in switch_off or ue in self._in_flight:
                    continue
                handovers.pop(ue, None)
                if remaining:
                    target = self._nearest(positions[ue], remaining)
                    serving = self.table.serving_bs(ue)
                    if target != serving:
                        handovers[ue] = Handover(ue, serving, target)

        commands: List[PolicyCommand] = [SwitchOn(b) for b in switch_on]
        commands += [SwitchOff(b) for b in switch_off]
        commands += [handovers[u] for u in sorted(handovers)]
        return commands

    def apply(self, commands: Iterable[PolicyCommand], now: SimTime) -> None:
        for cmd in commands:
            name, args = cmd.describe()
            self.decision_log.append(f"{now},{name},{args}")
            logger.debug("t_us=%s %s %s", now, name, args)
            if isinstance(cmd, SwitchOn):
                self.phy.switch_on(bs_node(cmd.bs), now)
            elif isinstance(cmd, SwitchOff):
                self._switch_off(cmd.bs, now)
            elif isinstance(cmd, Bar):
                self._bar(cmd, now)
            elif isinstance(cmd, Unbar):
                self._barred.pop(cmd.bs, None)
            else:
                self._apply_handover(cmd, now)

    def _switch_off(self, bs: int, now: SimTime) -> None:
        for ue in self.table.ues_of(bs):
            self.table.disconnect(ue, now)
        self.phy.drain_switch_off(bs_node(bs), now)

    def _bar(self, cmd: Bar, now: SimTime) -> None:
        self._barred[cmd.bs] = cmd.until
        node = bs_node(cmd.bs)
        if self.phy.state(node) != BsPhyState.DEEP_SLEEP and not self.phy.is_unavailable(node):
            self.phy.hold_awake(node, now, cmd.until)

    def _wake_barred(self, now: SimTime) -> None:
        """A barred BS that is still the nearest BS of some UE is woken and held until unbarred."""
        if not self._barred:
            return
        positions = self.mobility.positions(now)
        all_bs = sorted(self.bs_positions)
        wanted = {self._nearest(positions[ue], all_bs) for ue in self.table.ue_ids()}
        for bs in sorted(wanted & set(self._barred)):
            node = bs_node(bs)
            if not self.phy.is_unavailable(node):
                self.phy.hold_awake(node, now, self._barred[bs])

    def _apply_handover(self, cmd: Handover, now: SimTime) -> None:
        if ue_in_flight := self._in_flight.get(cmd.ue):
            logger.debug("ue%s already handing over to bs%s; skipped", cmd.ue, ue_in_flight[0])
            return
        serving = self.table.serving_bs(cmd.ue)
        source_gone = cmd.from_bs is not None and self.phy.is_unavailable(bs_node(cmd.from_bs))
        if serving != cmd.from_bs and not (serving is None and source_gone):
            logger.debug("Stale handover for ue%s (serving bs%s, expected %s); skipped", cmd.ue, serving, cmd.from_bs)
            return
        self.handover(cmd.ue, cmd.from_bs, cmd.to_bs, now)

    def handover(self, ue: int, from_bs: Optional[int], to_bs: int, at: SimTime) -> Optional[SimTime]:
        """
        Move `ue` from `from_bs` (None when detached) to `to_bs` with control signaling.

        UE: RX_CTRL then TX for `ho_ctrl_us` each; target: RX_CTRL for twice that; source
        (if still ON): RX_CTRL for `ho_ctrl_us`. The table changes at completion. Returns the
        completion time, or None when the target is unavailable (retried on a later tick).
        """
        if from_bs == to_bs:
            return at
        target = bs_node(to_bs)
        if self.phy.is_unavailable(target):
            logger.debug("Handover of ue%s skipped: bs%s is OFF", ue, to_bs)
            return None
        source = None
        if from_bs is not None and not self.phy.is_unavailable(bs_node(from_bs)):
            source = bs_node(from_bs)
        u = ue_node(ue)
        h = self.ho_ctrl_us
        start = max(at, self.phy.busy_until(u), self.phy.busy_until(target))
        if source is not None:
            start = max(start, self.phy.busy_until(source))
        completion = start + 2 * h

        bookings = {
            u: [(start, start + h, UePhyState.RX_CTRL), (start + h, completion, UePhyState.TX)],
            target: [(start, completion, BsPhyState.RX_CTRL)],
        }
        bs_cost = self.phy.ledger(target).profile.power_mw(BsPhyState.RX_CTRL) * 2 * h
        self.stats.bs_signaling_us += 2 * h
        if source is not None:
            bookings[source] = [(start, start + h, BsPhyState.RX_CTRL)]
            bs_cost += self.phy.ledger(source).profile.power_mw(BsPhyState.RX_CTRL) * h
            self.stats.bs_signaling_us += h
        self.phy.book(bookings)
        ue_profile = self.phy.ledger(u).profile
        self.stats.bs_signaling_nj += bs_cost
        self.stats.ue_signaling_nj += (
            ue_profile.power_mw(UePhyState.RX_CTRL) * h + ue_profile.power_mw(UePhyState.TX) * h
        )

        handle = self.sim.schedule_at(completion, EventKind.HANDOVER_COMPLETE, ue=ue, to_bs=to_bs)
        self._in_flight[ue] = (to_bs, handle)
        return completion

    def _on_handover_complete(self, event: Event) -> None:
        ue, to_bs = event.payload["ue"], event.payload["to_bs"]
        now = self.sim.now
        self._in_flight.pop(ue, None)
        if self.phy.is_unavailable(bs_node(to_bs)):
            logger.debug("Handover of ue%s failed: bs%s went OFF", ue, to_bs)
            self.table.disconnect(ue, now)
            self.traffic.resume(ue, None, now)
            return
        self.on_connection_established(ue, to_bs, now)
        self.stats.count += 1
        self.stats.per_ue[ue] = self.stats.per_ue.get(ue, 0) + 1
        self.traffic.resume(ue, to_bs, now)

    # ---------------------------- events ----------------------------

    def start_ticks(self, at: SimTime) -> None:
        self.sim.schedule_at(at, EventKind.POLICY_TICK)

    def _on_tick(self, event: Event) -> None:
        now = self.sim.now
        self._wake_barred(now)
        self.apply(self.evaluate(now), now)
        self.check_invariants()
        self.sim.schedule_at(now + self.tick_us, EventKind.POLICY_TICK)

    def check_invariants(self) -> None:
        self.table.check_consistency()
        for ue in self.table.ue_ids():
            bs = self.table.serving_bs(ue)
            if bs is not None and self.phy.is_unavailable(bs_node(bs)):
                raise PolicyError(f"ue{ue} left on switched-off bs{bs}")

    def apply_random_schedule(self, schedule: RandomOffSchedule) -> None:
        """Schedule each BS's barring window; a window opening now is applied immediately."""
        if self.policy != PolicyKind.RANDOM_OFF:
            raise PolicyError(f"Random barring windows need the random_off policy, not {self.policy.value}")
        self.random_schedule = schedule
        now = self.sim.now
        for bs in sorted(schedule.off_start_s):
            start, end = schedule.window_us(bs)
            if start <= now:
                self._open_window(bs, now)
            else:
                self.sim.schedule_at(start, EventKind.OFF_WINDOW_START, bs=bs)
            self.sim.schedule_at(end, EventKind.OFF_WINDOW_END, bs=bs)

    def _open_window(self, bs: int, now: SimTime) -> None:
        _, end = self.random_schedule.window_us(bs)
        commands: List[PolicyCommand] = [Bar(bs, end)]
        remaining = [b for b in self._available() if b != bs]
        if remaining:
            positions = self.mobility.positions(now)
            for ue in self.table.ues_of(bs):
                if ue in self._in_flight:
                    continue
                commands.append(Handover(ue, bs, self._nearest(positions[ue], remaining)))
        self.apply(commands, now)

    def _on_window_start(self, event: Event) -> None:
        self._open_window(event.payload["bs"], self.sim.now)

    def _on_window_end(self, event: Event) -> None:
        self.apply([Unbar(event.payload["bs"])], self.sim.now)
