import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional

from helper import US_PER_S
from phy_energy import BsPhyState, NodeId, PhyRegistry, RadioUnavailableError, UePhyState, bs_node, ue_node
from sim_engine import Event, EventKind, SimTime, Simulator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowSpec:
    """Downlink constant-bitrate flow towards one UE (UDP-like, no retransmissions)."""

    ue: int
    packet_size: int
    inter_packet_interval_us: SimTime
    start_us: SimTime
    stop_us: SimTime

    def __post_init__(self):
        if self.packet_size <= 0:
            raise ValueError(f"packet_size must be > 0, got {self.packet_size}")
        if self.inter_packet_interval_us <= 0:
            raise ValueError(f"inter_packet_interval must be > 0, got {self.inter_packet_interval_us} us")
        if self.start_us < 0 or self.start_us > self.stop_us:
            raise ValueError(f"Flow window [{self.start_us}, {self.stop_us}] is invalid")

    def arrival_times(self) -> List[SimTime]:
        return list(range(self.start_us, self.stop_us + 1, self.inter_packet_interval_us))


@dataclass(frozen=True)
class ServiceModel:
    """
    Effective radio service: each packet costs `ctrl_overhead_us` of RX_CTRL on both ends,
    then its airtime (size * 8 / data_rate) as BS TX / UE RX_DATA.
    """

    data_rate_bps: int = 100_000_000
    ctrl_overhead_us: SimTime = 200

    def __post_init__(self):
        if self.data_rate_bps <= 0:
            raise ValueError(f"data_rate must be > 0, got {self.data_rate_bps}")
        if self.ctrl_overhead_us < 0:
            raise ValueError(f"ctrl_overhead must be >= 0, got {self.ctrl_overhead_us}")

    def airtime_us(self, size_bytes: int) -> SimTime:
        # ceiling division keeps a non-zero packet from collapsing to a zero interval
        return -(-size_bytes * 8 * US_PER_S // self.data_rate_bps)


class ActivityClock:
    """Last data activity per node, plus the last unmet demand per UE."""

    def __init__(self):
        self._birth: Dict[NodeId, SimTime] = {}
        self._last: Dict[NodeId, SimTime] = {}
        self._demand: Dict[NodeId, SimTime] = {}

    def add(self, node: NodeId, birth: SimTime = 0) -> None:
        self._birth[node] = birth

    def touch(self, node: NodeId, at: SimTime) -> None:
        self._last[node] = max(at, self._last.get(node, at))

    def demand(self, node: NodeId, at: SimTime) -> None:
        self._demand[node] = at

    def idle_time(self, node: NodeId, now: SimTime) -> SimTime:
        """now - last data activity (birth if none); 0 while a service is still in flight."""
        last = self._last.get(node, self._birth.get(node, 0))
        return max(0, now - last)

    def since_demand(self, node: NodeId, now: SimTime) -> SimTime:
        last = max(self._last.get(node, self._birth.get(node, 0)), self._demand.get(node, -1))
        return max(0, now - last)


class TrafficManager:
    """
    Downlink flows and the radio-service model.

    Packet routing asks the mobility-management entity (`mme`) which BS serves a UE.
    Packets for a UE in the middle of a handover wait and resume through the target BS;
    packets for a detached UE are dropped and counted.
    """

    def __init__(self, sim: Simulator, phy: PhyRegistry, service: ServiceModel, activity: ActivityClock):
        self.sim = sim
        self.phy = phy
        self.service = service
        self.activity = activity
        self.mme = None
        self.flows: List[FlowSpec] = []
        self.drops: Dict[int, int] = defaultdict(int)
        self.served: Dict[int, int] = defaultdict(int)
        self._waiting: Dict[int, Deque[int]] = defaultdict(deque)
        sim.register(EventKind.PACKET_ARRIVAL, self._on_arrival)
        sim.register(EventKind.FLOW_START, self._on_flow_start)
        sim.register(EventKind.FLOW_STOP, self._on_flow_stop)

    @property
    def drop_count(self) -> int:
        return sum(self.drops.values())

    def emit_packets(self, flow: FlowSpec) -> int:
        """
        Schedule FlowStart and FlowStop of `flow`. Arrivals are chained from FlowStart, each
        one scheduling the next, so the queue holds one pending arrival per flow. Returns the
        packet count.
        """
        self.flows.append(flow)
        index = len(self.flows) - 1
        self.sim.schedule_at(flow.start_us, EventKind.FLOW_START, ue=flow.ue, _flow=index)
        self.sim.schedule_at(flow.stop_us, EventKind.FLOW_STOP, ue=flow.ue, _flow=index)
        return len(flow.arrival_times())

    def _on_flow_start(self, event: Event) -> None:
        flow = self.flows[event.payload["_flow"]]
        self.sim.schedule_at(flow.start_us, EventKind.PACKET_ARRIVAL, ue=flow.ue, size=flow.packet_size,
                             _flow=event.payload["_flow"])

    def _on_flow_stop(self, event: Event) -> None:
        ue = event.payload["ue"]
        logger.debug("Flow to ue%s stopped at t_us=%s: %s served, %s dropped", ue, self.sim.now,
                     self.served[ue], self.drops[ue])

    def _on_arrival(self, event: Event) -> None:
        payload = event.payload
        flow = self.flows[payload["_flow"]]
        following = self.sim.now + flow.inter_packet_interval_us
        if following <= flow.stop_us:
            self.sim.schedule_at(following, EventKind.PACKET_ARRIVAL, ue=flow.ue, size=flow.packet_size,
                                 _flow=payload["_flow"])
        self.deliver(payload["ue"], payload["size"], self.sim.now)

    def deliver(self, ue: int, size: int, at: SimTime) -> Optional[SimTime]:
        if self.mme is not None and self.mme.in_handover(ue):
            self._waiting[ue].append(size)
            return None
        bs = self.mme.serving_bs(ue) if self.mme is not None else None
        if bs is None:
            self._drop(ue, at, "no serving BS")
            return None
        try:
            return self.serve_packet(bs, ue, size, at)
        except RadioUnavailableError:
            self.mme.report_unreachable(bs, ue, at)
            self._drop(ue, at, f"bs{bs} unreachable")
            return None

    def _drop(self, ue: int, at: SimTime, reason: str) -> None:
        self.drops[ue] += 1
        self.activity.demand(ue_node(ue), at)
        logger.debug("Dropped packet for ue%s at t_us=%s: %s", ue, at, reason)

    def serve_packet(self, bs: int, ue: int, size: int, at: SimTime) -> SimTime:
        """
        Book one downlink packet on the BS and UE radios. Returns the completion time.

        The service starts when both radios are free (FIFO per BS), runs RX_CTRL on both
        ends for the control overhead, then BS TX / UE RX_DATA for the airtime.
        """
        b, u = bs_node(bs), ue_node(ue)
        if self.phy.is_unavailable(b):
            raise RadioUnavailableError(f"bs{bs} is switched off; cannot serve ue{ue}")
        if self.mme is not None and self.mme.serving_bs(ue) != bs:
            raise ValueError(f"ue{ue} is not connected to bs{bs}")
        start = max(at, self.phy.busy_until(b), self.phy.busy_until(u))
        ctrl_end = start + self.service.ctrl_overhead_us
        end = ctrl_end + self.service.airtime_us(size)
        self.phy.book({
            b: [(start, ctrl_end, BsPhyState.RX_CTRL), (ctrl_end, end, BsPhyState.TX)],
            u: [(start, ctrl_end, UePhyState.RX_CTRL), (ctrl_end, end, UePhyState.RX_DATA)],
        })
        self.activity.touch(b, end)
        self.activity.touch(u, end)
        self.served[ue] += 1
        return end

    def resume(self, ue: int, bs: Optional[int], at: SimTime) -> None:
        """Serve (or drop, if `bs` is None) the packets that waited for a handover."""
        waiting = self._waiting.pop(ue, None)
        if not waiting:
            return
        for size in waiting:
            if bs is None:
                self._drop(ue, at, "handover failed")
            else:
                self.deliver(ue, size, at)

    def idle_time(self, node: NodeId, now: SimTime) -> SimTime:
        return self.activity.idle_time(node, now)

    def needs_service(self, ue: int, now: SimTime, idle_off_us: SimTime) -> bool:
        """A UE is not IDLE for policy purposes if it saw data or unmet demand recently."""
        return self.activity.since_demand(ue_node(ue), now) < idle_off_us
