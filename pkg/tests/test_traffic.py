import os
import sys

import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from phy_energy import BsPhyState, PhyRegistry, UePhyState, bs_node, default_bs_profile, default_ue_profile, ue_node
from sim_engine import EventKind, Simulator
from traffic import ActivityClock, FlowSpec, ServiceModel, TrafficManager


class StubMME:
    """Static association table standing in for the SmartMME."""

    def __init__(self, serving):
        self.serving = dict(serving)
        self.handing_over = set()
        self.unreachable = []

    def in_handover(self, ue):
        return ue in self.handing_over

    def serving_bs(self, ue):
        return self.serving.get(ue)

    def report_unreachable(self, bs, ue, at):
        self.unreachable.append((bs, ue, at))


def _world(serving, service=None):
    sim = Simulator()
    phy = PhyRegistry(sim)
    activity = ActivityClock()
    traffic = TrafficManager(sim, phy, service or ServiceModel(), activity)
    traffic.mme = StubMME(serving)
    for bs in {b for b in serving.values() if b is not None} | {1}:
        phy.add_node(bs_node(bs), default_bs_profile())
        activity.add(bs_node(bs))
    for ue in serving:
        phy.add_node(ue_node(ue), default_ue_profile())
        activity.add(ue_node(ue))
    return sim, phy, traffic


def test_airtime_of_a_1000_byte_packet_at_100_mbps():
    assert ServiceModel().airtime_us(1000) == 80


def test_airtime_rounds_up():
    assert ServiceModel(data_rate_bps=3_000_000).airtime_us(1) == 3


def test_flow_arrival_times_are_periodic_and_inclusive():
    flow = FlowSpec(ue=1, packet_size=1000, inter_packet_interval_us=20_000, start_us=0, stop_us=100_000)
    assert flow.arrival_times() == [0, 20_000, 40_000, 60_000, 80_000, 100_000]


def test_flow_validation():
    with pytest.raises(ValueError):
        FlowSpec(ue=1, packet_size=0, inter_packet_interval_us=10, start_us=0, stop_us=10)
    with pytest.raises(ValueError):
        FlowSpec(ue=1, packet_size=10, inter_packet_interval_us=10, start_us=20, stop_us=10)


def test_one_packet_books_ctrl_then_data_on_both_ends():
    sim, phy, traffic = _world({1: 1})
    end = traffic.serve_packet(1, 1, 1000, 0)
    assert end == 280
    sim.run_until(1_000)
    bs = phy.finalize(bs_node(1), 1_000)
    ue = phy.finalize(ue_node(1), 1_000)
    assert bs.dwell_us[BsPhyState.RX_CTRL] == 200
    assert bs.dwell_us[BsPhyState.TX] == 80
    assert ue.dwell_us[UePhyState.RX_CTRL] == 200
    assert ue.dwell_us[UePhyState.RX_DATA] == 80


def test_simultaneous_packets_queue_fifo_on_the_bs():
    sim, phy, traffic = _world({1: 1, 2: 1}, ServiceModel(ctrl_overhead_us=0))
    first = traffic.serve_packet(1, 1, 1000, 0)
    second = traffic.serve_packet(1, 2, 1000, 0)
    assert first == 80
    assert second == first + 80


def test_packets_for_detached_ue_are_dropped_and_mark_demand():
    sim, phy, traffic = _world({1: None})
    flow = FlowSpec(ue=1, packet_size=1000, inter_packet_interval_us=20_000, start_us=0, stop_us=40_000)
    assert traffic.emit_packets(flow) == 3
    sim.run_until(100_000)
    assert traffic.drop_count == 3
    assert traffic.needs_service(1, 100_000, 1_000_000)
    assert not traffic.needs_service(1, 1_040_000, 1_000_000)


def test_packets_wait_during_handover_and_resume_via_target():
    sim, phy, traffic = _world({1: 1})
    phy.add_node(bs_node(2), default_bs_profile())
    traffic.mme.handing_over.add(1)
    assert traffic.deliver(1, 1000, 0) is None
    assert traffic.drop_count == 0
    traffic.mme.handing_over.clear()
    traffic.mme.serving[1] = 2
    traffic.resume(1, 2, 0)
    assert traffic.served[1] == 1
    assert phy.busy_until(bs_node(2)) == 280


def test_failed_handover_drops_waiting_packets():
    sim, phy, traffic = _world({1: 1})
    traffic.mme.handing_over.add(1)
    traffic.deliver(1, 1000, 0)
    traffic.deliver(1, 1000, 0)
    traffic.resume(1, None, 10)
    assert traffic.drop_count == 2


def test_idle_time_tracks_last_data_activity():
    sim, phy, traffic = _world({1: 1})
    end = traffic.serve_packet(1, 1, 1000, 2_000_000 - 280)
    assert end == 2_000_000
    assert traffic.idle_time(bs_node(1), 3_500_000) == 1_500_000
    assert traffic.idle_time(bs_node(1), 2_000_000) == 0


def test_packet_for_switched_off_bs_is_reported():
    sim, phy, traffic = _world({1: 1})
    phy.switch_off(bs_node(1), 0)
    assert traffic.deliver(1, 1000, 0) is None
    assert traffic.mme.unreachable == [(1, 1, 0)]
    assert traffic.drop_count == 1


def _queued(sim, kind):
    return sum(1 for _, _, handle in sim._queue if handle.pending and handle.event.kind == kind)


def test_flow_arrivals_are_chained_one_at_a_time():
    sim, phy, traffic = _world({1: 1})
    sim.record_log = True
    flow = FlowSpec(ue=1, packet_size=1000, inter_packet_interval_us=20_000, start_us=0, stop_us=100_000)
    assert traffic.emit_packets(flow) == 6
    assert _queued(sim, EventKind.PACKET_ARRIVAL) == 0
    sim.run_until(50_000)
    assert _queued(sim, EventKind.PACKET_ARRIVAL) == 1
    sim.run_until(200_000)
    arrivals = [line.split(",")[0] for line in sim.event_log if ",PacketArrival," in line]
    assert arrivals == ["0", "20000", "40000", "60000", "80000", "100000"]
    assert traffic.served[1] == 6
    assert _queued(sim, EventKind.PACKET_ARRIVAL) == 0


def test_unaligned_flow_stops_before_its_stop_time():
    sim, phy, traffic = _world({1: 1})
    flow = FlowSpec(ue=1, packet_size=1000, inter_packet_interval_us=20_000, start_us=30_000, stop_us=75_000)
    assert traffic.emit_packets(flow) == 3
    sim.run_until(1_000_000)
    assert traffic.served[1] == 3
