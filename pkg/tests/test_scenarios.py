"""
End-to-end runs of the four presets: analytic energies, ledger/oracle agreement,
scenario ordering and determinism.

Run:
  pytest tests/test_scenarios.py -v
  # or: python tests/run_scenario_check.py  (no pytest)
"""
import os
import sys
import time
from dataclasses import replace

import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from phy_energy import BsPhyState
from report import emit_report
from scenario_loader import ScenarioConfigError, load_config_file, preset
from scenario_runner import World, awake_shift_nj, compare_scenarios, comparison_row, ordering_violations, run
from smartmme import PolicyKind
from topology import MobilitySpec

SEEDS = [1, 2, 3, 4, 5]
TICK = 100_000


@pytest.fixture(scope="module")
def comparison():
    return compare_scenarios(SEEDS, workers=1)


def _stationary(config):
    return replace(config, ues=tuple(replace(u, mobility=MobilitySpec(bounds=config.area)) for u in config.ues))


def _off_time(report, bs_id):
    for rec in report.traces[f"bs{bs_id}"]:
        if rec.to_state.value == "OFF":
            return rec.at
    return None


# ---------------------------- presets ----------------------------

def test_default_preset_shape():
    config = preset("default", 1)
    assert config.policy == PolicyKind.ALWAYS_ON
    assert len(config.bss) == 10
    assert len(config.ues) == 10
    assert config.duration_us == 11_240_000
    assert {f.ue for f in config.flows} == set(range(1, 11))


def test_data_aware_preset_has_four_appless_ues_near_bs1():
    config = preset("data_aware", 1)
    assert config.policy == PolicyKind.UE_DATA_AWARE
    bs1 = next(b for b in config.bss if b.id == 1).position
    near = [u for u in config.ues if u.position.distance_sq(bs1) <= 30 ** 2]
    assert len(near) == 4
    flow_ues = {f.ue for f in config.flows}
    assert not flow_ues & {u.id for u in near}
    assert len(flow_ues) == 6


def test_random_preset_policy():
    assert preset("random", 1).policy == PolicyKind.RANDOM_OFF
    assert preset("random", 1).random_off.max_start_s == 8


@pytest.mark.parametrize("name", ["default", "random", "ue_aware", "data_aware"])
def test_every_preset_switches_bss_off_at_zero_watts(name):
    config = preset(name, 1)
    assert config.bs_power.milliwatts[BsPhyState.OFF] == 0
    assert config.bs_power.milliwatts[BsPhyState.IDLE] == 86_300


def test_unquoted_off_power_key_is_rejected(tmp_path):
    path = tmp_path / "power.yaml"
    path.write_text(
        "preset: default\n"
        "power:\n"
        "  bs: {RX_CTRL: 138.9, RX_DATA: 138.9, TX: 742.2, IDLE: 86.3, DEEP_SLEEP: 6.2, OFF: 0.0}\n"
    )
    with pytest.raises(ScenarioConfigError, match="OFF"):
        load_config_file(str(path))


@pytest.mark.parametrize("name", ["default", "random", "ue_aware", "data_aware"])
def test_a_full_preset_run_takes_under_a_second(name):
    config = preset(name, 1)
    started = time.perf_counter()
    run(config)
    assert time.perf_counter() - started < 1.0


def test_unknown_preset_is_rejected():
    with pytest.raises(ScenarioConfigError):
        preset("turbo", 1)


def test_shared_presets_see_matched_topologies():
    a = World(preset("default", 3))
    b = World(preset("ue_aware", 3))
    c = World(preset("random", 3))
    assert a.bs_positions == b.bs_positions == c.bs_positions
    assert a.mobility.positions(0) == b.mobility.positions(0) == c.mobility.positions(0)


# ---------------------------- analytic energies ----------------------------

def test_idle_bs_energy_over_a_full_run():
    config = _stationary(preset("default", 1)).without_flows()
    report = run(config)
    assert report.handover_count == 0
    for b in report.bs:
        # 86.3 W * 1 s + 6.2 W * 10.24 s
        assert b.total_energy_nj == 149_788_000_000
        assert b.oracle_energy_nj == b.total_energy_nj


def test_one_millisecond_run_is_all_idle():
    config = preset("default", 1, duration_s=0.001).without_flows()
    report = run(config)
    for b in report.bs:
        assert b.total_energy_nj == 86_300 * 1_000
        assert b.dwell_us["IDLE"] == 1_000


# ---------------------------- ledger / oracle ----------------------------

def test_ledgers_match_the_trace_oracle_everywhere(comparison):
    for seed in SEEDS:
        for name, report in comparison.reports[seed].items():
            for node in report.bs + report.ue:
                assert node.total_energy_nj == node.oracle_energy_nj, (seed, name)
                assert sum(node.dwell_us.values()) == report.duration_us, (seed, name)
            assert report.bs_total_nj == sum(b.total_energy_nj for b in report.bs)


def test_avg_connected_is_bounded(comparison):
    for seed in SEEDS:
        for report in comparison.reports[seed].values():
            for b in report.bs:
                assert 0.0 <= b.avg_connected_ues <= len(report.ue)


# ---------------------------- scenario ordering ----------------------------

def test_one_row_per_seed(comparison):
    assert [row["seed"] for row in comparison.rows] == [str(s) for s in SEEDS]


def test_aware_policies_never_cost_more(comparison):
    for seed in SEEDS:
        totals = {name: r.bs_total_nj for name, r in comparison.reports[seed].items()}
        assert totals["data_aware"] <= totals["ue_aware"], seed
        assert totals["ue_aware"] <= totals["default"], seed


def test_random_windows_cause_extra_handovers(comparison):
    for seed in SEEDS:
        reports = comparison.reports[seed]
        assert reports["random"].handover_count > reports["default"].handover_count
        assert reports["random"].handover_bs_signaling_us > reports["default"].handover_bs_signaling_us


def test_random_windows_cost_more_than_always_on(comparison):
    for seed in SEEDS:
        reports = comparison.reports[seed]
        assert reports["default"].bs_total_nj < reports["random"].bs_total_nj, seed
        assert "default>=random" not in comparison.violations.get(seed, []), seed


def test_random_gap_is_explained_by_signaling_and_rewarm(comparison):
    assert sum(float(row["rewarm_j"]) for row in comparison.rows) > 0
    for row in comparison.rows:
        assert float(row["rewarm_j"]) >= 0, row["seed"]
        assert float(row["handover_signaling_j"]) > 0, row["seed"]
        assert 0.9 <= float(row["explained_fraction"]) <= 1.1, row["seed"]


def test_state_shift_adds_up_to_the_energy_gap(comparison):
    for seed in SEEDS:
        reports = comparison.reports[seed]
        shift = awake_shift_nj(reports["random"], reports["default"])
        assert sum(shift.values()) == reports["random"].bs_total_nj - reports["default"].bs_total_nj


def test_barred_bss_never_go_off(comparison):
    for seed in SEEDS:
        report = comparison.reports[seed]["random"]
        assert all(b.dwell_us["OFF"] == 0 for b in report.bs), seed
        assert {line.split(",")[1] for line in report.decision_log} <= {"Bar", "Unbar", "Handover"}


def test_ordering_flags():
    ok = {"data_aware": 1, "ue_aware": 2, "default": 3, "random": 4}
    assert ordering_violations(ok) == []
    assert ordering_violations({**ok, "random": 3}) == ["default>=random"]
    assert ordering_violations({**ok, "ue_aware": 5}) == ["ue_aware>default"]


def test_comparison_row_flags_violations(comparison):
    reports = dict(comparison.reports[1])
    row = comparison_row(1, reports)
    swapped = dict(reports, default=reports["random"], random=reports["default"])
    flipped = comparison_row(1, swapped)
    gap = reports["random"].bs_total_nj - reports["default"].bs_total_nj
    violated = flipped if gap > 0 else row
    assert violated["ordering_holds"] == "false"
    assert "default>=random" in violated["violations"].split(";")
    assert (row["explained_fraction"] != "") == (gap > 0)


def test_connected_ues_drive_bs_energy(comparison):
    assert comparison.spearman_n == 50
    assert comparison.spearman_rho >= 0.6


# ---------------------------- data-aware topology ----------------------------

def test_bs1_goes_off_and_costs_little(comparison):
    report = comparison.reports[1]["data_aware"]
    off_at = _off_time(report, 1)
    assert off_at is not None
    assert off_at <= 1_000_000 + TICK
    serving = [report.bs_by_id(b).total_energy_nj for b in (2, 6, 10)]
    assert report.bs_by_id(1).total_energy_nj * 10 < sum(serving) / len(serving)


def test_zero_traffic_fixed_point():
    config = preset("data_aware", 1).without_flows()
    report = run(config)
    for b in report.bs:
        off_at = _off_time(report, b.bs_id)
        assert off_at is not None and off_at <= 1_000_000 + TICK
        assert report.traces[f"bs{b.bs_id}"][-1].to_state.value == "OFF"
        assert b.dwell_us["OFF"] == report.duration_us - off_at
        # nothing is paid once the BS is off
        paid = sum(report.bs_power_mw[s] * d for s, d in b.dwell_us.items() if s != "OFF")
        assert b.total_energy_nj == paid
    # only the IDLE / DEEP_SLEEP stretch before switch-off was paid for
    assert report.bs_total_nj <= 10 * 86_300 * (1_000_000 + TICK)


# ---------------------------- determinism ----------------------------

def test_identical_config_gives_identical_csv(tmp_path):
    config = preset("random", 2, duration_s=3.0)
    first = emit_report(run(config, record_log=True), "csv", str(tmp_path / "a"), emit_trace=True)
    second = emit_report(run(config, record_log=True), "csv", str(tmp_path / "b"), emit_trace=True)
    for a, b in zip(first, second):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read(), os.path.basename(a)


# ---------------------------- config files ----------------------------

def test_config_file_extends_a_preset(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text(
        "preset: ue_aware\n"
        "name: short_ue_aware\n"
        "seed: 9\n"
        "duration_s: 2.5\n"
        "thresholds: {tick_s: 0.2}\n"
        "flows: none\n"
    )
    config = load_config_file(str(path))
    assert config.name == "short_ue_aware"
    assert config.policy == PolicyKind.UE_AWARE
    assert config.seed == 9
    assert config.duration_us == 2_500_000
    assert config.thresholds.tick_us == 200_000
    assert config.thresholds.ho_ctrl_us == 5_000
    assert config.flows == ()

    overridden = load_config_file(str(path), seed=4, duration_s=1.0)
    assert overridden.seed == 4
    assert overridden.duration_us == 1_000_000


def test_config_rejects_unknown_flow_ue(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("bss: {count: 1}\nues: {count: 1}\nflows:\n  - {ue: 4}\n")
    with pytest.raises(ScenarioConfigError):
        load_config_file(str(path))


def test_config_rejects_non_positive_duration():
    with pytest.raises(ScenarioConfigError):
        preset("default", 1, duration_s=0)


def test_flow_start_jitter_is_seeded(tmp_path):
    path = tmp_path / "jitter.yaml"
    path.write_text("preset: default\nflow: {start_jitter_s: 0.05}\n")
    starts = []
    for _ in range(2):
        world = World(load_config_file(str(path), seed=5, duration_s=1.0))
        world.start()
        starts.append([f.start_us for f in world.traffic.flows])
    assert starts[0] == starts[1]
    assert all(0 <= s <= 50_000 for s in starts[0])
    assert len(set(starts[0])) > 1
