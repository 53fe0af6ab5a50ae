import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

from scipy.stats import spearmanr

from config import Config
from helper import format_joules
from phy_energy import PhyRegistry, bs_node, recompute_from_trace, ue_node
from report import BsReport, RunReport, UeReport
from scenario_loader import ScenarioConfig, preset
from sim_engine import Event, EventKind, RandomSource, Simulator
from smartmme import PolicyKind, RandomOffSchedule, SmartMME
from topology import MobilityTracker, place_uniform
from traffic import ActivityClock, TrafficManager

logger = logging.getLogger(__name__)


class World:
    """One simulation instance: kernel, radios, traffic, mobility and the SmartMME, wired together."""

    def __init__(self, config: ScenarioConfig, record_log: bool = False):
        self.config = config
        self.sim = Simulator(record_log=record_log)
        self.root_rng = RandomSource(config.seed)
        self.phy = PhyRegistry(self.sim)
        self.activity = ActivityClock()
        self.traffic = TrafficManager(self.sim, self.phy, config.service, self.activity)
        self.mobility = MobilityTracker()

        topology_rng = self.root_rng.split("topology")
        auto_bs = place_uniform(sum(1 for b in config.bss if b.position is None), config.area, topology_rng)
        auto_ue = place_uniform(sum(1 for u in config.ues if u.position is None), config.area, topology_rng)
        self.bs_positions = {}
        for spec in sorted(config.bss, key=lambda b: b.id):
            self.bs_positions[spec.id] = spec.position if spec.position is not None else auto_bs.pop(0)
            node = bs_node(spec.id)
            self.phy.add_node(node, config.bs_power)
            self.activity.add(node)
        for spec in sorted(config.ues, key=lambda u: u.id):
            pos = spec.position if spec.position is not None else auto_ue.pop(0)
            node = ue_node(spec.id)
            self.phy.add_node(node, config.ue_power)
            self.activity.add(node)
            self.mobility.add(spec.id, pos, spec.mobility, self.root_rng.split("mobility", spec.id))

        t = config.thresholds
        self.mme = SmartMME(
            self.sim, self.phy, self.traffic, self.mobility, self.bs_positions,
            [u.id for u in config.ues], config.policy,
            idle_off_us=t.idle_off_us, tick_us=t.tick_us, ho_ctrl_us=t.ho_ctrl_us,
        )
        self.sim.register(EventKind.MOBILITY_STEP, self._on_mobility_step)
        self.sim.register(EventKind.SIM_END, self._on_sim_end)

    def _on_mobility_step(self, event: Event) -> None:
        now = self.sim.now
        self.mobility.advance(now)
        self.sim.schedule_at(now + self.config.thresholds.mobility_step_us, EventKind.MOBILITY_STEP)

    def _on_sim_end(self, event: Event) -> None:
        logger.debug("%s: end of run at t_us=%s", self.config.name, self.sim.now)

    def start(self) -> None:
        config = self.config
        if config.policy == PolicyKind.RANDOM_OFF:
            schedule = RandomOffSchedule.draw(
                self.bs_positions, self.root_rng.split("policy"),
                upper_exclusive=config.random_off.max_start_s + 1, length_s=config.random_off.window_s,
            )
            logger.debug("%s: barring windows start at %s s", config.name, schedule.off_start_s)
            self.mme.apply_random_schedule(schedule)
        self.mme.connect_initial(0)
        self.mme.start_ticks(0)
        self.sim.schedule_at(config.thresholds.mobility_step_us, EventKind.MOBILITY_STEP)

        traffic_rng = self.root_rng.split("traffic")
        for flow in config.flows:
            if config.flow_start_jitter_us > 0:
                start = flow.start_us + traffic_rng.integers(0, config.flow_start_jitter_us + 1)
                if start > flow.stop_us:
                    continue
                flow = replace(flow, start_us=start)
            self.traffic.emit_packets(flow)
        self.sim.schedule_at(config.duration_us, EventKind.SIM_END)

    def finish(self) -> RunReport:
        config = self.config
        end = config.duration_us
        self.phy.finalize_all(end)
        stats = self.mme.stats
        bs_reports = []
        for bs_id in sorted(self.bs_positions):
            ledger = self.phy.ledger(bs_node(bs_id))
            bs_reports.append(BsReport(
                bs_id=bs_id,
                total_energy_nj=ledger.total_energy_nj,
                dwell_us={s.value: d for s, d in ledger.dwell_us.items()},
                avg_connected_ues=self.mme.table.avg_connected(bs_id, end),
                oracle_energy_nj=recompute_from_trace(ledger.trace, ledger.profile, end, ledger.initial_state,
                                                      ledger.birth),
            ))
        ue_reports = []
        for ue_id in sorted(u.id for u in config.ues):
            ledger = self.phy.ledger(ue_node(ue_id))
            ue_reports.append(UeReport(
                ue_id=ue_id,
                total_energy_nj=ledger.total_energy_nj,
                dwell_us={s.value: d for s, d in ledger.dwell_us.items()},
                handover_count=stats.per_ue.get(ue_id, 0),
                oracle_energy_nj=recompute_from_trace(ledger.trace, ledger.profile, end, ledger.initial_state,
                                                      ledger.birth),
            ))
        return RunReport(
            name=config.name,
            policy=config.policy.value,
            seed=config.seed,
            duration_us=end,
            bs=bs_reports,
            ue=ue_reports,
            handover_count=stats.count,
            drop_count=self.traffic.drop_count,
            handover_bs_signaling_nj=stats.bs_signaling_nj,
            handover_ue_signaling_nj=stats.ue_signaling_nj,
            handover_bs_signaling_us=stats.bs_signaling_us,
            bs_power_mw={s.value: mw for s, mw in config.bs_power.milliwatts.items()},
            traces={str(node): list(self.phy.ledger(node).trace) for node in self.phy.nodes()},
            decision_log=list(self.mme.decision_log),
            event_log=list(self.sim.event_log),
        )


def run(config: ScenarioConfig, record_log: bool = False) -> RunReport:
    """Build the world for `config`, simulate it to the configured duration and report."""
    logger.info("Running %s (policy=%s, seed=%s, %s BSs, %s UEs)", config.name, config.policy.value,
                config.seed, len(config.bss), len(config.ues))
    world = World(config, record_log=record_log)
    world.start()
    world.sim.run_until(config.duration_us)
    report = world.finish()
    report.verify()
    logger.info("Finished %s seed=%s: bs_total=%s J, handovers=%s, drops=%s", config.name, config.seed,
                format_joules(report.bs_total_nj), report.handover_count, report.drop_count)
    return report


# ---------------------------- scenario comparison ----------------------------

COMPARISON_COLUMNS = [
    "seed", "data_aware_j", "ue_aware_j", "default_j", "random_j", "ordering_holds", "violations",
    "random_minus_default_j", "handover_signaling_j", "rewarm_j", "residual_j", "explained_fraction",
    "default_handovers", "random_handovers",
]

# (lower, higher, strict)
ORDERING = [("data_aware", "ue_aware", False), ("ue_aware", "default", False), ("default", "random", True)]


@dataclass
class Comparison:
    rows: List[Dict[str, str]]
    reports: Dict[int, Dict[str, RunReport]] = field(default_factory=dict)
    spearman_rho: Optional[float] = None
    spearman_n: int = 0

    @property
    def violations(self) -> Dict[int, List[str]]:
        return {int(r["seed"]): r["violations"].split(";") for r in self.rows if r["violations"]}

    def spearman_summary(self) -> Dict[str, str]:
        rho = "" if self.spearman_rho is None else f"{self.spearman_rho:.6f}"
        return {"preset": "default", "x": "avg_connected_ues", "y": "total_energy_j", "rho": rho,
                "n": str(self.spearman_n)}


def ordering_violations(totals_nj: Dict[str, int]) -> List[str]:
    out = []
    for low, high, strict in ORDERING:
        bad = totals_nj[low] >= totals_nj[high] if strict else totals_nj[low] > totals_nj[high]
        if bad:
            out.append(f"{low}{'>=' if strict else '>'}{high}")
    return out


SLEEP_STATES = ("DEEP_SLEEP", "OFF")


def awake_shift_nj(run: RunReport, baseline: RunReport) -> Dict[str, int]:
    """
    Exact split of `run.bs_total_nj - baseline.bs_total_nj` by state, relative to IDLE.

    Every BS spends the same total time, so time that moves between two states costs the
    difference of their powers. The value for a state is (P_state - P_IDLE) summed over BSs
    times the extra time `run` spends there; the values add up to the energy gap.
    """
    power = run.bs_power_mw
    shift = {state: 0 for state in power if state != "IDLE"}
    for b in run.bs:
        other = baseline.bs_by_id(b.bs_id)
        for state in shift:
            shift[state] += (power[state] - power["IDLE"]) * (b.dwell_us[state] - other.dwell_us[state])
    return shift


def comparison_row(seed: int, reports: Dict[str, RunReport]) -> Dict[str, str]:
    """
    One comparison row. The random-vs-default gap is decomposed into the extra handover
    signaling time on the BSs (RX_CTRL instead of IDLE), the re-warm energy of BSs that
    stay IDLE where the default run sleeps, and a residual from data service moving
    between BSs.
    """
    totals = {name: r.bs_total_nj for name, r in reports.items()}
    violations = ordering_violations(totals)
    gap = totals["random"] - totals["default"]
    random_run, default_run = reports["random"], reports["default"]
    power = random_run.bs_power_mw
    signaling = (random_run.handover_bs_signaling_us - default_run.handover_bs_signaling_us) * (
        power["RX_CTRL"] - power["IDLE"]
    )
    shift = awake_shift_nj(random_run, default_run)
    rewarm = -sum(shift[state] for state in SLEEP_STATES)
    residual = gap - signaling - rewarm
    explained = f"{(signaling + rewarm) / gap:.6f}" if gap > 0 else ""
    return {
        "seed": str(seed),
        "data_aware_j": format_joules(totals["data_aware"]),
        "ue_aware_j": format_joules(totals["ue_aware"]),
        "default_j": format_joules(totals["default"]),
        "random_j": format_joules(totals["random"]),
        "ordering_holds": "false" if violations else "true",
        "violations": ";".join(violations),
        "random_minus_default_j": format_joules(gap),
        "handover_signaling_j": format_joules(signaling),
        "rewarm_j": format_joules(rewarm),
        "residual_j": format_joules(residual),
        "explained_fraction": explained,
        "default_handovers": str(reports["default"].handover_count),
        "random_handovers": str(reports["random"].handover_count),
    }


def _run_preset(job) -> RunReport:
    name, seed, presets_path = job
    return run(preset(name, seed, path=presets_path))


def compare_scenarios(seeds: Sequence[int], workers: int = Config.WORKERS,
                      presets_path: Optional[str] = None) -> Comparison:
    """
    Run the four presets for every seed and tabulate total mmWave-BS energy.

    default, random and ue_aware share placements, walks and flows for a given seed, since
    each draws them from the same per-concern random streams. Runs are independent and may
    go to a process pool; the table is assembled in seed order.
    """
    if not seeds:
        raise ValueError("compare_scenarios needs at least one seed")
    jobs = [(name, seed, presets_path) for seed in seeds for name in Config.PRESET_NAMES]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_preset, jobs))
    else:
        results = [_run_preset(job) for job in jobs]

    comparison = Comparison(rows=[])
    for (name, seed, _), report in zip(jobs, results):
        comparison.reports.setdefault(seed, {})[name] = report
    for seed in seeds:
        row = comparison_row(seed, comparison.reports[seed])
        if row["violations"]:
            logger.warning("seed %s: scenario ordering violated (%s)", seed, row["violations"])
        comparison.rows.append(row)

    connected, energy = [], []
    for seed in seeds:
        for b in comparison.reports[seed]["default"].bs:
            connected.append(b.avg_connected_ues)
            energy.append(b.total_energy_nj)
    if len(connected) > 1:
        rho = spearmanr(connected, energy)[0]
        comparison.spearman_rho = float(rho)
        comparison.spearman_n = len(connected)
    return comparison
