import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from helper import format_joules, format_seconds, write_to_json
from phy_energy import BsPhyState, LedgerError, StateChangeRecord, UePhyState

logger = logging.getLogger(__name__)

BS_COLUMNS = ["bs_id", "total_energy_j", "idle_s", "rx_ctrl_s", "rx_data_s", "tx_s", "deep_sleep_s", "off_s",
              "avg_connected_ues"]
UE_COLUMNS = ["ue_id", "total_energy_j", "idle_s", "rx_ctrl_s", "rx_data_s", "tx_s", "handover_count"]
TOTALS_COLUMNS = ["policy", "seed", "bs_total_j", "ue_total_j", "handovers", "drops"]
TRACE_COLUMNS = ["node_id", "t_us", "from", "to"]
DECISION_COLUMNS = ["t_us", "command", "args"]
EVENT_COLUMNS = ["t_us", "kind", "payload_summary"]

_BS_STATES = [BsPhyState.IDLE, BsPhyState.RX_CTRL, BsPhyState.RX_DATA, BsPhyState.TX, BsPhyState.DEEP_SLEEP,
              BsPhyState.OFF]
_UE_STATES = [UePhyState.IDLE, UePhyState.RX_CTRL, UePhyState.RX_DATA, UePhyState.TX]


@dataclass
class BsReport:
    bs_id: int
    total_energy_nj: int
    dwell_us: Dict[str, int]
    avg_connected_ues: float
    oracle_energy_nj: int


@dataclass
class UeReport:
    ue_id: int
    total_energy_nj: int
    dwell_us: Dict[str, int]
    handover_count: int
    oracle_energy_nj: int


@dataclass
class RunReport:
    """Everything a finished run produced; energies in nJ, times in us."""

    name: str
    policy: str
    seed: int
    duration_us: int
    bs: List[BsReport]
    ue: List[UeReport]
    handover_count: int
    drop_count: int
    handover_bs_signaling_nj: int
    handover_ue_signaling_nj: int
    handover_bs_signaling_us: int = 0
    bs_power_mw: Dict[str, int] = field(default_factory=dict)
    traces: Dict[str, List[StateChangeRecord]] = field(default_factory=dict)
    decision_log: List[str] = field(default_factory=list)
    event_log: List[str] = field(default_factory=list)

    @property
    def bs_total_nj(self) -> int:
        return sum(b.total_energy_nj for b in self.bs)

    @property
    def ue_total_nj(self) -> int:
        return sum(u.total_energy_nj for u in self.ue)

    def bs_by_id(self, bs_id: int) -> BsReport:
        for b in self.bs:
            if b.bs_id == bs_id:
                return b
        raise KeyError(f"bs{bs_id} not in report")

    def verify(self) -> None:
        """Check ledger totals against the trace oracle and dwell conservation, for every node."""
        for b in self.bs:
            _verify_node(f"bs{b.bs_id}", b.total_energy_nj, b.oracle_energy_nj, b.dwell_us, self.duration_us)
        for u in self.ue:
            _verify_node(f"ue{u.ue_id}", u.total_energy_nj, u.oracle_energy_nj, u.dwell_us, self.duration_us)

    # ---------------------------- rows ----------------------------

    def bs_rows(self) -> List[List[str]]:
        return [
            [f"bs{b.bs_id}", format_joules(b.total_energy_nj)]
            + [format_seconds(b.dwell_us[s.value]) for s in _BS_STATES]
            + [f"{b.avg_connected_ues:.6f}"]
            for b in self.bs
        ]

    def ue_rows(self) -> List[List[str]]:
        return [
            [f"ue{u.ue_id}", format_joules(u.total_energy_nj)]
            + [format_seconds(u.dwell_us[s.value]) for s in _UE_STATES]
            + [str(u.handover_count)]
            for u in self.ue
        ]

    def totals_row(self) -> List[str]:
        return [self.policy, str(self.seed), format_joules(self.bs_total_nj), format_joules(self.ue_total_nj),
                str(self.handover_count), str(self.drop_count)]

    def trace_rows(self) -> List[List[str]]:
        return [
            [node, str(rec.at), rec.from_state.value, rec.to_state.value]
            for node in sorted(self.traces, key=_node_sort_key)
            for rec in self.traces[node]
        ]


def _verify_node(node: str, total: int, oracle: int, dwell: Dict[str, int], duration: int) -> None:
    if total != oracle:
        raise LedgerError(f"{node}: ledger total {total} nJ differs from trace oracle {oracle} nJ")
    if sum(dwell.values()) != duration:
        raise LedgerError(f"{node}: dwell sums to {sum(dwell.values())} us, run lasted {duration} us")


def _node_sort_key(node: str) -> Tuple[str, int]:
    return node[:2], int(node[2:])


def _split_log(lines: Sequence[str]) -> List[List[str]]:
    return [line.split(",", 2) for line in lines]


def _write_csv(rows: List[List[str]], columns: List[str], path: str) -> str:
    try:
        pd.DataFrame(rows, columns=columns, dtype=str).to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise type(e)(f"Cannot write {path}: {e}") from e
    logger.info("Wrote %s", path)
    return path


def _write_json(data, path: str) -> str:
    try:
        write_to_json(data, path)
    except OSError as e:
        raise type(e)(f"Cannot write {path}: {e}") from e
    logger.info("Wrote %s", path)
    return path


def emit_report(report: RunReport, fmt: str = "csv", out_dir: str = "results", emit_trace: bool = False) -> List[str]:
    """
    Write the per-BS, per-UE and totals tables of one run into `out_dir`.

    csv: per_bs.csv, per_ue.csv, totals.csv. json: report.json holding the same three tables
    as lists of records with identical (string) values. With `emit_trace`, the state trace,
    the decision log and the event log are written as trace.csv, decisions.csv and events.csv.
    Existing files are overwritten. Returns the written paths.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"Unknown report format {fmt!r}; use csv or json")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt == "csv":
        written.append(_write_csv(report.bs_rows(), BS_COLUMNS, os.path.join(out_dir, "per_bs.csv")))
        written.append(_write_csv(report.ue_rows(), UE_COLUMNS, os.path.join(out_dir, "per_ue.csv")))
        written.append(_write_csv([report.totals_row()], TOTALS_COLUMNS, os.path.join(out_dir, "totals.csv")))
    else:
        data = {
            "scenario": report.name,
            "duration_s": format_seconds(report.duration_us),
            "per_bs": [dict(zip(BS_COLUMNS, row)) for row in report.bs_rows()],
            "per_ue": [dict(zip(UE_COLUMNS, row)) for row in report.ue_rows()],
            "totals": [dict(zip(TOTALS_COLUMNS, report.totals_row()))],
        }
        written.append(_write_json(data, os.path.join(out_dir, "report.json")))
    if emit_trace:
        written.append(_write_csv(report.trace_rows(), TRACE_COLUMNS, os.path.join(out_dir, "trace.csv")))
        written.append(_write_csv(_split_log(report.decision_log), DECISION_COLUMNS,
                                  os.path.join(out_dir, "decisions.csv")))
        written.append(_write_csv(_split_log(report.event_log), EVENT_COLUMNS, os.path.join(out_dir, "events.csv")))
    return written


def emit_totals(reports: Sequence[RunReport], out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return _write_csv([r.totals_row() for r in reports], TOTALS_COLUMNS, os.path.join(out_dir, "totals.csv"))


def emit_comparison(rows: List[Dict[str, str]], columns: List[str], out_dir: str,
                    spearman: Optional[Dict[str, str]] = None) -> List[str]:
    """comparison.csv (one row per seed) and comparison.json (rows plus the rank-correlation summary)."""
    os.makedirs(out_dir, exist_ok=True)
    written = [_write_csv([[row[c] for c in columns] for row in rows], columns,
                          os.path.join(out_dir, "comparison.csv"))]
    written.append(_write_json({"rows": rows, "spearman": spearman or {}}, os.path.join(out_dir, "comparison.json")))
    return written
