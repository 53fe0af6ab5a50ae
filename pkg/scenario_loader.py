import copy
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from config import Config
from helper import read_yaml, seconds_to_us
from phy_energy import BsPhyState, PowerProfile, UePhyState
from sim_engine import SimTime
from smartmme import PolicyKind
from topology import Bounds, MobilityKind, MobilitySpec, Position, TopologyError
from traffic import FlowSpec, ServiceModel

logger = logging.getLogger(__name__)


class ScenarioConfigError(ValueError):
    """Invalid scenario definition or unknown preset name."""


@dataclass(frozen=True)
class Thresholds:
    deep_sleep_us: SimTime = 1_000_000
    idle_off_us: SimTime = 1_000_000
    tick_us: SimTime = 100_000
    ho_ctrl_us: SimTime = 5_000
    mobility_step_us: SimTime = 100_000


@dataclass(frozen=True)
class RandomOffParams:
    max_start_s: int = 8
    window_s: int = 2


@dataclass(frozen=True)
class BsSpec:
    id: int
    position: Optional[Position] = None  # None: placed uniformly from the topology stream


@dataclass(frozen=True)
class UeSpec:
    id: int
    position: Optional[Position] = None
    mobility: MobilitySpec = MobilitySpec()


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    policy: PolicyKind
    duration_us: SimTime
    area: Bounds
    seed: int
    bss: Tuple[BsSpec, ...]
    ues: Tuple[UeSpec, ...]
    flows: Tuple[FlowSpec, ...]
    ue_power: PowerProfile
    bs_power: PowerProfile
    service: ServiceModel
    thresholds: Thresholds
    random_off: RandomOffParams = RandomOffParams()
    flow_start_jitter_us: SimTime = 0

    def __post_init__(self):
        if self.duration_us <= 0:
            raise ScenarioConfigError(f"{self.name}: duration must be > 0, got {self.duration_us} us")
        _check_ids("bs", [b.id for b in self.bss], self.name)
        _check_ids("ue", [u.id for u in self.ues], self.name)
        ue_ids = {u.id for u in self.ues}
        for flow in self.flows:
            if flow.ue not in ue_ids:
                raise ScenarioConfigError(f"{self.name}: flow references unknown ue{flow.ue}")
        for spec in list(self.bss) + list(self.ues):
            if spec.position is not None and not self.area.contains(spec.position):
                raise ScenarioConfigError(f"{self.name}: node {spec.id} at {spec.position} lies outside the area")
        if self.ues and not self.bss:
            raise ScenarioConfigError(f"{self.name}: UEs need at least one BS")
        t = self.thresholds
        for field_name in ("deep_sleep_us", "idle_off_us", "tick_us", "ho_ctrl_us", "mobility_step_us"):
            if getattr(t, field_name) <= 0:
                raise ScenarioConfigError(f"{self.name}: threshold {field_name} must be > 0")
        if self.random_off.max_start_s < 0 or self.random_off.window_s <= 0:
            raise ScenarioConfigError(f"{self.name}: invalid random_off window {self.random_off}")

    def without_flows(self) -> "ScenarioConfig":
        return replace(self, flows=())


def _check_ids(kind: str, ids: List[int], name: str) -> None:
    if len(set(ids)) != len(ids):
        raise ScenarioConfigError(f"{name}: duplicate {kind} ids {sorted(ids)}")
    bad = [i for i in ids if not isinstance(i, int) or isinstance(i, bool) or i <= 0]
    if bad:
        raise ScenarioConfigError(f"{name}: {kind} ids must be positive integers, got {bad}")


# ---------------------------- YAML -> config ----------------------------

def _merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for key, value in (override or {}).items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _seconds(entry: Mapping[str, Any], key: str, name: str) -> SimTime:
    try:
        return seconds_to_us(entry[key])
    except KeyError:
        raise ScenarioConfigError(f"{name}: missing {key}") from None
    except (ArithmeticError, ValueError, TypeError):
        raise ScenarioConfigError(f"{name}: {key} is not a number: {entry[key]!r}") from None


def _position(entry: Mapping[str, Any]) -> Optional[Position]:
    if "x" in entry or "y" in entry:
        return Position(float(entry["x"]), float(entry["y"]))
    return None


def _mobility(raw: Mapping[str, Any], area: Bounds, name: str) -> MobilitySpec:
    try:
        kind = MobilityKind(raw.get("kind", MobilityKind.CONSTANT_POSITION.value))
    except ValueError:
        raise ScenarioConfigError(f"{name}: unknown mobility kind {raw.get('kind')!r}") from None
    try:
        return MobilitySpec(
            kind=kind,
            speed=float(raw.get("speed", 0.0)) if kind == MobilityKind.RANDOM_WALK_2D else 0.0,
            heading_change_period_us=seconds_to_us(raw.get("heading_change_s", 1.0)),
            bounds=area,
        )
    except TopologyError as e:
        raise ScenarioConfigError(f"{name}: {e}") from e


def _nodes(raw, kind: str, name: str) -> List[Mapping[str, Any]]:
    """A node block is either `{count: n}` (ids 1..n, placed uniformly) or a list of entries."""
    if isinstance(raw, Mapping):
        count = int(raw.get("count", 0))
        if count < 0:
            raise ScenarioConfigError(f"{name}: negative {kind} count")
        return [{"id": i} for i in range(1, count + 1)]
    if isinstance(raw, list):
        for entry in raw:
            if not isinstance(entry, Mapping) or "id" not in entry:
                raise ScenarioConfigError(f"{name}: every {kind} entry needs an id, got {entry!r}")
        return list(raw)
    if raw is None:
        return []
    raise ScenarioConfigError(f"{name}: {kind} block must be a mapping or a list")


def _power_table(power: Mapping[str, Any], kind: str, name: str) -> Mapping[str, Any]:
    table = power.get(kind, {})
    if not isinstance(table, Mapping):
        raise ScenarioConfigError(f"{name}: power.{kind} must be a mapping of state -> watts")
    for key in table:
        if isinstance(key, bool):
            # YAML 1.1 reads bare OFF/ON/YES/NO keys as booleans
            raise ScenarioConfigError(
                f"{name}: power.{kind} has the boolean key {key!r}; YAML reads a bare OFF, ON, YES or NO "
                f"as a boolean, quote the state name (\"OFF\": 0.0)"
            )
        if not isinstance(key, str):
            raise ScenarioConfigError(f"{name}: power.{kind} state names must be strings, got {key!r}")
    return table


def _flows(raw, ues: List[UeSpec], template: Mapping[str, Any], duration_us: SimTime, name: str) -> List[FlowSpec]:
    if raw in (None, "none"):
        requests: List[Mapping[str, Any]] = []
    elif raw == "all":
        requests = [{"ue": u.id} for u in ues]
    elif isinstance(raw, list):
        requests = list(raw)
    else:
        raise ScenarioConfigError(f"{name}: flows must be 'all', 'none' or a list, got {raw!r}")

    flows = []
    for request in requests:
        entry = _merge(template, request)
        if "ue" not in entry:
            raise ScenarioConfigError(f"{name}: flow entry without ue: {request!r}")
        start = _seconds(entry, "start_s", name)
        stop = min(_seconds(entry, "stop_s", name), duration_us) if "stop_s" in entry else duration_us
        if start > duration_us:
            logger.debug("%s: flow for ue%s starts after the run ends; skipped", name, entry["ue"])
            continue
        try:
            flows.append(
                FlowSpec(
                    ue=int(entry["ue"]),
                    packet_size=int(entry["packet_size"]),
                    inter_packet_interval_us=_seconds(entry, "interval_s", name),
                    start_us=start,
                    stop_us=stop,
                )
            )
        except ValueError as e:
            raise ScenarioConfigError(f"{name}: {e}") from e
    return flows


def build_config(
    entry: Mapping[str, Any],
    defaults: Mapping[str, Any],
    name: str,
    seed: int,
    duration_s: Optional[float] = None,
) -> ScenarioConfig:
    """Turn one preset (or config-file) entry, merged over `defaults`, into a ScenarioConfig."""
    data = _merge(defaults, entry)
    if duration_s is not None:
        data["duration_s"] = duration_s
    try:
        policy = PolicyKind(data.get("policy", PolicyKind.ALWAYS_ON.value))
    except ValueError:
        raise ScenarioConfigError(f"{name}: unknown policy {data.get('policy')!r}") from None

    duration_us = _seconds(data, "duration_s", name)
    try:
        area = Bounds(**{k: float(v) for k, v in data.get("area", {}).items()})
    except (TypeError, TopologyError) as e:
        raise ScenarioConfigError(f"{name}: bad area: {e}") from e

    bss = [BsSpec(id=int(e["id"]), position=_position(e)) for e in _nodes(data.get("bss"), "bs", name)]
    mobility_default = data.get("mobility", {})
    ues = [
        UeSpec(
            id=int(e["id"]),
            position=_position(e),
            mobility=_mobility(_merge(mobility_default, e.get("mobility", {})), area, name),
        )
        for e in _nodes(data.get("ues"), "ue", name)
    ]

    template = data.get("flow", {})
    flows = _flows(data.get("flows"), ues, template, duration_us, name)

    t = data.get("thresholds", {})
    thresholds = Thresholds(
        deep_sleep_us=_seconds(t, "deep_sleep_s", name),
        idle_off_us=_seconds(t, "idle_off_s", name),
        tick_us=_seconds(t, "tick_s", name),
        ho_ctrl_us=_seconds(t, "ho_ctrl_s", name),
        mobility_step_us=_seconds(t, "mobility_step_s", name),
    )

    power = data.get("power", {})
    ue_watts, bs_watts = _power_table(power, "ue", name), _power_table(power, "bs", name)
    try:
        ue_power = PowerProfile.from_watts(UePhyState, ue_watts)
        bs_power = PowerProfile.from_watts(
            BsPhyState, bs_watts, deep_sleep_threshold_us=thresholds.deep_sleep_us
        )
        service_raw = data.get("service", {})
        service = ServiceModel(
            data_rate_bps=int(service_raw.get("data_rate_bps", 100_000_000)),
            ctrl_overhead_us=seconds_to_us(service_raw.get("ctrl_overhead_s", 0.0002)),
        )
    except ValueError as e:
        raise ScenarioConfigError(f"{name}: {e}") from e

    random_off_raw = data.get("random_off", {})
    random_off = RandomOffParams(
        max_start_s=int(random_off_raw.get("max_start_s", 8)),
        window_s=int(random_off_raw.get("window_s", 2)),
    )

    return ScenarioConfig(
        name=name,
        policy=policy,
        duration_us=duration_us,
        area=area,
        seed=int(seed),
        bss=tuple(bss),
        ues=tuple(ues),
        flows=tuple(flows),
        ue_power=ue_power,
        bs_power=bs_power,
        service=service,
        thresholds=thresholds,
        random_off=random_off,
        flow_start_jitter_us=seconds_to_us(template.get("start_jitter_s", 0)),
    )


def load_presets(path: Optional[str] = None) -> Dict[str, Any]:
    data = read_yaml(path or Config.PRESETS_PATH)
    if "presets" not in data:
        raise ScenarioConfigError(f"No presets defined in {path or Config.PRESETS_PATH}")
    return data


def preset(name: str, seed: int = Config.DEFAULT_SEED, duration_s: Optional[float] = None,
           path: Optional[str] = None) -> ScenarioConfig:
    data = load_presets(path)
    presets = data["presets"]
    if name not in presets:
        raise ScenarioConfigError(f"Unknown preset {name!r}; choose one of {sorted(presets)}")
    logger.debug("Resolving preset %s (seed=%s)", name, seed)
    return build_config(presets[name], data.get("defaults", {}), name, seed, duration_s)


def load_config_file(path: str, seed: Optional[int] = None, duration_s: Optional[float] = None,
                     presets_path: Optional[str] = None) -> ScenarioConfig:
    """
    Load a user scenario file. It uses the preset schema; a `preset:` key names a preset to
    start from, anything left out falls back to the shared defaults. Explicit `seed` and
    `duration_s` arguments (from the command line) win over the file.
    """
    raw = read_yaml(path)
    if not isinstance(raw, Mapping):
        raise ScenarioConfigError(f"{path}: top level must be a mapping")
    data = load_presets(presets_path)
    entry: Dict[str, Any] = {}
    base = raw.get("preset")
    if base is not None:
        if base not in data["presets"]:
            raise ScenarioConfigError(f"{path}: unknown preset {base!r}")
        entry = _merge(entry, data["presets"][base])
    entry = _merge(entry, {k: v for k, v in raw.items() if k not in ("preset", "seed", "name")})
    name = str(raw.get("name") or base or "custom")
    if seed is None:
        seed = int(raw.get("seed", Config.DEFAULT_SEED))
    return build_config(entry, data.get("defaults", {}), name, seed, duration_s)
