import math
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from helper import US_PER_S
from sim_engine import RandomSource, SimTime

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class TopologyError(ValueError):
    """Invalid topology configuration (no candidate BS, unknown node, bad bounds)."""


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def distance_sq(self, other: "Position") -> float:
        dx = self.x - other.x
        dy = self.y - other.y
        return dx * dx + dy * dy


@dataclass(frozen=True)
class Bounds:
    x_min: float = 0.0
    y_min: float = 0.0
    x_max: float = 1000.0
    y_max: float = 1000.0

    def __post_init__(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise TopologyError(f"Empty area bounds: {self}")

    def contains(self, pos: Position) -> bool:
        return self.x_min <= pos.x <= self.x_max and self.y_min <= pos.y <= self.y_max


class MobilityKind(str, Enum):
    CONSTANT_POSITION = "constant_position"
    RANDOM_WALK_2D = "random_walk_2d"


@dataclass(frozen=True)
class MobilitySpec:
    kind: MobilityKind = MobilityKind.CONSTANT_POSITION
    speed: float = 0.0  # m/s
    heading_change_period_us: SimTime = US_PER_S
    bounds: Bounds = Bounds()

    def __post_init__(self):
        if self.speed < 0:
            raise TopologyError(f"Negative speed: {self.speed}")
        if self.heading_change_period_us <= 0:
            raise TopologyError(f"heading_change_period must be > 0, got {self.heading_change_period_us} us")


@dataclass(frozen=True)
class MobilityState:
    pos: Position
    heading: float
    next_heading_change: SimTime
    at: SimTime = 0


def _fold(value: float, low: float, high: float) -> Tuple[float, bool]:
    """Reflect `value` back into [low, high]; returns the folded value and whether the
    number of reflections was odd (direction flipped)."""
    span = high - low
    offset = (value - low) % (2.0 * span)
    if offset > span:
        return high - (offset - span), True
    crossings = math.floor((value - low) / span)
    return low + offset, crossings % 2 == 1


def _advance(state: MobilityState, spec: MobilitySpec, dt_us: SimTime) -> MobilityState:
    distance = spec.speed * dt_us / US_PER_S
    b = spec.bounds
    x = state.pos.x + distance * math.cos(state.heading)
    y = state.pos.y + distance * math.sin(state.heading)
    dx = math.cos(state.heading)
    dy = math.sin(state.heading)
    x, flip_x = _fold(x, b.x_min, b.x_max)
    y, flip_y = _fold(y, b.y_min, b.y_max)
    if flip_x:
        dx = -dx
    if flip_y:
        dy = -dy
    heading = state.heading
    if flip_x or flip_y:
        heading = math.atan2(dy, dx) % TWO_PI
    return replace(state, pos=Position(x, y), heading=heading, at=state.at + dt_us)


def step(state: MobilityState, spec: MobilitySpec, dt_us: SimTime, rng: RandomSource) -> MobilityState:
    """
    Advance a node by `dt_us` microseconds.

    ConstantPosition returns the state unchanged. RandomWalk2D moves at `spec.speed` along
    the heading, reflecting off the area bounds, and redraws the heading uniformly in
    [0, 2*pi) each time `next_heading_change` is reached inside the step.
    """
    if dt_us <= 0:
        raise ValueError(f"dt must be > 0, got {dt_us} us")
    if spec.kind == MobilityKind.CONSTANT_POSITION:
        return state

    end = state.at + dt_us
    current = state
    while current.next_heading_change <= end:
        leg = current.next_heading_change - current.at
        if leg > 0:
            current = _advance(current, spec, leg)
        current = replace(
            current,
            heading=rng.uniform(0.0, TWO_PI),
            next_heading_change=current.next_heading_change + spec.heading_change_period_us,
        )
    if end > current.at:
        current = _advance(current, spec, end - current.at)
    return current


def nearest_bs(ue_pos: Position, candidates: Iterable[Tuple[int, Position]]) -> int:
    """BsId at minimum Euclidean distance; ties go to the smallest id."""
    best: Optional[Tuple[float, int]] = None
    for bs_id, pos in candidates:
        key = (ue_pos.distance_sq(pos), bs_id)
        if best is None or key < best:
            best = key
    if best is None:
        raise TopologyError("nearest_bs called with no candidate base stations")
    return best[1]


def place_uniform(n: int, bounds: Bounds, rng: RandomSource) -> List[Position]:
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    out = []
    for _ in range(n):
        x = rng.uniform(bounds.x_min, bounds.x_max)
        y = rng.uniform(bounds.y_min, bounds.y_max)
        out.append(Position(x, y))
    return out


class MobilityTracker:
    """
    Owns the mobility state of every UE of a run.

    Positions are advanced lazily to the query time; each UE draws its headings from its
    own random stream, so the trajectory is independent of how often it is queried.
    """

    def __init__(self):
        self._specs: Dict[int, MobilitySpec] = {}
        self._states: Dict[int, MobilityState] = {}
        self._rngs: Dict[int, RandomSource] = {}
        self._cached_at: Optional[SimTime] = None
        self._cached: Dict[int, Position] = {}

    def add(self, ue_id: int, pos: Position, spec: MobilitySpec, rng: RandomSource, at: SimTime = 0):
        if ue_id in self._states:
            raise TopologyError(f"UE {ue_id} already tracked")
        if not spec.bounds.contains(pos):
            raise TopologyError(f"UE {ue_id} placed outside the area: {pos}")
        heading = 0.0
        if spec.kind == MobilityKind.RANDOM_WALK_2D:
            heading = rng.uniform(0.0, TWO_PI)
        self._cached_at = None
        self._specs[ue_id] = spec
        self._rngs[ue_id] = rng
        self._states[ue_id] = MobilityState(
            pos=pos,
            heading=heading,
            next_heading_change=at + spec.heading_change_period_us,
            at=at,
        )

    def advance(self, now: SimTime) -> None:
        if self._cached_at is not None and now <= self._cached_at:
            return
        for ue_id in sorted(self._states):
            state = self._states[ue_id]
            if now > state.at:
                spec = self._specs[ue_id]
                if spec.kind == MobilityKind.CONSTANT_POSITION:
                    self._states[ue_id] = replace(state, at=now)
                else:
                    self._states[ue_id] = step(state, spec, now - state.at, self._rngs[ue_id])

    def position(self, ue_id: int, now: SimTime) -> Position:
        self.advance(now)
        try:
            return self._states[ue_id].pos
        except KeyError:
            raise TopologyError(f"Unknown UE {ue_id}") from None

    def positions(self, now: SimTime) -> Dict[int, Position]:
        """Positions of every UE at `now`. The dict is shared until the clock moves; do not mutate it."""
        self.advance(now)
        if self._cached_at is None or now > self._cached_at:
            self._cached = {ue_id: s.pos for ue_id, s in self._states.items()}
            self._cached_at = now
        return self._cached
