"""Core domain types for the lane-change planner.

Coordinate convention: x is longitudinal position along the road, y is
lateral position with the ego lane (EL) centerline at y = 0 and the target
lane (TL) centerline at y = lane_width. The ego state is (x, y, v, theta)
with unicycle kinematics

    dx/dt = v cos(theta),  dy/dt = v sin(theta),  dv/dt = a,  dtheta/dt = omega.

All quantities are SI (m, m/s, m/s^2, rad, rad/s).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace


class Lane(enum.Enum):
    EL = "EL"
    TL = "TL"


class Policy(enum.Enum):
    CONST_VEL = "const-vel"
    CONST_ACC = "const-acc"
    IDM = "idm"


class Label(enum.Enum):
    WELL_POSED = "well-posed"
    ILL_POSED = "ill-posed"
    FAILURE = "failure"


# Fixed ordering used for tie-breaks and confusion-matrix axes.
LABEL_ORDER = (Label.WELL_POSED, Label.ILL_POSED, Label.FAILURE)


class ValidationError(ValueError):
    """Raised when a domain value violates its invariants."""


@dataclass(frozen=True)
class State:
    x: float
    y: float
    v: float
    theta: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.v, self.theta)


@dataclass(frozen=True)
class Control:
    a: float
    omega: float


@dataclass(frozen=True)
class Limits:
    """Box bounds on ego speed, acceleration and yaw rate."""

    v_min: float = 0.0
    v_max: float = 25.0
    a_min: float = -4.0
    a_max: float = 3.0
    omega_min: float = -0.4
    omega_max: float = 0.4

    def __post_init__(self):
        for lo, hi, name in (
            (self.v_min, self.v_max, "v"),
            (self.a_min, self.a_max, "a"),
            (self.omega_min, self.omega_max, "omega"),
        ):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValidationError(f"limits for {name} must satisfy min < max, got [{lo}, {hi}]")

    def clamp(self, u: Control) -> Control:
        return Control(
            a=min(max(u.a, self.a_min), self.a_max),
            omega=min(max(u.omega, self.omega_min), self.omega_max),
        )


@dataclass(frozen=True)
class SafetyConfig:
    """Longitudinal safety margins (center-to-center, >= vehicle length).

    delta1 guards the EL leader, delta2 the TL rear vehicle, delta3 the TL
    front vehicle.
    """

    delta1: float = 8.0
    delta2: float = 8.0
    delta3: float = 8.0

    def __post_init__(self):
        if min(self.delta1, self.delta2, self.delta3) <= 0:
            raise ValidationError("safety margins must be positive")


@dataclass(frozen=True)
class ObstacleState:
    """Obstacle vehicle: longitudinal position/speed/accel in a fixed lane."""

    x: float
    v: float
    a: float
    lane: Lane
    policy: Policy = Policy.CONST_VEL


@dataclass(frozen=True)
class Scenario:
    """One lane-change situation: ego plus leader (EL), rear and front
    vehicles in the TL."""

    ego0: State
    leader: ObstacleState
    follower: ObstacleState
    target: ObstacleState
    lane_width: float = 3.5
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    limits: Limits = field(default_factory=Limits)

    @property
    def y_target(self) -> float:
        """TL centerline; EL centerline sits at y = 0."""
        return self.lane_width

    def obstacles(self) -> tuple[ObstacleState, ObstacleState, ObstacleState]:
        return (self.leader, self.follower, self.target)


def step(s: State, u: Control, dt: float) -> State:
    """Forward-Euler propagation of the unicycle dynamics over dt."""
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    vals = (s.x, s.y, s.v, s.theta, u.a, u.omega)
    if not all(math.isfinite(c) for c in vals):
        raise ValidationError(f"non-finite state/control: {vals}")
    return State(
        x=s.x + s.v * math.cos(s.theta) * dt,
        y=s.y + s.v * math.sin(s.theta) * dt,
        v=s.v + u.a * dt,
        theta=s.theta + u.omega * dt,
    )


def validate_scenario(sc: Scenario) -> list[str]:
    """Return the list of violated invariants (empty when the scenario is valid)."""
    errors = []
    numbers = [
        sc.ego0.x, sc.ego0.y, sc.ego0.v, sc.ego0.theta,
        sc.leader.x, sc.leader.v, sc.follower.x, sc.follower.v,
        sc.target.x, sc.target.v, sc.lane_width,
    ]
    if not all(math.isfinite(c) for c in numbers):
        errors.append("non-finite field")
        return errors
    if sc.lane_width <= 0:
        errors.append("lane width not positive")
    if sc.leader.x <= sc.ego0.x:
        errors.append("leader behind ego")
    if sc.target.x <= sc.follower.x:
        errors.append("TL gap inverted")
    if sc.leader.lane is not Lane.EL:
        errors.append("leader not in EL")
    if sc.follower.lane is not Lane.TL:
        errors.append("follower not in TL")
    if sc.target.lane is not Lane.TL:
        errors.append("target not in TL")
    for name, ob in (("leader", sc.leader), ("follower", sc.follower), ("target", sc.target)):
        if ob.v < 0:
            errors.append(f"{name} speed negative")
    if not (sc.limits.v_min <= sc.ego0.v <= sc.limits.v_max):
        errors.append("ego speed outside limits")
    return errors


def require_valid(sc: Scenario) -> Scenario:
    errors = validate_scenario(sc)
    if errors:
        raise ValidationError("invalid scenario: " + "; ".join(errors))
    return sc


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed motion plan on a uniform grid.

    states has N+1 entries, controls N (the control applied over step t).
    cost is the quadratic comfort/tracking objective, None for failures.
    """

    dt: float
    states: tuple[State, ...]
    controls: tuple[Control, ...]
    label: Label
    cost: float | None = None

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise ValidationError(
                f"need len(states) == len(controls)+1, got {len(self.states)} vs {len(self.controls)}"
            )

    @property
    def n_steps(self) -> int:
        return len(self.controls)

    @property
    def tf(self) -> float:
        return self.dt * self.n_steps

    def terminal(self) -> State:
        return self.states[-1]


# --- flat-row serialization (bit-exact round trip via repr floats) ---

TRAJECTORY_FIELDS = ("t", "x", "y", "v", "theta", "a", "omega")


def trajectory_to_rows(tr: Trajectory) -> list[list[str]]:
    """One row per grid point; control columns are empty on the final row."""
    rows = []
    for i, s in enumerate(tr.states):
        t = i * tr.dt
        if i < len(tr.controls):
            u = tr.controls[i]
            rows.append([repr(t), repr(s.x), repr(s.y), repr(s.v), repr(s.theta), repr(u.a), repr(u.omega)])
        else:
            rows.append([repr(t), repr(s.x), repr(s.y), repr(s.v), repr(s.theta), "", ""])
    return rows


def trajectory_from_rows(rows: list[list[str]], dt: float, label: Label, cost: float | None) -> Trajectory:
    states = []
    controls = []
    for i, row in enumerate(rows):
        states.append(State(x=float(row[1]), y=float(row[2]), v=float(row[3]), theta=float(row[4])))
        if row[5] != "":
            controls.append(Control(a=float(row[5]), omega=float(row[6])))
    return Trajectory(dt=dt, states=tuple(states), controls=tuple(controls), label=label, cost=cost)


def clamp_state(s: State, lim: Limits) -> State:
    return replace(s, v=min(max(s.v, lim.v_min), lim.v_max))
