"""
=============================================================================
SIM CORE - FIXED-STEP PLANAR LANDING SIMULATION
=============================================================================

Planar rigid-body simulation of a perching sequence on a plane of any
orientation: prescribed approach, ballistic flight with a constant commanded
angular acceleration, magnetic footpad capture, and the pinned body-swing with
a torsional spring-damper hip.

Features:
- Idealized (closed form) and motor-lag "realistic" approach
- Ballistic rotation maneuver with the 90 degree acceleration cut-off
- Pad / propeller / body contact detection with the magnet capture range
- Pinned double-pendulum swing (massless leg link, hip spring-damper)
- Distance traces for footpad and propeller clearance

World frame: +x forward, +z up, gravity along -z.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple, Any, Sequence

import numpy as np

from perch_errors import NoCollisionCourse, NumericalDivergence, SwingWithoutContact, GeometryError
from robot_geometry import (
    RobotGeometry,
    PadSide,
    rotation,
    perp,
    pad_offset,
    hip_offset,
    leg_direction,
    world_points,
    derive_dimensionless,
    hip_damping_coefficient,
)

logger = logging.getLogger(__name__)

GRAVITY = 9.81
DEFAULT_DT = 1e-3
# Fraction of L_eff the free pad may recede past its closest approach before the swing counts as a hang.
DETACH_MARGIN_FRACTION = 0.25


class Phase(Enum):
    """Landing sequence phases"""
    APPROACH = "approach"
    ROTATION = "rotation"
    SWING = "swing"
    SETTLED = "settled"
    FAILED = "failed"


LEGAL_TRANSITIONS: Dict[Phase, Tuple[Phase, ...]] = {
    Phase.APPROACH: (Phase.APPROACH, Phase.ROTATION, Phase.FAILED),
    Phase.ROTATION: (Phase.ROTATION, Phase.SWING, Phase.SETTLED, Phase.FAILED),
    Phase.SWING: (Phase.SWING, Phase.SETTLED, Phase.FAILED),
    Phase.SETTLED: (Phase.SETTLED,),
    Phase.FAILED: (Phase.FAILED,),
}


class ContactKind(Enum):
    PAD_FRONT = "pad_front"
    PAD_REAR = "pad_rear"
    BODY = "body"
    PROPELLER = "propeller"


PAD_CONTACT = {PadSide.FRONT: ContactKind.PAD_FRONT, PadSide.REAR: ContactKind.PAD_REAR}


@dataclass(frozen=True)
class SurfaceSpec:
    """Landing plane: 0 = inverted ceiling, pi/2 = wall, pi = ground"""
    theta_plane: float
    anchor_point: Tuple[float, float] = (0.0, 0.0)
    contact_epsilon: float = 0.002
    attach_range: float = 0.010

    def __post_init__(self):
        if not (0.0 <= self.theta_plane <= math.pi):
            raise GeometryError(f"theta_plane must lie in [0, pi], got {self.theta_plane}")
        if not (self.contact_epsilon > 0):
            raise GeometryError("contact_epsilon must be positive")
        if not (self.attach_range >= self.contact_epsilon):
            raise GeometryError("attach_range must be >= contact_epsilon")

    @property
    def normal(self) -> np.ndarray:
        """Unit normal pointing from the plane into free space"""
        return np.array([-math.sin(self.theta_plane), -math.cos(self.theta_plane)])

    @property
    def tangent(self) -> np.ndarray:
        return np.array([math.cos(self.theta_plane), -math.sin(self.theta_plane)])

    def signed_distance(self, point: np.ndarray) -> float:
        return float(self.normal @ (np.asarray(point, dtype=float) - np.asarray(self.anchor_point)))

    def project(self, point: np.ndarray) -> np.ndarray:
        p = np.asarray(point, dtype=float)
        return p - self.signed_distance(p) * self.normal

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta_plane": self.theta_plane,
            "anchor_point": list(self.anchor_point),
            "contact_epsilon": self.contact_epsilon,
            "attach_range": self.attach_range,
        }


@dataclass(frozen=True)
class ApproachCondition:
    """Flight speed, flight angle above the horizon, and starting distance of the body origin"""
    speed: float
    flight_angle: float
    start_distance: float = 1.2

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.flight_angle), math.sin(self.flight_angle)])


@dataclass(frozen=True)
class SimState:
    """Planar rigid body + motor + hip + contact phase at one instant"""
    position: np.ndarray
    velocity: np.ndarray
    pitch: float
    pitch_rate: float
    motor_thrust_state: float
    hip_angle: float
    hip_rate: float
    phase: Phase
    time: float
    rotation_since_trigger: float = 0.0
    pivot: Optional[np.ndarray] = None
    pinned_pad: Optional[PadSide] = None
    free_pad_min_distance: float = math.inf
    struck: bool = False


@dataclass(frozen=True)
class ContactEvent:
    kind: ContactKind
    time: float
    point: np.ndarray
    impact_pitch: float


@dataclass
class DistanceTrace:
    """Per-sample perpendicular clearances of the nearest pad and prop point"""
    times: List[float] = field(default_factory=list)
    d_pad: List[float] = field(default_factory=list)
    d_prop: List[float] = field(default_factory=list)

    def append(self, time: float, d_pad: float, d_prop: float):
        self.times.append(time)
        self.d_pad.append(d_pad)
        self.d_prop.append(d_prop)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def min_d_pad(self) -> float:
        return min(self.d_pad) if self.d_pad else math.inf

    @property
    def min_d_prop(self) -> float:
        return min(self.d_prop) if self.d_prop else math.inf


def check_finite(state: SimState) -> SimState:
    values = [state.pitch, state.pitch_rate, state.motor_thrust_state, state.hip_angle,
              state.hip_rate, state.time, *state.position, *state.velocity]
    if not all(math.isfinite(v) for v in values):
        raise NumericalDivergence(f"numerical divergence at t={state.time:.4f}s in phase {state.phase.value}")
    return state


def with_phase(state: SimState, phase: Phase, **changes: Any) -> SimState:
    if phase not in LEGAL_TRANSITIONS[state.phase]:
        raise ValueError(f"illegal phase transition {state.phase.value} -> {phase.value}")
    return replace(state, phase=phase, **changes)


# ============================================================================
# APPROACH
# ============================================================================

def closing_speed(velocity: np.ndarray, surface: SurfaceSpec) -> float:
    """V_perp: velocity component toward the plane"""
    return float(-(surface.normal @ velocity))


def approach_state(condition: ApproachCondition, surface: SurfaceSpec, t: float) -> SimState:
    """Constant-velocity collision course aimed at the surface anchor, hover attitude"""
    if not (condition.speed > 0):
        raise NoCollisionCourse("no collision course: speed must be positive")
    velocity = condition.velocity
    v_perp = closing_speed(velocity, surface)
    if v_perp <= 1e-12:
        raise NoCollisionCourse("no collision course")
    t_hit = condition.start_distance / v_perp
    start = np.asarray(surface.anchor_point, dtype=float) - velocity * t_hit
    return SimState(
        position=start + velocity * t,
        velocity=velocity.copy(),
        pitch=0.0,
        pitch_rate=0.0,
        motor_thrust_state=0.0,
        hip_angle=0.0,
        hip_rate=0.0,
        phase=Phase.APPROACH,
        time=t,
    )


def realistic_start(condition: ApproachCondition, surface: SurfaceSpec, geom: RobotGeometry) -> SimState:
    """Start of a motor-lag approach: hover thrust, vertical channel at rest"""
    state = approach_state(condition, surface, 0.0)
    velocity = np.array([state.velocity[0], 0.0])
    return replace(state, velocity=velocity, motor_thrust_state=geom.mass * GRAVITY)


def step_approach(
    state: SimState,
    condition: ApproachCondition,
    surface: SurfaceSpec,
    geom: RobotGeometry,
    dt: float,
    realistic: bool = False,
    velocity_gain: float = 5.0,
) -> SimState:
    """Advance the pre-trigger approach by one physics step"""
    if not realistic:
        return approach_state(condition, surface, state.time + dt)
    v_ref = condition.velocity
    thrust_cmd = max(0.0, geom.mass * (GRAVITY + velocity_gain * (v_ref[1] - state.velocity[1])))
    thrust = state.motor_thrust_state + dt * (thrust_cmd - state.motor_thrust_state) / geom.motor_time_constant
    vz = state.velocity[1] + dt * (thrust / geom.mass - GRAVITY)
    velocity = np.array([v_ref[0], vz])
    return check_finite(replace(
        state,
        position=state.position + dt * velocity,
        velocity=velocity,
        motor_thrust_state=thrust,
        time=state.time + dt,
    ))


# ============================================================================
# ROTATION MANEUVER
# ============================================================================

def trigger(state: SimState) -> SimState:
    return with_phase(state, Phase.ROTATION, rotation_since_trigger=0.0)


def step_maneuver(state: SimState, alpha_cmd: float, geom: RobotGeometry, dt: float) -> SimState:
    """Ballistic translation plus constant angular acceleration until 90 degrees have been turned.

    Both accelerations are constant over a step, so the update integrates them exactly.
    """
    if state.phase != Phase.ROTATION:
        raise ValueError(f"step_maneuver requires the rotation phase, got {state.phase.value}")
    if abs(alpha_cmd) > geom.alpha_max * (1 + 1e-12):
        raise ValueError(f"|alpha_cmd|={abs(alpha_cmd):.3f} exceeds alpha_max={geom.alpha_max:.3f}")
    if not (dt > 0):
        raise ValueError("dt must be positive")
    accel = np.array([0.0, -GRAVITY])
    position = state.position + state.velocity * dt + 0.5 * accel * dt * dt
    velocity = state.velocity + accel * dt
    alpha = alpha_cmd if abs(state.rotation_since_trigger) < 0.5 * math.pi else 0.0
    d_pitch = state.pitch_rate * dt + 0.5 * alpha * dt * dt
    return check_finite(replace(
        state,
        position=position,
        velocity=velocity,
        pitch=state.pitch + d_pitch,
        pitch_rate=state.pitch_rate + alpha * dt,
        rotation_since_trigger=state.rotation_since_trigger + d_pitch,
        time=state.time + dt,
    ))


def mechanical_energy(state: SimState, geom: RobotGeometry) -> float:
    """Free-flight energy (gravity reference at z = 0)"""
    v = state.velocity
    return 0.5 * geom.mass * float(v @ v) + 0.5 * geom.inertia_yy * state.pitch_rate ** 2 \
        + geom.mass * GRAVITY * float(state.position[1])


# ============================================================================
# CONTACTS AND DISTANCES
# ============================================================================

def point_distances(state: SimState, geom: RobotGeometry, surface: SurfaceSpec) -> Dict[str, Any]:
    points = world_points(geom, state.position, state.pitch)
    pads = {side: surface.signed_distance(p) for side, p in points.pads().items()}
    props = [surface.signed_distance(p) for p in points.prop_points]
    return {
        "points": points,
        "pads": pads,
        "props": props,
        "body": surface.signed_distance(state.position),
    }


def clearances(state: SimState, geom: RobotGeometry, surface: SurfaceSpec) -> Tuple[float, float]:
    """(nearest pad distance, nearest prop distance)"""
    dist = point_distances(state, geom, surface)
    return min(dist["pads"].values()), min(dist["props"])


def detect_contacts(state: SimState, geom: RobotGeometry, surface: SurfaceSpec) -> List[ContactEvent]:
    """Contacts at this instant. Pads are captured within the magnet range, props and body at contact_epsilon."""
    dist = point_distances(state, geom, surface)
    points = dist["points"]
    events: List[ContactEvent] = []
    for side, d in dist["pads"].items():
        if d <= surface.attach_range:
            events.append(ContactEvent(PAD_CONTACT[side], state.time, surface.project(points.pads()[side]), state.pitch))
    for p, d in zip(points.prop_points, dist["props"]):
        if d <= surface.contact_epsilon:
            events.append(ContactEvent(ContactKind.PROPELLER, state.time, surface.project(p), state.pitch))
    if dist["body"] <= surface.contact_epsilon:
        events.append(ContactEvent(ContactKind.BODY, state.time, surface.project(state.position), state.pitch))
    return events


def record_distances(trajectory: Sequence[SimState], geom: RobotGeometry, surface: SurfaceSpec) -> DistanceTrace:
    """Pad and prop clearance for every sample of a trajectory"""
    if len(trajectory) == 0:
        raise ValueError("record_distances needs a nonempty trajectory")
    trace = DistanceTrace()
    for state in trajectory:
        d_pad, d_prop = clearances(state, geom, surface)
        trace.append(state.time, d_pad, d_prop)
    return trace


# ============================================================================
# BODY SWING ABOUT THE PINNED PAD
# ============================================================================

def _is_rigid(geom: RobotGeometry) -> bool:
    return math.isinf(geom.hip_stiffness)


def _swing_frames(geom: RobotGeometry, side: PadSide, pitch: float, hip_angle: float):
    u = rotation(pitch + hip_angle) @ leg_direction(geom, side)
    w = rotation(pitch) @ hip_offset(geom, side)
    return u, w


def swing_body_state(geom: RobotGeometry, side: PadSide, pivot: np.ndarray, pitch: float, pitch_rate: float,
                     hip_angle: float, hip_rate: float) -> Tuple[np.ndarray, np.ndarray]:
    """COM position and velocity implied by the swing coordinates"""
    u, w = _swing_frames(geom, side, pitch, hip_angle)
    L = geom.leg_length
    position = pivot - L * u - w
    link_rate = pitch_rate + hip_rate
    velocity = -L * link_rate * perp(u) - pitch_rate * perp(w)
    return position, velocity


def _swing_mass_matrix(geom: RobotGeometry, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    m, L = geom.mass, geom.leg_length
    coupling = m * L * float(u @ w)
    return np.array([[m * L * L, coupling], [coupling, m * float(w @ w) + geom.inertia_yy]])


def begin_swing(state: SimState, geom: RobotGeometry, surface: SurfaceSpec, side: PadSide) -> SimState:
    """Inelastic pad capture: the pad becomes a pivot and momentum is projected onto the swing coordinates"""
    pivot = world_points(geom, state.position, state.pitch).pads()[side]
    m, inertia = geom.mass, geom.inertia_yy
    v, omega = state.velocity, state.pitch_rate
    if _is_rigid(geom):
        arm = rotation(state.pitch) @ pad_offset(geom, side)
        b = -perp(arm)
        pitch_rate = (m * float(b @ v) + inertia * omega) / (m * float(arm @ arm) + inertia)
        link_rate = pitch_rate
    else:
        u, w = _swing_frames(geom, side, state.pitch, 0.0)
        a = -geom.leg_length * perp(u)
        b = -perp(w)
        momentum = np.array([m * float(a @ v), m * float(b @ v) + inertia * omega])
        link_rate, pitch_rate = np.linalg.solve(_swing_mass_matrix(geom, u, w), momentum)
    position, velocity = swing_body_state(geom, side, pivot, state.pitch, pitch_rate, 0.0, link_rate - pitch_rate)
    other = PadSide.REAR if side == PadSide.FRONT else PadSide.FRONT
    free_distance = surface.signed_distance(world_points(geom, position, state.pitch).pads()[other])
    logger.debug(f"[SimCore] {side.value} pad captured at t={state.time:.3f}s, pitch={math.degrees(state.pitch):.1f} deg")
    return check_finite(with_phase(
        state,
        Phase.SWING,
        position=position,
        velocity=velocity,
        pitch_rate=float(pitch_rate),
        hip_angle=0.0,
        hip_rate=float(link_rate - pitch_rate),
        pivot=pivot,
        pinned_pad=side,
        free_pad_min_distance=free_distance,
    ))


def _swing_accelerations(state: SimState, geom: RobotGeometry) -> Tuple[float, float]:
    """(pitch acceleration, hip acceleration) of the pinned system"""
    side = state.pinned_pad
    m = geom.mass
    if _is_rigid(geom):
        arm = rotation(state.pitch) @ pad_offset(geom, side)
        torque = m * GRAVITY * float(arm[0])
        return torque / (m * float(arm @ arm) + geom.inertia_yy), 0.0
    u, w = _swing_frames(geom, side, state.pitch, state.hip_angle)
    L = geom.leg_length
    link_rate = state.pitch_rate + state.hip_rate
    spring = geom.hip_stiffness * state.hip_angle + hip_damping_coefficient(geom) * state.hip_rate
    coriolis = m * L * float(u @ perp(w))
    rhs = np.array([
        m * GRAVITY * L * u[0] - spring - coriolis * state.pitch_rate ** 2,
        m * GRAVITY * w[0] + spring + coriolis * link_rate ** 2,
    ])
    link_acc, pitch_acc = np.linalg.solve(_swing_mass_matrix(geom, u, w), rhs)
    return float(pitch_acc), float(link_acc - pitch_acc)


def step_swing(state: SimState, geom: RobotGeometry, surface: SurfaceSpec, dt: float) -> SimState:
    """One semi-implicit Euler step of the body swing, then the settle and failure checks"""
    if state.pivot is None or state.pinned_pad is None:
        raise SwingWithoutContact("swing without contact")
    if state.phase != Phase.SWING:
        raise ValueError(f"step_swing requires the swing phase, got {state.phase.value}")
    pitch_acc, hip_acc = _swing_accelerations(state, geom)
    pitch_rate = state.pitch_rate + dt * pitch_acc
    hip_rate = state.hip_rate + dt * hip_acc
    pitch = state.pitch + dt * pitch_rate
    hip_angle = state.hip_angle + dt * hip_rate
    position, velocity = swing_body_state(geom, state.pinned_pad, state.pivot, pitch, pitch_rate, hip_angle, hip_rate)
    nxt = check_finite(replace(
        state,
        position=position,
        velocity=velocity,
        pitch=pitch,
        pitch_rate=pitch_rate,
        hip_angle=hip_angle,
        hip_rate=hip_rate,
        time=state.time + dt,
    ))

    dist = point_distances(nxt, geom, surface)
    other = PadSide.REAR if state.pinned_pad == PadSide.FRONT else PadSide.FRONT
    free_distance = dist["pads"][other]
    struck = nxt.struck or min(dist["props"]) <= surface.contact_epsilon or dist["body"] <= surface.contact_epsilon
    if free_distance <= surface.attach_range:
        return with_phase(nxt, Phase.SETTLED, struck=struck, free_pad_min_distance=free_distance)
    if struck:
        return with_phase(nxt, Phase.FAILED, struck=True)
    running_min = min(state.free_pad_min_distance, free_distance)
    margin = DETACH_MARGIN_FRACTION * derive_dimensionless(geom).l_eff
    if free_distance > running_min + margin:
        return with_phase(nxt, Phase.FAILED, free_pad_min_distance=running_min)
    return replace(nxt, free_pad_min_distance=running_min)


def swing_energy(state: SimState, geom: RobotGeometry) -> float:
    """Kinetic + gravitational (relative to the pivot height) + hip spring energy"""
    if state.pivot is None:
        raise SwingWithoutContact("swing without contact")
    v = state.velocity
    energy = 0.5 * geom.mass * float(v @ v) + 0.5 * geom.inertia_yy * state.pitch_rate ** 2 \
        + geom.mass * GRAVITY * float(state.position[1] - state.pivot[1])
    if not _is_rigid(geom):
        energy += 0.5 * geom.hip_stiffness * state.hip_angle ** 2
    return energy


def pinned_state(geom: RobotGeometry, side: PadSide, pivot: np.ndarray, pitch: float,
                 pitch_rate: float = 0.0, time: float = 0.0) -> SimState:
    """Swing-phase state with an undeflected hip; used for initial conditions and tests"""
    pivot = np.asarray(pivot, dtype=float)
    position, velocity = swing_body_state(geom, side, pivot, pitch, pitch_rate, 0.0, 0.0)
    return SimState(
        position=position,
        velocity=velocity,
        pitch=pitch,
        pitch_rate=pitch_rate,
        motor_thrust_state=0.0,
        hip_angle=0.0,
        hip_rate=0.0,
        phase=Phase.SWING,
        time=time,
        pivot=pivot,
        pinned_pad=side,
    )


# ============================================================================
# TRAJECTORY EXPORT
# ============================================================================

TRAJECTORY_COLUMNS = ["time", "x", "z", "pitch", "pitch_rate", "phase", "d_pad", "d_prop"]


def trajectory_rows(trajectory: Sequence[SimState], geom: RobotGeometry, surface: SurfaceSpec) -> List[List[Any]]:
    rows = []
    for state in trajectory:
        d_pad, d_prop = clearances(state, geom, surface)
        rows.append([state.time, float(state.position[0]), float(state.position[1]), state.pitch,
                     state.pitch_rate, state.phase.value, d_pad, d_prop])
    return rows
