import math
from dataclasses import replace

import numpy as np
import pytest

from perch_errors import GeometryError, NoCollisionCourse, NumericalDivergence, SwingWithoutContact
from robot_geometry import (
    PadSide,
    derive_dimensionless,
    flush_pitch,
    hip_offset,
    leg_direction,
    pad_offset,
    rotation,
    world_points,
)
from sim_core import (
    GRAVITY,
    ApproachCondition,
    ContactKind,
    Phase,
    SimState,
    SurfaceSpec,
    approach_state,
    begin_swing,
    check_finite,
    closing_speed,
    detect_contacts,
    mechanical_energy,
    pinned_state,
    realistic_start,
    record_distances,
    step_approach,
    step_maneuver,
    step_swing,
    swing_energy,
    trajectory_rows,
    trigger,
    with_phase,
)


def free_state(position=(0.0, 0.0), velocity=(0.0, 0.0), pitch=0.0, pitch_rate=0.0):
    return SimState(np.array(position, dtype=float), np.array(velocity, dtype=float), pitch, pitch_rate,
                    0.0, 0.0, 0.0, Phase.ROTATION, 0.0)


def keep_swinging(state, geom, surface, dt):
    """One swing step with the terminal-phase checks ignored"""
    return replace(step_swing(state, geom, surface, dt), phase=Phase.SWING)


def angular_momentum_about(state, geom, pivot):
    r = state.position - pivot
    return geom.mass * float(r[0] * state.velocity[1] - r[1] * state.velocity[0]) + geom.inertia_yy * state.pitch_rate


# --- surface and approach -------------------------------------------------

def test_surface_frames():
    ceiling, wall, ground = SurfaceSpec(0.0), SurfaceSpec(math.pi / 2), SurfaceSpec(math.pi)
    np.testing.assert_allclose(ceiling.normal, [0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(wall.normal, [-1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(ground.normal, [0.0, 1.0], atol=1e-12)
    assert ceiling.signed_distance(np.array([0.3, -0.5])) == pytest.approx(0.5)
    np.testing.assert_allclose(wall.project(np.array([-0.4, 0.2])), [0.0, 0.2], atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    {"theta_plane": -0.1},
    {"theta_plane": 3.5},
    {"theta_plane": 0.0, "contact_epsilon": 0.0},
    {"theta_plane": 0.0, "contact_epsilon": 0.02, "attach_range": 0.01},
])
def test_invalid_surface(kwargs):
    with pytest.raises(GeometryError):
        SurfaceSpec(**kwargs)


@pytest.mark.parametrize("theta_deg,angle_deg", [(0, 60), (0, 90), (45, 30), (90, 0), (135, -30), (180, -80)])
def test_approach_reaches_anchor_at_predicted_time(theta_deg, angle_deg):
    surface = SurfaceSpec(math.radians(theta_deg), anchor_point=(0.2, -0.1))
    condition = ApproachCondition(2.0, math.radians(angle_deg), start_distance=1.0)
    start = approach_state(condition, surface, 0.0)
    assert surface.signed_distance(start.position) == pytest.approx(1.0)
    t_hit = 1.0 / closing_speed(condition.velocity, surface)
    np.testing.assert_allclose(approach_state(condition, surface, t_hit).position, surface.anchor_point, atol=1e-12)
    assert start.phase == Phase.APPROACH and start.pitch == 0.0


def test_approach_away_from_plane_has_no_collision_course(ceiling):
    with pytest.raises(NoCollisionCourse):
        approach_state(ApproachCondition(2.0, math.radians(-30.0)), ceiling, 0.0)
    with pytest.raises(NoCollisionCourse):
        approach_state(ApproachCondition(0.0, math.radians(60.0)), ceiling, 0.0)
    # parallel to the wall
    with pytest.raises(NoCollisionCourse):
        approach_state(ApproachCondition(2.0, math.radians(90.0)), SurfaceSpec(math.pi / 2), 0.0)


def test_idealized_approach_step_matches_closed_form(geom, ceiling):
    condition = ApproachCondition(3.0, math.radians(70.0))
    state = approach_state(condition, ceiling, 0.0)
    for _ in range(250):
        state = step_approach(state, condition, ceiling, geom, 1e-3)
    np.testing.assert_allclose(state.position, approach_state(condition, ceiling, 0.25).position, atol=1e-12)


def test_realistic_approach_converges_to_reference(geom, ceiling):
    condition = ApproachCondition(2.0, math.radians(60.0), start_distance=5.0)
    state = realistic_start(condition, ceiling, geom)
    assert state.motor_thrust_state == pytest.approx(geom.mass * GRAVITY)
    for _ in range(2000):
        state = step_approach(state, condition, ceiling, geom, 1e-3, realistic=True)
    assert state.velocity[1] == pytest.approx(condition.velocity[1], abs=1e-2)
    assert state.velocity[0] == pytest.approx(condition.velocity[0])


# --- rotation phase -------------------------------------------------------

def test_free_fall(geom):
    state = free_state()
    for _ in range(1000):
        state = step_maneuver(state, 0.0, geom, 1e-3)
    assert state.time == pytest.approx(1.0)
    assert state.position[1] == pytest.approx(-0.5 * GRAVITY, rel=1e-9)
    assert state.velocity[1] == pytest.approx(-GRAVITY, rel=1e-9)


def test_constant_angular_acceleration_pitch(geom):
    state = free_state()
    for _ in range(100):
        state = step_maneuver(state, 90.0, geom, 1e-3)
    assert state.pitch == pytest.approx(0.45, rel=1e-9)


def test_angular_acceleration_stops_after_quarter_turn(geom):
    dt = 1e-3
    state = free_state()
    rates = []
    for _ in range(500):
        state = step_maneuver(state, 90.0, geom, dt)
        rates.append(state.pitch_rate)
    t_cut = math.sqrt(math.pi / 90.0)
    assert rates[-1] == rates[-100]
    assert 90.0 * t_cut <= rates[-1] <= 90.0 * (t_cut + dt) + 1e-9


def test_negative_rotation_command_is_symmetric(geom):
    up, down = free_state(), free_state()
    for _ in range(300):
        up = step_maneuver(up, 60.0, geom, 1e-3)
        down = step_maneuver(down, -60.0, geom, 1e-3)
    assert down.pitch == pytest.approx(-up.pitch)


def test_rotation_command_above_limit(geom):
    with pytest.raises(ValueError):
        step_maneuver(free_state(), geom.alpha_max * 1.01, geom, 1e-3)


def test_ballistic_energy_is_conserved(geom):
    state = free_state(velocity=(1.5, 2.0), pitch_rate=4.0)
    e0 = mechanical_energy(state, geom)
    for _ in range(1000):
        state = step_maneuver(state, 0.0, geom, 1e-3)
    assert abs(mechanical_energy(state, geom) - e0) < 1e-3


def test_non_finite_state_raises():
    with pytest.raises(NumericalDivergence):
        check_finite(free_state(velocity=(math.nan, 0.0)))


def test_phase_transitions(geom):
    state = free_state()
    assert with_phase(state, Phase.SETTLED).phase == Phase.SETTLED
    with pytest.raises(ValueError):
        with_phase(state, Phase.APPROACH)
    with pytest.raises(ValueError):
        with_phase(with_phase(state, Phase.FAILED), Phase.SWING)
    with pytest.raises(ValueError):
        step_maneuver(replace(state, phase=Phase.APPROACH), 0.0, geom, 1e-3)
    approach = replace(state, phase=Phase.APPROACH)
    assert trigger(approach).phase == Phase.ROTATION


# --- contacts and distances -------------------------------------------------

def test_pad_within_magnet_range_is_captured(geom, ceiling):
    pad = pad_offset(geom, PadSide.FRONT)
    # upside down: pads point at the ceiling
    pitch = math.pi
    pad_up = float((rotation(pitch) @ pad)[1])
    state = free_state(position=(0.0, -pad_up - 0.005), pitch=pitch)
    kinds = {e.kind for e in detect_contacts(state, geom, ceiling)}
    assert kinds == {ContactKind.PAD_FRONT, ContactKind.PAD_REAR}


def test_body_and_propeller_contacts(geom, ceiling):
    state = free_state(position=(0.0, -0.001))
    kinds = {e.kind for e in detect_contacts(state, geom, ceiling)}
    assert ContactKind.BODY in kinds
    assert ContactKind.PROPELLER in kinds
    assert ContactKind.PAD_FRONT not in kinds


def test_no_contact_far_from_plane(geom, ceiling):
    assert detect_contacts(free_state(position=(0.0, -1.0)), geom, ceiling) == []


def test_distance_trace(geom, ceiling):
    states = [free_state(position=(0.0, -z)) for z in (1.0, 0.6, 0.8)]
    trace = record_distances(states, geom, ceiling)
    assert len(trace) == 3
    assert trace.min_d_prop == pytest.approx(0.6 - geom.prop_offsets[0][1])
    assert trace.min_d_pad > trace.min_d_prop
    with pytest.raises(ValueError):
        record_distances([], geom, ceiling)
    rows = trajectory_rows(states, geom, ceiling)
    assert rows[1][2] == pytest.approx(-0.6)


# --- body swing -----------------------------------------------------------

def test_swing_requires_pivot(geom, ceiling):
    state = replace(free_state(), phase=Phase.SWING)
    with pytest.raises(SwingWithoutContact):
        step_swing(state, geom, ceiling, 1e-3)
    with pytest.raises(SwingWithoutContact):
        swing_energy(state, geom)


@pytest.mark.parametrize("stiffness", [math.inf, 1.4, 0.0])
def test_capture_conserves_angular_momentum_about_pad(geom, ceiling, stiffness):
    geom = replace(geom, hip_stiffness=stiffness)
    state = free_state(position=(0.0, -0.3), velocity=(0.8, 2.5), pitch=2.2, pitch_rate=12.0)
    pivot = world_points(geom, state.position, state.pitch).pads()[PadSide.FRONT]
    before = angular_momentum_about(state, geom, pivot)
    swinging = begin_swing(state, geom, ceiling, PadSide.FRONT)
    assert swinging.phase == Phase.SWING
    np.testing.assert_allclose(swinging.pivot, pivot)
    np.testing.assert_allclose(swinging.position, state.position, atol=1e-12)
    assert angular_momentum_about(swinging, geom, pivot) == pytest.approx(before, rel=1e-9)


def test_rigid_pendulum_period(geom):
    geom = replace(geom, hip_stiffness=math.inf)
    arm = pad_offset(geom, PadSide.FRONT)
    r = float(np.hypot(*arm))
    # pad straight above the COM
    p_eq = 0.5 * math.pi - math.atan2(arm[1], arm[0])
    surface = SurfaceSpec(0.0, anchor_point=(0.0, 10.0))
    dt = 1e-3
    state = pinned_state(geom, PadSide.FRONT, np.zeros(2), p_eq + 0.05)
    crossings, prev = [], state.pitch - p_eq
    for _ in range(20000):
        state = keep_swinging(state, geom, surface, dt)
        cur = state.pitch - p_eq
        if prev < 0 <= cur:
            crossings.append(state.time)
        prev = cur
    expected = 2 * math.pi * math.sqrt((geom.mass * r * r + geom.inertia_yy) / (geom.mass * GRAVITY * r))
    measured = float(np.mean(np.diff(crossings)))
    assert measured == pytest.approx(expected, rel=0.01)


def test_undamped_free_hinge_conserves_energy(geom):
    geom = replace(geom, hip_stiffness=0.0, hip_damping_ratio=0.0)
    surface = SurfaceSpec(0.0, anchor_point=(0.0, 10.0))
    state = pinned_state(geom, PadSide.FRONT, np.zeros(2), 2.0)
    e0 = swing_energy(state, geom)
    scale = geom.mass * GRAVITY * derive_dimensionless(geom).l_eff
    worst = 0.0
    for _ in range(10000):
        state = keep_swinging(state, geom, surface, 1e-4)
        worst = max(worst, abs(swing_energy(state, geom) - e0))
    assert worst / scale < 5e-3


def test_damped_hinge_dissipates(geom):
    geom = replace(geom, hip_stiffness=0.4, hip_damping_ratio=1.0)
    surface = SurfaceSpec(0.0, anchor_point=(0.0, 10.0))
    state = pinned_state(geom, PadSide.FRONT, np.zeros(2), 2.0, pitch_rate=-6.0)
    scale = geom.mass * GRAVITY * derive_dimensionless(geom).l_eff
    energies = [swing_energy(state, geom)]
    for _ in range(5000):
        state = keep_swinging(state, geom, surface, 1e-4)
        energies.append(swing_energy(state, geom))
    # semi-implicit steps may lift the energy by O(dt^2) where the hip rate crosses zero
    assert np.max(np.diff(energies)) <= 1e-5 * scale
    assert energies[-1] < energies[0]


@pytest.mark.parametrize("stiffness,damping", [(math.inf, 0.4), (1.4, 0.4), (0.0, 0.0)])
def test_pinned_pad_stays_on_the_pivot(geom, stiffness, damping):
    geom = replace(geom, hip_stiffness=stiffness, hip_damping_ratio=damping)
    surface = SurfaceSpec(0.0, anchor_point=(0.0, 10.0))
    pivot = np.array([0.3, -0.2])
    state = pinned_state(geom, PadSide.FRONT, pivot, 2.0, pitch_rate=-4.0)
    for _ in range(1000):
        state = keep_swinging(state, geom, surface, 1e-3)
        pad = state.position + rotation(state.pitch) @ hip_offset(geom, PadSide.FRONT) \
            + geom.leg_length * rotation(state.pitch + state.hip_angle) @ leg_direction(geom, PadSide.FRONT)
        assert np.max(np.abs(pad - pivot)) < 1e-12
        np.testing.assert_array_equal(state.pivot, pivot)


def test_swing_up_to_flush_settles(geom, ceiling):
    geom = replace(geom, hip_stiffness=math.inf)
    state = pinned_state(geom, PadSide.FRONT, np.zeros(2), flush_pitch(0.0) - 0.4, pitch_rate=10.0)
    for _ in range(2000):
        state = step_swing(state, geom, ceiling, 1e-4)
        if state.phase != Phase.SWING:
            break
    assert state.phase == Phase.SETTLED
    assert not state.struck


def test_swing_away_from_plane_fails(geom, ceiling):
    geom = replace(geom, hip_stiffness=math.inf)
    state = pinned_state(geom, PadSide.FRONT, np.zeros(2), flush_pitch(0.0) - 0.3, pitch_rate=-10.0)
    for _ in range(5000):
        state = step_swing(state, geom, ceiling, 1e-4)
        if state.phase != Phase.SWING:
            break
    assert state.phase == Phase.FAILED
