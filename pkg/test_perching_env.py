import json
import math
from collections import Counter

import numpy as np
import pytest

from robot_geometry import compute_phi_min, derive_dimensionless, scale_geometry
from sim_core import ApproachCondition, ContactEvent, ContactKind, Phase, SimState, closing_speed, approach_state
from perching_env import (
    REWARD_WEIGHTS,
    EnvConfig,
    NeverTriggerPolicy,
    PerchingEnv,
    TauTriggerPolicy,
    append_episode_log,
    classify_landing,
    compute_reward,
    evaluation_condition,
    flight_angle_bounds,
    max_scalar_reward,
    observe,
    run_episode,
    run_episode_with_trajectory,
    sample_training_episode,
)

PHI_MIN = math.pi / 2
E = math.e


def reward_case(tau=None, d=0.5, phi=None, legs=0, strike=False, leg=None, vel=None, **kw):
    return dict(tau_trg=tau, min_d_pad=d, phi_impact=phi, phi_min=PHI_MIN, n_legs=legs, body_or_prop_contact=strike,
                leg_vector=None if leg is None else np.array(leg, dtype=float),
                touchdown_velocity=None if vel is None else np.array(vel, dtype=float), **kw)


S2 = 1.0 / math.sqrt(2.0)

# (inputs, [r_tau, r_dpad, r_gravity, r_momentum, r_phi, r_legs])
REWARD_TABLE = [
    (reward_case(d=0.5), [0, E ** -5, 0, 0, 0, 0]),
    (reward_case(d=0.05, strike=True), [0, E ** -0.5, 0, 0, 0, -0.25]),
    (reward_case(tau=0.0, d=0.0), [1, 1, 0, 0, 0, 0]),
    (reward_case(tau=-0.1, d=-0.01), [1, 1, 0, 0, 0, 0]),
    (reward_case(tau=0.2, d=0.1), [E ** -1, E ** -1, 0, 0, 0, 0]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=4, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 4 / 3, 1]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=4, strike=True, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 4 / 3, 0.75]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=2, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 4 / 3, 0.5]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=2, strike=True, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 4 / 3, 0.25]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=3, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 4 / 3, 1]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=1, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 4 / 3, 0.5]),
    (reward_case(tau=0.1, d=-0.001, phi=PHI_MIN, legs=2, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 0.5, 0.5]),
    (reward_case(tau=0.1, d=-0.001, phi=PHI_MIN + 0.1, legs=2, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, (PHI_MIN + 0.1) / (0.75 * math.pi), 0.5]),
    (reward_case(tau=0.1, d=-0.001, phi=0.0, legs=0, strike=True, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 0, -0.25]),
    (reward_case(tau=0.1, d=-0.001, phi=-math.pi / 4, legs=2, leg=(1, 0), vel=(0, 1)),
     [E ** -0.5, 1, 1, 1, 0.25, 0.5]),
    (reward_case(tau=0.1, d=0.02, phi=math.pi, legs=0), [E ** -0.5, E ** -0.2, 0, 0, 0, 0]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=4, leg=(0, 1), vel=(0, 3)),
     [E ** -0.5, 1, 0, 0, 4 / 3, 1]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=4, leg=(1, 1), vel=(2, 0)),
     [E ** -0.5, 1, S2, S2, 4 / 3, 1]),
    (reward_case(tau=0.1, d=-0.001, phi=math.pi, legs=4, leg=(-1, 0), vel=(0, 0)),
     [E ** -0.5, 1, 1, 0, 4 / 3, 1]),
    (reward_case(tau=0.1, d=0.05, k_tau=10.0, k_dpad=20.0), [E ** -1, E ** -1, 0, 0, 0, 0]),
]


@pytest.mark.parametrize("inputs,expected", REWARD_TABLE)
def test_reward_table(inputs, expected):
    reward = compute_reward(**inputs)
    np.testing.assert_allclose(reward.as_array(), expected, atol=1e-12)
    assert reward.scalar == pytest.approx(float(REWARD_WEIGHTS @ np.array(expected)))


def test_max_reward_bounds_table():
    assert max(compute_reward(**inputs).scalar for inputs, _ in REWARD_TABLE) <= max_scalar_reward(PHI_MIN) + 1e-12


def test_classify_landing():
    pad_front = ContactEvent(ContactKind.PAD_FRONT, 0.0, np.zeros(2), 0.0)
    pad_rear = ContactEvent(ContactKind.PAD_REAR, 0.0, np.zeros(2), 0.0)
    prop = ContactEvent(ContactKind.PROPELLER, 0.0, np.zeros(2), 0.0)
    assert classify_landing([pad_front, pad_rear], None) == (4, False)
    assert classify_landing([pad_front], Phase.SETTLED) == (4, False)
    assert classify_landing([pad_rear], Phase.FAILED) == (2, False)
    assert classify_landing([pad_front, prop], Phase.FAILED) == (2, True)
    assert classify_landing([prop], None) == (0, True)
    assert classify_landing([], None) == (0, False)


def test_policy_tick_runs_ten_physics_steps():
    assert EnvConfig().substeps == 10
    assert EnvConfig(physics_dt=5e-4).substeps == 20


@pytest.mark.parametrize("theta_deg,low,high", [(0, 5, 90), (90, -85, 85), (180, -90, -5), (45, -40, 90)])
def test_flight_angle_bounds(theta_deg, low, high):
    lo, hi = flight_angle_bounds(math.radians(theta_deg), math.radians(5.0))
    assert math.degrees(lo) == pytest.approx(low)
    assert math.degrees(hi) == pytest.approx(high)


def test_training_samples_close_on_the_plane(geom):
    rng = np.random.default_rng(4)
    config = EnvConfig(randomize_start_gap=True)
    l_eff = derive_dimensionless(geom).l_eff
    angles = set()
    for _ in range(300):
        condition, surface = sample_training_episode(rng, config, l_eff)
        angles.add(round(math.degrees(surface.theta_plane)))
        assert 1.0 <= condition.speed <= 5.0
        assert closing_speed(condition.velocity, surface) > 0
        assert l_eff <= condition.start_distance <= l_eff + 1.5
        approach_state(condition, surface, 0.0)
    assert angles == {0, 45, 90, 135, 180}


def test_training_plane_angles_are_uniform(geom):
    rng = np.random.default_rng(12)
    config = EnvConfig(randomize_start_gap=True)
    l_eff = derive_dimensionless(geom).l_eff
    counts = Counter(round(math.degrees(sample_training_episode(rng, config, l_eff)[1].theta_plane))
                     for _ in range(10000))
    assert set(counts) == {0, 45, 90, 135, 180}
    for count in counts.values():
        assert count / 10000 == pytest.approx(0.2, abs=0.02)


def test_training_samples_repeat_for_the_same_seed(geom):
    config = EnvConfig(randomize_start_gap=True)
    l_eff = derive_dimensionless(geom).l_eff
    a, b = np.random.default_rng(3), np.random.default_rng(3)
    for _ in range(50):
        assert sample_training_episode(a, config, l_eff) == sample_training_episode(b, config, l_eff)


@pytest.mark.parametrize("k", [7.0 / 12.0, 2.0])
def test_observation_is_scale_consistent(geom, ceiling, k):
    def state_at(scale):
        return SimState(np.array([0.1, -0.6]) * scale, np.array([0.8, 2.0]) * scale, 1.0, 0.0, 0.0, 0.0, 0.0,
                        Phase.APPROACH, 0.0)

    base = observe(state_at(1.0), geom, ceiling)
    scaled = observe(state_at(k), scale_geometry(geom, k), ceiling)
    assert base.tau < EnvConfig().tau_max
    assert scaled.tau == pytest.approx(base.tau, rel=1e-12)
    assert scaled.theta_x == pytest.approx(base.theta_x, rel=1e-12)
    assert scaled.d_perp == pytest.approx(k * base.d_perp, rel=1e-12)


def test_observation_cues(geom, ceiling):
    config = EnvConfig()
    condition = evaluation_condition(2.0, math.radians(90.0), geom, config)
    state = approach_state(condition, ceiling, 0.0)
    obs = observe(state, geom, ceiling, config)
    assert obs.d_perp == pytest.approx(config.start_gap_m)
    assert obs.tau == pytest.approx(config.start_gap_m / 2.0)
    assert obs.theta_x == pytest.approx(0.0, abs=1e-12)
    assert obs.theta_plane == 0.0

    slanted = approach_state(ApproachCondition(2.0, math.radians(30.0), start_distance=condition.start_distance),
                             ceiling, 0.0)
    obs = observe(slanted, geom, ceiling, config)
    assert obs.tau == pytest.approx(config.start_gap_m / 1.0)
    assert obs.theta_x == pytest.approx(2.0 * math.cos(math.radians(30.0)) / config.start_gap_m)


def test_observation_inside_reach_circle(geom, ceiling):
    condition = ApproachCondition(2.0, math.radians(90.0), start_distance=0.5 * derive_dimensionless(geom).l_eff)
    obs = observe(approach_state(condition, ceiling, 0.0), geom, ceiling)
    assert obs.d_perp == 0.0
    assert obs.tau == 0.0


def test_never_triggering_ends_in_approach_contact(geom, ceiling):
    condition = evaluation_condition(2.0, math.radians(80.0), geom)
    result = run_episode(NeverTriggerPolicy(geom.alpha_max), condition, ceiling, geom, seed=0)
    assert not result.triggered
    assert result.tau_trg is None
    assert result.n_legs == 0
    assert result.outcome == Phase.FAILED
    assert "no_trigger" in result.flags
    assert result.reward.r_tau_trg == 0.0
    assert result.reward.r_gravity == result.reward.r_momentum == result.reward.r_phi == 0.0


def test_early_trigger_falls_short(geom, ceiling):
    condition = evaluation_condition(2.0, math.radians(90.0), geom)
    result = run_episode(TauTriggerPolicy(10.0, 90.0, geom.alpha_max), condition, ceiling, geom, seed=0)
    assert result.triggered
    assert result.tau_trg == pytest.approx(0.5)
    assert result.a_rot_used == pytest.approx(90.0)
    assert result.n_legs == 0
    assert result.outcome == Phase.FAILED
    assert result.min_d_pad > 0
    assert result.reward.r_gravity == 0.0


def test_receding_body_keeps_flying_while_a_pad_can_still_reach(geom, ceiling):
    # the body starts to fall back before the front pad swings up to the ceiling
    condition = evaluation_condition(2.0, math.radians(90.0), geom)
    result = run_episode(TauTriggerPolicy(0.1, 90.0), condition, ceiling, geom, seed=0)
    assert any(e.kind in (ContactKind.PAD_FRONT, ContactKind.PAD_REAR) for e in result.contacts)
    assert result.n_legs >= 2
    assert result.min_d_pad <= 0.0


def test_some_trigger_time_lands_on_ceiling(geom, ceiling):
    condition = evaluation_condition(4.0, math.radians(90.0), geom)
    legs = []
    for tau in np.arange(0.0, 0.6, 0.01):
        result = run_episode(TauTriggerPolicy(float(tau), 90.0, geom.alpha_max), condition, ceiling, geom, seed=0)
        legs.append(result.n_legs)
        if result.n_legs > 0:
            assert result.phi_impact is not None
            assert result.min_d_pad <= 0.0
    assert max(legs) >= 2


def test_rotation_command_is_clipped(geom, ceiling):
    condition = evaluation_condition(2.0, math.radians(90.0), geom)
    env = PerchingEnv(geom, rot_scale=2.0 * geom.alpha_max)
    env.reset(seed=0, options={"condition": condition, "surface": ceiling})
    _, _, terminated, _, info = env.step(np.array([1.0, 1.0]))
    assert terminated
    assert info["result"].a_rot_used == pytest.approx(geom.alpha_max)


def test_step_after_termination_raises(geom, ceiling):
    env = PerchingEnv(geom)
    env.reset(seed=0, options={"condition": evaluation_condition(2.0, 1.2, geom), "surface": ceiling})
    env.step(np.array([1.0, 0.5]))
    with pytest.raises(RuntimeError):
        env.step(np.array([1.0, 0.5]))


def test_reset_without_options_samples_training_distribution(geom):
    env = PerchingEnv(geom, EnvConfig(surface_angles_deg=(90.0,)))
    obs, info = env.reset(seed=3)
    assert env.surface.theta_plane == pytest.approx(math.pi / 2)
    assert env.observation_space.contains(obs)
    assert info["observation"].tau == pytest.approx(obs[0])


def test_episodes_are_deterministic(geom, wall):
    condition = evaluation_condition(3.0, math.radians(10.0), geom)
    policy = TauTriggerPolicy(0.15, 60.0, geom.alpha_max)
    a = run_episode(policy, condition, wall, geom, seed=11)
    b = run_episode(policy, condition, wall, geom, seed=11)
    assert a.to_log_dict() == b.to_log_dict()


def test_trajectory_recording(geom, ceiling):
    condition = evaluation_condition(3.0, math.radians(70.0), geom)
    result, trajectory = run_episode_with_trajectory(TauTriggerPolicy(0.2, 90.0, geom.alpha_max), condition,
                                                     ceiling, geom, seed=0)
    times = [s.time for s in trajectory]
    assert len(trajectory) > 10
    assert all(b > a for a, b in zip(times, times[1:]))
    assert trajectory[0].phase == Phase.APPROACH


def test_episode_log_lines(geom, ceiling, tmp_path):
    condition = evaluation_condition(3.0, math.radians(70.0), geom)
    result = run_episode(TauTriggerPolicy(0.2, 90.0, geom.alpha_max), condition, ceiling, geom, seed=5)
    path = tmp_path / "episodes.jsonl"
    append_episode_log(str(path), condition, ceiling, 5, result)
    append_episode_log(str(path), condition, ceiling, 5, result)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[0])
    assert record["seed"] == 5
    assert record["n_legs"] == result.n_legs
    assert record["scalar_reward"] == pytest.approx(result.scalar_reward)


def test_phi_min_feeds_reward(geom):
    env = PerchingEnv(geom)
    assert env.phi_min == pytest.approx(compute_phi_min(geom))
