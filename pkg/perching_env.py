"""
=============================================================================
PERCHING ENV - EPISODE ORCHESTRATION, SENSORY CUES AND REWARD
=============================================================================

gymnasium environment wrapping the landing simulation:
- Emulated visual cues: time-to-contact tau, transverse observable theta_x,
  perpendicular distance to the reach circle, plane orientation
- Trigger / rotation action semantics at 100 Hz over 1 kHz physics
- Landing classification (4 / 2 / 0 legs, body or propeller strike)
- Six-term terminal reward with fixed weights
- Training-distribution sampling and a policy-driven run_episode wrapper
"""

import json
import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import gymnasium as gym
from gymnasium import spaces

from robot_geometry import (
    RobotGeometry,
    PadSide,
    contact_reach,
    derive_dimensionless,
    compute_phi_min,
    impact_orientation,
    cross2,
    world_points,
)
from sim_core import (
    GRAVITY,
    ApproachCondition,
    ContactEvent,
    ContactKind,
    DistanceTrace,
    Phase,
    SimState,
    SurfaceSpec,
    approach_state,
    realistic_start,
    begin_swing,
    clearances,
    closing_speed,
    detect_contacts,
    step_approach,
    step_maneuver,
    step_swing,
    trigger,
    with_phase,
)

logger = logging.getLogger(__name__)

REWARD_WEIGHTS = np.array([0.1, 0.4, 1.0, 1.0, 2.0, 2.0])
REWARD_TERMS = ["r_tau_trg", "r_d_pad", "r_gravity", "r_momentum", "r_phi", "r_legs"]
STRIKE_PENALTY = 0.25


@dataclass
class EnvConfig:
    """Episode, cue and reward constants"""
    physics_dt: float = 1e-3
    policy_rate_hz: float = 100.0
    timeout_s: float = 3.0
    tau_max: float = 5.0
    theta_x_guard: float = 1e-3
    k_tau: float = 5.0
    k_dpad: float = 10.0
    trigger_threshold: float = 0.0
    start_gap_m: float = 1.0
    start_gap_range_m: Tuple[float, float] = (0.0, 1.5)
    randomize_start_gap: bool = False
    surface_angles_deg: Tuple[float, ...] = (0.0, 45.0, 90.0, 135.0, 180.0)
    speed_range: Tuple[float, float] = (1.0, 5.0)
    flight_angle_margin_deg: float = 5.0
    contact_epsilon: float = 0.002
    attach_range: float = 0.010
    realistic_approach: bool = False
    record_trajectory: bool = False
    max_approach_ticks: int = 2000

    @property
    def substeps(self) -> int:
        return max(1, int(round(1.0 / (self.policy_rate_hz * self.physics_dt))))


@dataclass(frozen=True)
class Observation:
    """[tau, theta_x, d_perp, theta_plane]"""
    tau: float
    theta_x: float
    d_perp: float
    theta_plane: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tau, self.theta_x, self.d_perp, self.theta_plane])


@dataclass(frozen=True)
class RewardVector:
    r_tau_trg: float
    r_d_pad: float
    r_gravity: float
    r_momentum: float
    r_phi: float
    r_legs: float

    def as_array(self) -> np.ndarray:
        return np.array([self.r_tau_trg, self.r_d_pad, self.r_gravity, self.r_momentum, self.r_phi, self.r_legs])

    @property
    def scalar(self) -> float:
        return float(REWARD_WEIGHTS @ self.as_array())


@dataclass
class EpisodeResult:
    """Everything an episode produced, including the reward breakdown"""
    triggered: bool
    tau_trg: Optional[float]
    a_rot_used: float
    min_d_pad: float
    min_d_prop: float
    phi_impact: Optional[float]
    n_legs: int
    body_or_prop_contact: bool
    reward: RewardVector
    outcome: Phase
    trigger_time: Optional[float] = None
    trigger_observation: Optional[Observation] = None
    contacts: List[ContactEvent] = field(default_factory=list)
    trace: Optional[DistanceTrace] = None
    flags: List[str] = field(default_factory=list)

    @property
    def scalar_reward(self) -> float:
        return self.reward.scalar

    @property
    def four_leg(self) -> bool:
        return self.n_legs == 4

    def to_log_dict(self) -> Dict[str, Any]:
        return {
            "triggered": self.triggered,
            "tau_trg": self.tau_trg,
            "a_rot_used": self.a_rot_used,
            "min_d_pad": self.min_d_pad,
            "min_d_prop": self.min_d_prop,
            "phi_impact": self.phi_impact,
            "n_legs": self.n_legs,
            "body_or_prop_contact": self.body_or_prop_contact,
            "outcome": self.outcome.value,
            "trigger_time": self.trigger_time,
            "reward": asdict(self.reward),
            "scalar_reward": self.scalar_reward,
            "flags": list(self.flags),
        }


class PolicyHandle(Protocol):
    """Anything that maps an observation to a normalized [a_trg, a_rot] action"""
    rot_scale: float

    def act(self, observation: Observation, rng: np.random.Generator) -> np.ndarray:
        ...


# ============================================================================
# SENSORY CUES
# ============================================================================

def observe(state: SimState, geom: RobotGeometry, surface: SurfaceSpec,
            config: Optional[EnvConfig] = None) -> Observation:
    """Emulated tau / theta_x cues measured against the reach circle of radius L_eff.

    tau is capped at config.tau_max, the upper bound of the observation space. The cap also
    stands in for tau when the body is not closing on the plane.
    """
    config = config or EnvConfig()
    l_eff = derive_dimensionless(geom).l_eff
    d_raw = surface.signed_distance(state.position) - l_eff
    d_perp = max(d_raw, 0.0)
    v_perp = closing_speed(state.velocity, surface)
    v_par = float(surface.tangent @ state.velocity)
    tau = min(d_perp / v_perp, config.tau_max) if v_perp > 0 else config.tau_max
    theta_x = v_par / max(d_raw, config.theta_x_guard)
    return Observation(tau=tau, theta_x=theta_x, d_perp=d_perp, theta_plane=surface.theta_plane)


def raw_time_to_contact(state: SimState, geom: RobotGeometry, surface: SurfaceSpec,
                        config: Optional[EnvConfig] = None) -> float:
    """Signed tau at the trigger instant; negative once inside the reach circle"""
    config = config or EnvConfig()
    v_perp = closing_speed(state.velocity, surface)
    if v_perp <= 0:
        return config.tau_max
    d_raw = surface.signed_distance(state.position) - derive_dimensionless(geom).l_eff
    return d_raw / v_perp


# ============================================================================
# REWARD
# ============================================================================

def _unit(v: np.ndarray) -> Optional[np.ndarray]:
    n = float(np.linalg.norm(v))
    return None if n == 0.0 else np.asarray(v, dtype=float) / n


def phi_reward(phi_impact: Optional[float], phi_min: float) -> float:
    if phi_impact is None:
        return 0.0
    phi = abs(phi_impact)
    if phi > phi_min:
        return phi / (0.5 * (phi_min + math.pi))
    if phi > 0:
        return 0.5 * phi / phi_min
    return 0.0


def legs_reward(n_legs: int, body_or_prop_contact: bool) -> float:
    if n_legs >= 3:
        value = 1.0
    elif n_legs >= 1:
        value = 0.5
    else:
        value = 0.0
    return value - STRIKE_PENALTY if body_or_prop_contact else value


def compute_reward(
    tau_trg: Optional[float],
    min_d_pad: float,
    phi_impact: Optional[float],
    phi_min: float,
    n_legs: int,
    body_or_prop_contact: bool,
    leg_vector: Optional[np.ndarray] = None,
    touchdown_velocity: Optional[np.ndarray] = None,
    k_tau: float = 5.0,
    k_dpad: float = 10.0,
) -> RewardVector:
    """Six terminal reward terms; gravity, momentum and orientation terms are zero without contact"""
    if tau_trg is None:
        r_tau = 0.0
    else:
        r_tau = 1.0 if tau_trg < 0 else math.exp(-k_tau * tau_trg)
    r_dpad = 1.0 if min_d_pad < 0 else math.exp(-k_dpad * min_d_pad)

    e_r = _unit(leg_vector) if leg_vector is not None else None
    r_gravity = r_momentum = 0.0
    if e_r is not None:
        r_gravity = abs(cross2(np.array([0.0, -1.0]), e_r))
        v_hat = _unit(touchdown_velocity) if touchdown_velocity is not None else None
        if v_hat is not None:
            r_momentum = abs(cross2(v_hat, e_r))

    return RewardVector(
        r_tau_trg=r_tau,
        r_d_pad=r_dpad,
        r_gravity=r_gravity,
        r_momentum=r_momentum,
        r_phi=phi_reward(phi_impact, phi_min) if e_r is not None else 0.0,
        r_legs=legs_reward(n_legs, body_or_prop_contact),
    )


def max_scalar_reward(phi_min: float) -> float:
    return 0.1 + 0.4 + 1.0 + 1.0 + 2.0 * (2.0 * math.pi / (phi_min + math.pi)) + 2.0


def classify_landing(contacts: Sequence[ContactEvent], swing_outcome: Optional[Phase]) -> Tuple[int, bool]:
    """Projected pads map to legs: both pads (or a settled swing) -> 4, one -> 2, none -> 0"""
    pads = {c.kind for c in contacts if c.kind in (ContactKind.PAD_FRONT, ContactKind.PAD_REAR)}
    struck = any(c.kind in (ContactKind.BODY, ContactKind.PROPELLER) for c in contacts)
    if swing_outcome == Phase.SETTLED or len(pads) == 2:
        return 4, struck
    if len(pads) == 1:
        return 2, struck
    return 0, struck


# ============================================================================
# TRAINING DISTRIBUTION
# ============================================================================

def flight_angle_bounds(theta_plane: float, margin: float) -> Tuple[float, float]:
    """Flight angles that close on the plane while keeping a positive x-velocity"""
    low = max(-theta_plane + margin, -0.5 * math.pi)
    high = min(math.pi - theta_plane - margin, 0.5 * math.pi)
    return low, high


def sample_training_episode(rng: np.random.Generator, config: Optional[EnvConfig] = None,
                            l_eff: float = 0.0) -> Tuple[ApproachCondition, SurfaceSpec]:
    config = config or EnvConfig()
    angle_deg = config.surface_angles_deg[int(rng.integers(len(config.surface_angles_deg)))]
    theta_plane = math.radians(angle_deg)
    speed = float(rng.uniform(*config.speed_range))
    low, high = flight_angle_bounds(theta_plane, math.radians(config.flight_angle_margin_deg))
    flight_angle = float(rng.uniform(low, high))
    gap = float(rng.uniform(*config.start_gap_range_m)) if config.randomize_start_gap else config.start_gap_m
    surface = SurfaceSpec(theta_plane, contact_epsilon=config.contact_epsilon, attach_range=config.attach_range)
    return ApproachCondition(speed, flight_angle, start_distance=l_eff + gap), surface


def evaluation_condition(speed: float, flight_angle: float, geom: RobotGeometry,
                         config: Optional[EnvConfig] = None) -> ApproachCondition:
    config = config or EnvConfig()
    return ApproachCondition(speed, flight_angle, start_distance=derive_dimensionless(geom).l_eff + config.start_gap_m)


# ============================================================================
# ENVIRONMENT
# ============================================================================

class PerchingEnv(gym.Env):
    """One step per policy tick; a trigger runs the whole maneuver and ends the episode"""

    metadata = {"render_modes": []}

    def __init__(self, geom: RobotGeometry, config: Optional[EnvConfig] = None, rot_scale: Optional[float] = None):
        super().__init__()
        self.geom = geom
        self.config = config or EnvConfig()
        self.rot_scale = float(rot_scale if rot_scale is not None else geom.alpha_max)
        self.l_eff = derive_dimensionless(geom).l_eff
        self.phi_min = compute_phi_min(geom)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(2,), dtype=np.float64)
        self.observation_space = spaces.Box(
            low=np.array([0.0, -np.inf, 0.0, 0.0]),
            high=np.array([self.config.tau_max, np.inf, np.inf, math.pi]),
            dtype=np.float64,
        )
        self.state: Optional[SimState] = None
        self.condition: Optional[ApproachCondition] = None
        self.surface: Optional[SurfaceSpec] = None
        self.trace = DistanceTrace()
        self.trajectory: List[SimState] = []
        self.contacts: List[ContactEvent] = []
        self.ticks = 0
        self.done = False

    # ------------------------------------------------------------------
    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None):
        super().reset(seed=seed)
        options = options or {}
        if "condition" in options:
            self.condition = options["condition"]
            self.surface = options.get("surface") or SurfaceSpec(
                0.0, contact_epsilon=self.config.contact_epsilon, attach_range=self.config.attach_range)
        else:
            self.condition, self.surface = sample_training_episode(self.np_random, self.config, self.l_eff)
        if self.config.realistic_approach:
            self.state = realistic_start(self.condition, self.surface, self.geom)
        else:
            self.state = approach_state(self.condition, self.surface, 0.0)
        self.trace = DistanceTrace()
        self.trajectory = []
        self.contacts = []
        self.ticks = 0
        self.done = False
        self._record(self.state)
        observation = self.observation()
        return observation.as_array(), {"observation": observation}

    def observation(self) -> Observation:
        return observe(self.state, self.geom, self.surface, self.config)

    def _record(self, state: SimState):
        d_pad, d_prop = clearances(state, self.geom, self.surface)
        self.trace.append(state.time, d_pad, d_prop)
        if self.config.record_trajectory:
            self.trajectory.append(state)

    # ------------------------------------------------------------------
    def step(self, action):
        if self.done or self.state is None:
            raise RuntimeError("step() called on a finished episode; call reset()")
        action = np.asarray(action, dtype=float)
        if action[0] > self.config.trigger_threshold:
            alpha = float(np.clip(action[1] * self.rot_scale, -self.geom.alpha_max, self.geom.alpha_max))
            result = self._run_maneuver(alpha)
            return self._finish(result)

        for _ in range(self.config.substeps):
            self.state = step_approach(self.state, self.condition, self.surface, self.geom,
                                       self.config.physics_dt, realistic=self.config.realistic_approach)
            self._record(self.state)
            events = detect_contacts(self.state, self.geom, self.surface)
            if events:
                self.contacts.extend(events)
                return self._finish(self._no_trigger_result(Phase.FAILED))
        self.ticks += 1
        observation = self.observation()
        if self.ticks >= self.config.max_approach_ticks:
            result = self._no_trigger_result(Phase.APPROACH)
            self.done = True
            return observation.as_array(), result.scalar_reward, False, True, {"observation": observation, "result": result}
        return observation.as_array(), 0.0, False, False, {"observation": observation}

    def _finish(self, result: EpisodeResult):
        self.done = True
        observation = self.observation()
        return observation.as_array(), result.scalar_reward, True, False, {"observation": observation, "result": result}

    def _no_trigger_result(self, outcome: Phase) -> EpisodeResult:
        _, struck = classify_landing(self.contacts, None)
        reward = compute_reward(None, self.trace.min_d_pad, None, self.phi_min, 0, struck,
                                k_tau=self.config.k_tau, k_dpad=self.config.k_dpad)
        return EpisodeResult(
            triggered=False,
            tau_trg=None,
            a_rot_used=0.0,
            min_d_pad=self.trace.min_d_pad,
            min_d_prop=self.trace.min_d_prop,
            phi_impact=None,
            n_legs=0,
            body_or_prop_contact=struck,
            reward=reward,
            outcome=outcome,
            contacts=list(self.contacts),
            trace=self.trace,
            flags=["no_trigger"],
        )

    # ------------------------------------------------------------------
    def _run_maneuver(self, alpha: float) -> EpisodeResult:
        """Rotation, capture and swing from the current approach state to a terminal phase"""
        cfg, geom, surface = self.config, self.geom, self.surface
        trigger_observation = self.observation()
        tau_trg = raw_time_to_contact(self.state, geom, surface, cfg)
        trigger_time = self.state.time
        state = trigger(self.state)
        attach: Optional[Dict[str, Any]] = None
        approach_accel = -GRAVITY * math.cos(surface.theta_plane)
        out_of_reach = contact_reach(geom) + surface.attach_range

        while state.phase in (Phase.ROTATION, Phase.SWING):
            if state.time - trigger_time >= cfg.timeout_s - 1e-12:
                state = with_phase(state, Phase.FAILED)
                break
            if state.phase == Phase.ROTATION:
                state = step_maneuver(state, alpha, geom, cfg.physics_dt)
                events = detect_contacts(state, geom, surface)
                pads = [e for e in events if e.kind in (ContactKind.PAD_FRONT, ContactKind.PAD_REAR)]
                strikes = [e for e in events if e.kind in (ContactKind.BODY, ContactKind.PROPELLER)]
                self.contacts.extend(events)
                if pads:
                    first = min(pads, key=lambda e: surface.signed_distance(e.point))
                    attach = self._attach_data(state, first)
                    if len(pads) == 2:
                        state = with_phase(state, Phase.SETTLED, struck=bool(strikes))
                    elif strikes:
                        state = with_phase(state, Phase.FAILED, struck=True)
                    else:
                        side = PadSide.FRONT if first.kind == ContactKind.PAD_FRONT else PadSide.REAR
                        state = begin_swing(state, geom, surface, side)
                elif strikes:
                    state = with_phase(state, Phase.FAILED, struck=True)
                elif closing_speed(state.velocity, surface) < 0 and approach_accel <= 0 \
                        and surface.signed_distance(state.position) > out_of_reach:
                    # receding with no pull toward the plane and no point able to reach it
                    state = with_phase(state, Phase.FAILED)
            else:
                state = step_swing(state, geom, surface, cfg.physics_dt)
                if state.struck:
                    self.contacts.extend(e for e in detect_contacts(state, geom, surface)
                                         if e.kind in (ContactKind.BODY, ContactKind.PROPELLER))
            self._record(state)

        self.state = state
        swing_outcome = state.phase if state.pinned_pad is not None else None
        n_legs, struck = classify_landing(self.contacts, swing_outcome)
        struck = struck or state.struck
        min_d_pad = self.trace.min_d_pad
        if attach is not None:
            min_d_pad = min(min_d_pad, 0.0)
        reward = compute_reward(
            tau_trg,
            min_d_pad,
            attach["phi_impact"] if attach else None,
            self.phi_min,
            n_legs,
            struck,
            leg_vector=attach["leg_vector"] if attach else None,
            touchdown_velocity=attach["velocity"] if attach else None,
            k_tau=cfg.k_tau,
            k_dpad=cfg.k_dpad,
        )
        logger.debug(f"[PerchEnv] maneuver finished: {state.phase.value}, legs={n_legs}, "
                     f"strike={struck}, reward={reward.scalar:.3f}")
        return EpisodeResult(
            triggered=True,
            tau_trg=tau_trg,
            a_rot_used=alpha,
            min_d_pad=min_d_pad,
            min_d_prop=self.trace.min_d_prop,
            phi_impact=attach["phi_impact"] if attach else None,
            n_legs=n_legs,
            body_or_prop_contact=struck,
            reward=reward,
            outcome=state.phase,
            trigger_time=trigger_time,
            trigger_observation=trigger_observation,
            contacts=list(self.contacts),
            trace=self.trace,
        )

    def _attach_data(self, state: SimState, event: ContactEvent) -> Dict[str, Any]:
        side = PadSide.FRONT if event.kind == ContactKind.PAD_FRONT else PadSide.REAR
        pad = world_points(self.geom, state.position, state.pitch).pads()[side]
        return {
            "phi_impact": impact_orientation(state.pitch, self.surface.theta_plane),
            "leg_vector": state.position - pad,
            "velocity": state.velocity.copy(),
        }


# ============================================================================
# POLICY-DRIVEN EPISODES
# ============================================================================

def run_episode(policy: PolicyHandle, condition: ApproachCondition, surface: SurfaceSpec, geom: RobotGeometry,
                seed: int, config: Optional[EnvConfig] = None) -> EpisodeResult:
    """Approach with the policy queried every tick until the episode ends"""
    env = PerchingEnv(geom, config, rot_scale=policy.rot_scale)
    rng = np.random.default_rng(seed)
    _, info = env.reset(seed=seed, options={"condition": condition, "surface": surface})
    while True:
        action = policy.act(info["observation"], rng)
        _, _, terminated, truncated, info = env.step(action)
        if terminated or truncated:
            return info["result"]


def run_episode_with_trajectory(policy: PolicyHandle, condition: ApproachCondition, surface: SurfaceSpec,
                                geom: RobotGeometry, seed: int,
                                config: Optional[EnvConfig] = None) -> Tuple[EpisodeResult, List[SimState]]:
    config = config or EnvConfig()
    recording = EnvConfig(**{**asdict(config), "record_trajectory": True})
    env = PerchingEnv(geom, recording, rot_scale=policy.rot_scale)
    rng = np.random.default_rng(seed)
    _, info = env.reset(seed=seed, options={"condition": condition, "surface": surface})
    while True:
        action = policy.act(info["observation"], rng)
        _, _, terminated, truncated, info = env.step(action)
        if terminated or truncated:
            return info["result"], env.trajectory


class NeverTriggerPolicy:
    """Random rotation command, trigger output always negative"""

    def __init__(self, rot_scale: float = 90.0):
        self.rot_scale = rot_scale

    def act(self, observation: Observation, rng: np.random.Generator) -> np.ndarray:
        return np.array([-1.0, float(rng.uniform(-1.0, 1.0))])


class TauTriggerPolicy:
    """Triggers once tau drops below a fixed value, with a fixed rotation command"""

    def __init__(self, tau_trigger: float, alpha: float, rot_scale: float = 90.0):
        self.tau_trigger = tau_trigger
        self.alpha = alpha
        self.rot_scale = rot_scale

    def act(self, observation: Observation, rng: np.random.Generator) -> np.ndarray:
        fire = 1.0 if observation.tau <= self.tau_trigger else -1.0
        return np.array([fire, self.alpha / self.rot_scale])


def append_episode_log(path: str, condition: ApproachCondition, surface: SurfaceSpec, seed: int,
                       result: EpisodeResult):
    """One JSON line per episode"""
    record = {
        "condition": asdict(condition),
        "surface": surface.to_dict(),
        "seed": seed,
        **result.to_log_dict(),
    }
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
