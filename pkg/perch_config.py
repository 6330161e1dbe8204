"""
Configuration for the perching lab.

Process settings come from the environment (.env supported); experiment
content comes from a JSON document whose keys carry their units.
The JSON document is checked against a JSON Schema before any work starts;
the first violation is reported with its dotted path.
"""

import os
import copy
import json
import math
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import jsonschema
from dotenv import load_dotenv

from perch_errors import ConfigError, GeometryError
from robot_geometry import RobotGeometry, get_preset, scale_geometry, validate_geometry, PRESET_NAMES
from perching_env import EnvConfig
from sac_trainer import SacConfig, REPLAY_SCHEMES

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()


@dataclass(frozen=True)
class Settings:
    output_root: str
    workers: int
    log_level: str
    registry_url: str


def _load_settings() -> Settings:
    output_root = os.getenv("PERCH_OUTPUT_ROOT", "runs")
    return Settings(
        output_root=output_root,
        workers=int(os.getenv("PERCH_WORKERS", os.cpu_count() or 1)),
        log_level=os.getenv("PERCH_LOG_LEVEL", "INFO").upper(),
        registry_url=os.getenv("PERCH_REGISTRY_URL", f"sqlite:///{os.path.join(output_root, 'runs.db')}"),
    )


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the global settings instance"""
    global _settings
    if _settings is None:
        _settings = _load_settings()
    return _settings


def reload_settings() -> Settings:
    global _settings
    _settings = _load_settings()
    return _settings


# ============================================================================
# EXPERIMENT CONFIG
# ============================================================================

@dataclass
class EvaluationConfig:
    speed_range: Tuple[float, float] = (0.5, 5.0)
    n_speeds: int = 10
    flight_angle_range_deg: Optional[Tuple[float, float]] = None  # None: full closing range per surface
    n_flight_angles: int = 10
    trials: int = 5
    smoothing_sigma_cells: float = 1.0
    criterion: str = "four_leg"
    episode_speed: float = 3.0
    episode_flight_angle_deg: float = 70.0
    episode_surface_deg: float = 0.0


@dataclass
class SweepConfig:
    stiffness_values: List[float] = field(default_factory=lambda: [0.4, 1.4, 8.5])
    damping_ratios: List[float] = field(default_factory=lambda: [0.3, 1.0, 2.0])
    alpha_values: List[float] = field(default_factory=lambda: [30.0, 60.0, 90.0])
    threshold_v_step: float = 0.05
    threshold_v_max: float = 6.0
    threshold_gap_step: float = 0.005


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Optional[str]
    geometry: RobotGeometry
    surface_angles_deg: List[float]
    env: EnvConfig
    training: SacConfig
    training_env: EnvConfig
    evaluation: EvaluationConfig
    sweeps: SweepConfig
    raw: Dict[str, Any]
    digest: str

    @property
    def digest_prefix(self) -> str:
        return self.digest[:12]


def config_digest(raw: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form"""
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ============================================================================
# SCHEMA
# ============================================================================

NUMBER = {"type": "number"}
POSITIVE = {"type": "number", "exclusiveMinimum": 0}
NON_NEGATIVE = {"type": "number", "minimum": 0}
PLANE_ANGLE = {"type": "number", "minimum": 0, "maximum": 180}
STIFFNESS = {"anyOf": [NON_NEGATIVE, {"const": "inf"}]}
POINT = {"type": "array", "items": NUMBER, "minItems": 2, "maxItems": 2}
ALL_PLANES = [0.0, 45.0, 90.0, 135.0, 180.0]


def _default(schema: Dict[str, Any], value: Any) -> Dict[str, Any]:
    return {**schema, "default": value}


def _list(items: Dict[str, Any], default: Any = None) -> Dict[str, Any]:
    schema = {"type": "array", "items": items, "minItems": 1}
    return schema if default is None else _default(schema, default)


def _interval(items: Dict[str, Any], default: Any = None) -> Dict[str, Any]:
    schema = {"type": "array", "items": items, "minItems": 2, "maxItems": 2}
    return schema if default is None else _default(schema, default)


def _integer(minimum: int, default: int) -> Dict[str, Any]:
    return {"type": "integer", "minimum": minimum, "default": default}


def _block(properties: Dict[str, Any], required: Tuple[str, ...] = ()) -> Dict[str, Any]:
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False, "default": {}}


ROBOT_EXPLICIT_KEYS = ("mass_kg", "inertia_yy_kg_m2", "forward_reach_m", "leg_mount_offset_m", "leg_length_m",
                       "leg_mount_angle_deg", "prop_offsets_m")

ROBOT_SCHEMA = _block({
    "preset": {"enum": list(PRESET_NAMES)},
    "scale": _default(POSITIVE, 1.0),
    "mass_kg": POSITIVE,
    "inertia_yy_kg_m2": POSITIVE,
    "forward_reach_m": POSITIVE,
    "leg_mount_offset_m": POINT,
    "leg_length_m": POSITIVE,
    "leg_mount_angle_deg": NUMBER,
    "prop_offsets_m": _list(POINT),
    "hip_stiffness_nm_rad": STIFFNESS,
    "hip_damping_ratio": NON_NEGATIVE,
    "alpha_max_rad_s2": POSITIVE,
    "motor_time_constant_s": POSITIVE,
})

SURFACES_SCHEMA = _block({
    "angles_deg": _list(PLANE_ANGLE, ALL_PLANES),
    "contact_epsilon_m": _default(POSITIVE, 0.002),
    "attach_range_m": _default(POSITIVE, 0.010),
})

ENV_SCHEMA = _block({
    "physics_dt_s": _default(POSITIVE, 1e-3),
    "policy_rate_hz": _default(POSITIVE, 100.0),
    "timeout_s": _default(POSITIVE, 3.0),
    "tau_max_s": _default(POSITIVE, 5.0),
    "theta_x_guard_m": _default(POSITIVE, 1e-3),
    "k_tau_per_s": _default(POSITIVE, 5.0),
    "k_dpad_per_m": _default(POSITIVE, 10.0),
    "trigger_threshold": _default(NUMBER, 0.0),
    "start_gap_m": _default(NON_NEGATIVE, 1.0),
    "realistic_approach": {"type": "boolean", "default": False},
})

TRAINING_SCHEMA = _block({
    "episodes": _integer(1, 1500),
    "warmup_episodes": _integer(0, 50),
    "batch_size": _integer(1, 64),
    "discount": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.99},
    "soft_update_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.005},
    "lr_actor": _default(NON_NEGATIVE, 3e-4),
    "lr_critic": _default(NON_NEGATIVE, 3e-4),
    "lr_temperature": _default(NON_NEGATIVE, 3e-4),
    "target_entropy": _default(NUMBER, -2.0),
    "initial_temperature": _default(POSITIVE, 0.2),
    "buffer_capacity": _integer(1, 20000),
    # null runs one update per stored transition
    "updates_per_episode": {"type": ["integer", "null"], "minimum": 0, "default": 1},
    "replay_scheme": {"enum": list(REPLAY_SCHEMES), "default": "trigger"},
    "surface_angles_deg": _list(PLANE_ANGLE, ALL_PLANES),
    "speed_range_m_s": _interval(POSITIVE, [1.0, 5.0]),
    "flight_angle_margin_deg": _default(NON_NEGATIVE, 5.0),
    "start_gap_range_m": _interval(NON_NEGATIVE, [0.0, 1.5]),
    "log_every": _integer(0, 50),
})

EVALUATION_SCHEMA = _block({
    "speed_range_m_s": _interval(POSITIVE, [0.5, 5.0]),
    "n_speeds": _integer(1, 10),
    "flight_angle_range_deg": _interval(NUMBER),
    "n_flight_angles": _integer(1, 10),
    "trials": _integer(1, 5),
    "smoothing_sigma_cells": _default(NON_NEGATIVE, 1.0),
    "criterion": {"enum": ["four_leg", "any_contact"], "default": "four_leg"},
    "episode_speed_m_s": _default(POSITIVE, 3.0),
    "episode_flight_angle_deg": _default(NUMBER, 70.0),
    "episode_surface_deg": _default(PLANE_ANGLE, 0.0),
})

SWEEPS_SCHEMA = _block({
    "stiffness_nm_rad": _list(STIFFNESS, [0.4, 1.4, 8.5]),
    "damping_ratios": _list(NON_NEGATIVE, [0.3, 1.0, 2.0]),
    "alpha_max_rad_s2": _list(POSITIVE, [30.0, 60.0, 90.0]),
    "threshold_v_step_m_s": _default(POSITIVE, 0.05),
    "threshold_v_max_m_s": _default(POSITIVE, 6.0),
    "threshold_gap_step_m": _default(POSITIVE, 0.005),
})

EXPERIMENT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    **_block({
        "seed": _integer(0, 0),
        "output_dir": {"type": ["string", "null"], "default": None},
        "robot": ROBOT_SCHEMA,
        "surfaces": SURFACES_SCHEMA,
        "env": ENV_SCHEMA,
        "training": TRAINING_SCHEMA,
        "evaluation": EVALUATION_SCHEMA,
        "sweeps": SWEEPS_SCHEMA,
    }, required=("robot",)),
}


def error_field(error: jsonschema.ValidationError) -> str:
    """Dotted path of the offending key, e.g. surfaces.angles_deg[1]"""
    path = list(error.absolute_path)
    if error.validator == "additionalProperties":
        path.append(sorted(set(error.instance) - set(error.schema.get("properties", {})))[0])
    elif error.validator == "required":
        path.append([key for key in error.validator_value if key not in error.instance][0])
    dotted = ""
    for part in path:
        if isinstance(part, int):
            dotted += f"[{part}]"
        else:
            dotted += f".{part}" if dotted else str(part)
    return dotted or "config"


def _with_defaults(raw: Dict[str, Any], schema: Dict[str, Any]) -> Dict[str, Any]:
    return {key: raw[key] if key in raw else copy.deepcopy(prop.get("default"))
            for key, prop in schema["properties"].items()}


def _stiffness(value: Any) -> float:
    return math.inf if value == "inf" else float(value)


def _check_increasing(path: str, values: Optional[List[float]]):
    if values is not None and not values[0] < values[1]:
        raise ConfigError(path, "must be strictly increasing")


def build_geometry(robot: Dict[str, Any]) -> RobotGeometry:
    explicit = {k: robot[k] for k in ROBOT_EXPLICIT_KEYS if robot[k] is not None}
    if robot["preset"] is not None and explicit:
        raise ConfigError(f"robot.{sorted(explicit)[0]}", "explicit geometry keys cannot be combined with a preset")
    try:
        if robot["preset"] is not None:
            geom = get_preset(robot["preset"])
        else:
            missing = [k for k in ROBOT_EXPLICIT_KEYS if k not in explicit]
            if missing:
                raise ConfigError(f"robot.{missing[0]}", "missing required key (or give robot.preset)")
            geom = RobotGeometry(
                mass=float(explicit["mass_kg"]),
                inertia_yy=float(explicit["inertia_yy_kg_m2"]),
                forward_reach=float(explicit["forward_reach_m"]),
                leg_mount_offset=tuple(float(v) for v in explicit["leg_mount_offset_m"]),
                leg_length=float(explicit["leg_length_m"]),
                leg_mount_angle=math.radians(explicit["leg_mount_angle_deg"]),
                prop_offsets=tuple(tuple(float(v) for v in p) for p in explicit["prop_offsets_m"]),
                hip_stiffness=1.4,
                hip_damping_ratio=0.4,
                alpha_max=90.0,
                motor_time_constant=0.04,
            )
        overrides = {}
        if robot["hip_stiffness_nm_rad"] is not None:
            overrides["hip_stiffness"] = _stiffness(robot["hip_stiffness_nm_rad"])
        if robot["hip_damping_ratio"] is not None:
            overrides["hip_damping_ratio"] = float(robot["hip_damping_ratio"])
        if robot["alpha_max_rad_s2"] is not None:
            overrides["alpha_max"] = float(robot["alpha_max_rad_s2"])
        if robot["motor_time_constant_s"] is not None:
            overrides["motor_time_constant"] = float(robot["motor_time_constant_s"])
        geom = scale_geometry(geom, float(robot["scale"]), **overrides)
        return validate_geometry(geom)
    except GeometryError as e:
        raise ConfigError("robot", str(e)) from e


def parse_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a raw JSON document into an ExperimentConfig"""
    try:
        jsonschema.validate(instance=raw, schema=EXPERIMENT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(error_field(e), e.message) from e

    top = _with_defaults(raw, EXPERIMENT_SCHEMA)
    robot = _with_defaults(top["robot"], ROBOT_SCHEMA)
    surfaces = _with_defaults(top["surfaces"], SURFACES_SCHEMA)
    env = _with_defaults(top["env"], ENV_SCHEMA)
    training = _with_defaults(top["training"], TRAINING_SCHEMA)
    evaluation = _with_defaults(top["evaluation"], EVALUATION_SCHEMA)
    sweeps = _with_defaults(top["sweeps"], SWEEPS_SCHEMA)

    geometry = build_geometry(robot)
    _check_increasing("training.speed_range_m_s", training["speed_range_m_s"])
    _check_increasing("training.start_gap_range_m", training["start_gap_range_m"])
    _check_increasing("evaluation.speed_range_m_s", evaluation["speed_range_m_s"])
    _check_increasing("evaluation.flight_angle_range_deg", evaluation["flight_angle_range_deg"])
    if surfaces["attach_range_m"] < surfaces["contact_epsilon_m"]:
        raise ConfigError("surfaces.attach_range_m", "must be >= surfaces.contact_epsilon_m")
    if env["physics_dt_s"] * env["policy_rate_hz"] > 1.0:
        raise ConfigError("env.physics_dt_s", "physics step must not exceed the policy tick")

    env_config = EnvConfig(
        physics_dt=float(env["physics_dt_s"]),
        policy_rate_hz=float(env["policy_rate_hz"]),
        timeout_s=float(env["timeout_s"]),
        tau_max=float(env["tau_max_s"]),
        theta_x_guard=float(env["theta_x_guard_m"]),
        k_tau=float(env["k_tau_per_s"]),
        k_dpad=float(env["k_dpad_per_m"]),
        trigger_threshold=float(env["trigger_threshold"]),
        start_gap_m=float(env["start_gap_m"]),
        contact_epsilon=float(surfaces["contact_epsilon_m"]),
        attach_range=float(surfaces["attach_range_m"]),
        realistic_approach=env["realistic_approach"],
    )
    training_env = replace(
        env_config,
        randomize_start_gap=True,
        surface_angles_deg=tuple(float(a) for a in training["surface_angles_deg"]),
        speed_range=tuple(float(v) for v in training["speed_range_m_s"]),
        flight_angle_margin_deg=float(training["flight_angle_margin_deg"]),
        start_gap_range_m=tuple(float(v) for v in training["start_gap_range_m"]),
    )
    updates = training["updates_per_episode"]
    sac = SacConfig(
        discount=float(training["discount"]),
        soft_update_rate=float(training["soft_update_rate"]),
        batch_size=int(training["batch_size"]),
        lr_actor=float(training["lr_actor"]),
        lr_critic=float(training["lr_critic"]),
        lr_temperature=float(training["lr_temperature"]),
        target_entropy=float(training["target_entropy"]),
        initial_temperature=float(training["initial_temperature"]),
        buffer_capacity=int(training["buffer_capacity"]),
        updates_per_episode=int(updates) if updates is not None else None,
        episodes=int(training["episodes"]),
        warmup_episodes=int(training["warmup_episodes"]),
        replay_scheme=training["replay_scheme"],
        log_every=int(training["log_every"]),
    ).validate()
    flight_angle_range = evaluation["flight_angle_range_deg"]
    evaluation_config = EvaluationConfig(
        speed_range=tuple(float(v) for v in evaluation["speed_range_m_s"]),
        n_speeds=int(evaluation["n_speeds"]),
        flight_angle_range_deg=tuple(float(v) for v in flight_angle_range) if flight_angle_range else None,
        n_flight_angles=int(evaluation["n_flight_angles"]),
        trials=int(evaluation["trials"]),
        smoothing_sigma_cells=float(evaluation["smoothing_sigma_cells"]),
        criterion=evaluation["criterion"],
        episode_speed=float(evaluation["episode_speed_m_s"]),
        episode_flight_angle_deg=float(evaluation["episode_flight_angle_deg"]),
        episode_surface_deg=float(evaluation["episode_surface_deg"]),
    )
    sweep_config = SweepConfig(
        stiffness_values=[_stiffness(v) for v in sweeps["stiffness_nm_rad"]],
        damping_ratios=[float(v) for v in sweeps["damping_ratios"]],
        alpha_values=[float(v) for v in sweeps["alpha_max_rad_s2"]],
        threshold_v_step=float(sweeps["threshold_v_step_m_s"]),
        threshold_v_max=float(sweeps["threshold_v_max_m_s"]),
        threshold_gap_step=float(sweeps["threshold_gap_step_m"]),
    )
    return ExperimentConfig(
        seed=int(top["seed"]),
        output_dir=top["output_dir"],
        geometry=geometry,
        surface_angles_deg=[float(a) for a in surfaces["angles_deg"]],
        env=env_config,
        training=sac,
        training_env=training_env,
        evaluation=evaluation_config,
        sweeps=sweep_config,
        raw=raw,
        digest=config_digest(raw),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError("--config", f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON at line {e.lineno}: {e.msg}") from e
    config = parse_config(raw)
    logger.info(f"[Config] loaded {path} (digest {config.digest_prefix})")
    return config
