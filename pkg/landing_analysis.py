"""
=============================================================================
LANDING ANALYSIS - SUCCESS MAPS, SCALE COMPARISON AND VELOCITY THRESHOLDS
=============================================================================

Post-training evaluation of a perching policy:
- Success-rate maps over (speed, flight angle) approach grids, evaluated in parallel
- Normalized Gaussian smoothing and map-to-map comparison
- Kinematic predictor of the minimum perpendicular velocity for pad-first contact
- Hinge stiffness / damping and angular-acceleration sweeps
- CSV and JSON sidecar export
"""

import csv
import json
import math
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from perch_errors import GridMismatch, NoCollisionCourse
from robot_geometry import RobotGeometry, PadSide, pad_offset, world_points, derive_dimensionless
from sim_core import GRAVITY, SurfaceSpec, SimState, Phase, step_maneuver
from perching_env import EnvConfig, EpisodeResult, PolicyHandle, evaluation_condition, run_episode

logger = logging.getLogger(__name__)


class SuccessCriterion(Enum):
    FOUR_LEG = "four_leg"
    ANY_CONTACT = "any_contact"


def is_success(result: EpisodeResult, criterion: SuccessCriterion) -> bool:
    if criterion == SuccessCriterion.FOUR_LEG:
        return result.n_legs == 4
    return result.n_legs > 0


@dataclass(frozen=True)
class MapGrid:
    speeds: Tuple[float, ...]
    flight_angles: Tuple[float, ...]  # rad

    def __post_init__(self):
        for name, values in (("speeds", self.speeds), ("flight_angles", self.flight_angles)):
            if len(values) == 0 or np.any(np.diff(values) <= 0):
                raise ValueError(f"{name} grid must be nonempty and strictly increasing")

    @classmethod
    def linear(cls, speed_range: Tuple[float, float], n_speeds: int,
               angle_range_deg: Tuple[float, float], n_angles: int) -> "MapGrid":
        return cls(tuple(np.linspace(*speed_range, n_speeds).tolist()),
                   tuple(np.radians(np.linspace(*angle_range_deg, n_angles)).tolist()))


@dataclass
class SuccessMap:
    """Per-cell success rates, rows = speeds, columns = flight angles"""
    speeds: np.ndarray
    flight_angles: np.ndarray
    rates: np.ndarray
    trials: np.ndarray
    criterion: SuccessCriterion
    theta_plane: float = 0.0
    smoothed: Optional[np.ndarray] = None
    sigma_cells: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rates.shape

    def same_grid(self, other: "SuccessMap") -> bool:
        return (np.array_equal(self.speeds, other.speeds) and np.array_equal(self.flight_angles, other.flight_angles)
                and self.criterion == other.criterion)


@dataclass
class MapComparison:
    abs_diff: np.ndarray
    mean_abs_diff: float
    max_abs_diff: float


@dataclass
class ThresholdCurve:
    alpha_values: List[float]
    v_perp_min: List[Optional[float]]
    geometry: Dict[str, Any] = field(default_factory=dict)
    surface: Dict[str, Any] = field(default_factory=dict)

    def is_non_increasing(self) -> bool:
        finite = [math.inf if v is None else v for v in self.v_perp_min]
        order = np.argsort(self.alpha_values)
        values = [finite[i] for i in order]
        return all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


# ============================================================================
# SUCCESS MAPS
# ============================================================================

def trial_seed(seed: int, i: int, j: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, i, j, trial]).generate_state(1)[0])


def _evaluate_cell(task: Tuple) -> List[Optional[Dict[str, Any]]]:
    policy, geom, surface, env_config, speed, angle, seeds = task
    try:
        condition = evaluation_condition(speed, angle, geom, env_config)
        return [run_episode(policy, condition, surface, geom, s, env_config).to_log_dict() for s in seeds]
    except NoCollisionCourse:
        return [None for _ in seeds]


def sweep_success_map(
    policy: PolicyHandle,
    geom: RobotGeometry,
    surface: SurfaceSpec,
    grid: MapGrid,
    trials: int = 5,
    seed: int = 0,
    criterion: SuccessCriterion = SuccessCriterion.FOUR_LEG,
    workers: int = 1,
    env_config: Optional[EnvConfig] = None,
    episode_log: Optional[str] = None,
) -> SuccessMap:
    """trials episodes per cell, each with its own seed; cells without a collision course score zero"""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    env_config = env_config or EnvConfig()
    tasks, cells = [], []
    for i, speed in enumerate(grid.speeds):
        for j, angle in enumerate(grid.flight_angles):
            seeds = [trial_seed(seed, i, j, k) for k in range(trials)]
            tasks.append((policy, geom, surface, env_config, speed, angle, seeds))
            cells.append((i, j, seeds))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_evaluate_cell, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        outcomes = [_evaluate_cell(t) for t in tasks]

    rates = np.zeros((len(grid.speeds), len(grid.flight_angles)))
    counts = np.full_like(rates, trials, dtype=int)
    for (i, j, seeds), logs in zip(cells, outcomes):
        successes = 0
        for s, log in zip(seeds, logs):
            if log is None:
                continue
            successes += int(log["n_legs"] == 4 if criterion == SuccessCriterion.FOUR_LEG else log["n_legs"] > 0)
            if episode_log:
                _append_log_record(episode_log, grid.speeds[i], grid.flight_angles[j], surface, s, log)
        rates[i, j] = successes / trials

    logger.info(f"[Analysis] map on {math.degrees(surface.theta_plane):.0f} deg plane: "
                f"mean {criterion.value} rate {rates.mean():.3f} over {rates.size} cells")
    return SuccessMap(np.array(grid.speeds), np.array(grid.flight_angles), rates, counts, criterion,
                      surface.theta_plane)


def _append_log_record(path: str, speed: float, angle: float, surface: SurfaceSpec, seed: int, log: Dict[str, Any]):
    record = {"condition": {"speed": speed, "flight_angle": angle}, "surface": surface.to_dict(), "seed": seed, **log}
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def recount_from_log(path: str, speed: float, angle: float, criterion: SuccessCriterion) -> Tuple[int, int]:
    """(successes, episodes) for one cell, read back from a JSON-lines episode log"""
    successes = total = 0
    with open(path) as f:
        for line in f:
            record = json.loads(line)
            if record["condition"]["speed"] == speed and record["condition"]["flight_angle"] == angle:
                total += 1
                n_legs = record["n_legs"]
                successes += int(n_legs == 4 if criterion == SuccessCriterion.FOUR_LEG else n_legs > 0)
    return successes, total


def smooth_map(success_map: SuccessMap, sigma_cells: float = 1.0) -> SuccessMap:
    """Gaussian smoothing normalized by the in-grid kernel weight; raw rates are kept"""
    if sigma_cells < 0:
        raise ValueError("sigma must be >= 0")
    raw = success_map.rates
    if sigma_cells == 0:
        smoothed = raw.copy()
    else:
        numerator = ndimage.gaussian_filter(raw, sigma_cells, mode="constant", cval=0.0)
        weight = ndimage.gaussian_filter(np.ones_like(raw), sigma_cells, mode="constant", cval=0.0)
        smoothed = np.clip(numerator / weight, 0.0, 1.0)
    return replace(success_map, smoothed=smoothed, sigma_cells=sigma_cells)


def compare_maps(a: SuccessMap, b: SuccessMap) -> MapComparison:
    if not a.same_grid(b):
        raise GridMismatch("success maps differ in grid or criterion")
    diff = np.abs(a.rates - b.rates)
    return MapComparison(diff, float(diff.mean()), float(diff.max()))


# ============================================================================
# VELOCITY THRESHOLD
# ============================================================================

def _rotation_profile(times: np.ndarray, alpha_max: float) -> np.ndarray:
    """Pitch under constant alpha until a quarter turn, constant rate afterwards"""
    t_cut = math.sqrt(math.pi / alpha_max)
    return np.where(times < t_cut, 0.5 * alpha_max * times ** 2,
                    0.5 * math.pi + alpha_max * t_cut * (times - t_cut))


def _first_contact_profiles(geom: RobotGeometry, alpha_max: float, surface: SurfaceSpec, v_perp: float,
                            times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Clearance offsets (relative to the trigger distance of the origin) of the nearest pad and nearest prop/body"""
    pitch = _rotation_profile(times, alpha_max)
    c, s = np.cos(pitch), np.sin(pitch)
    n = surface.normal
    origin = -v_perp * times + 0.5 * GRAVITY * math.cos(surface.theta_plane) * times ** 2

    def offset(point: np.ndarray) -> np.ndarray:
        world = np.stack([c * point[0] - s * point[1], s * point[0] + c * point[1]])
        return origin + n @ world

    pads = np.minimum(offset(pad_offset(geom, PadSide.FRONT)), offset(pad_offset(geom, PadSide.REAR)))
    others = np.min([offset(np.asarray(p, dtype=float)) for p in geom.prop_offsets] + [origin], axis=0)
    return pads, others


def pad_first_feasible(geom: RobotGeometry, alpha_max: float, surface: SurfaceSpec, v_perp: float,
                       trigger_distances: np.ndarray, horizon: float = 1.5, dt: float = 1e-3) -> bool:
    """True if some trigger distance makes a pad the first point to reach the plane"""
    times = np.arange(0.0, horizon + 0.5 * dt, dt)
    pads, others = _first_contact_profiles(geom, alpha_max, surface, v_perp, times)
    reach = -np.minimum.accumulate(np.minimum(pads, others))
    idx = np.searchsorted(reach, trigger_distances, side="left")
    hit = idx < len(times)
    if not np.any(hit):
        return False
    first = idx[hit]
    return bool(np.any(pads[first] < others[first]))


def trigger_distance_grid(geom: RobotGeometry, surface: SurfaceSpec, gap_step: float = 0.005,
                          gap_max: float = 1.0) -> np.ndarray:
    """Origin-to-plane distances at trigger, starting where every point is still clear of the plane"""
    points = world_points(geom, np.zeros(2), 0.0)
    offsets = [float(surface.normal @ p) for p in [*points.pads().values(), *points.prop_points, np.zeros(2)]]
    lowest = -min(offsets) + gap_step
    l_eff = derive_dimensionless(geom).l_eff
    return np.arange(lowest, l_eff + gap_max + 0.5 * gap_step, gap_step)


def predict_velocity_threshold(geom: RobotGeometry, alpha_max: float, surface: SurfaceSpec,
                               v_step: float = 0.05, v_max: float = 6.0, gap_step: float = 0.005,
                               horizon: float = 1.5) -> Optional[float]:
    """Smallest perpendicular speed on the grid for which pad-first contact is reachable; None above range"""
    if not (alpha_max > 0):
        raise ValueError("alpha_max must be positive")
    distances = trigger_distance_grid(geom, surface, gap_step)
    n_steps = int(round(v_max / v_step))
    for k in range(1, n_steps + 1):
        v_perp = k * v_step
        if pad_first_feasible(geom, alpha_max, surface, v_perp, distances, horizon):
            return round(v_perp, 10)
    return None


def brute_force_threshold(geom: RobotGeometry, alpha_max: float, surface: SurfaceSpec, v_values: Sequence[float],
                          trigger_distances: Sequence[float], horizon: float = 1.5, dt: float = 1e-3) -> Optional[float]:
    """Step-by-step simulation of every (V_perp, trigger distance) pair; slow reference for the predictor"""
    geom = replace(geom, alpha_max=max(geom.alpha_max, alpha_max))
    n = surface.normal
    for v_perp in v_values:
        for d0 in trigger_distances:
            anchor = np.asarray(surface.anchor_point, dtype=float)
            state = SimState(position=anchor + d0 * n, velocity=-v_perp * n, pitch=0.0, pitch_rate=0.0,
                             motor_thrust_state=0.0, hip_angle=0.0, hip_rate=0.0, phase=Phase.ROTATION, time=0.0)
            while state.time < horizon:
                state = step_maneuver(state, alpha_max, geom, dt)
                pts = world_points(geom, state.position, state.pitch)
                d_pad = min(surface.signed_distance(p) for p in pts.pads().values())
                d_other = min([surface.signed_distance(p) for p in pts.prop_points]
                              + [surface.signed_distance(state.position)])
                if min(d_pad, d_other) <= 0:
                    if d_pad < d_other:
                        return float(v_perp)
                    break
    return None


def threshold_curve(geom: RobotGeometry, surface: SurfaceSpec, alpha_values: Sequence[float],
                    **kwargs: Any) -> ThresholdCurve:
    values = [predict_velocity_threshold(geom, a, surface, **kwargs) for a in alpha_values]
    for a, v in zip(alpha_values, values):
        logger.info(f"[Analysis] alpha_max {a:.1f} rad/s^2 -> V_perp threshold "
                    f"{'above range' if v is None else f'{v:.2f} m/s'}")
    return ThresholdCurve(list(alpha_values), values, geom.to_dict(), surface.to_dict())


def perpendicular_flight_angle(theta_plane: float) -> float:
    return 0.5 * math.pi - theta_plane


def threshold_alignment(success_map: SuccessMap, predicted_v_perp: Optional[float]) -> Dict[str, Any]:
    """Compare the predicted threshold with the first successful speed of the perpendicular-approach column"""
    target = perpendicular_flight_angle(success_map.theta_plane)
    column = int(np.argmin(np.abs(success_map.flight_angles - target)))
    rates = success_map.rates[:, column]
    successful = np.nonzero(rates > 0)[0]
    observed = float(success_map.speeds[successful[0]]) if len(successful) else None
    step = float(np.min(np.diff(success_map.speeds))) if len(success_map.speeds) > 1 else math.inf
    v_perp_factor = math.sin(success_map.flight_angles[column] + success_map.theta_plane)
    observed_perp = None if observed is None else observed * v_perp_factor
    aligned = (observed_perp is not None and predicted_v_perp is not None
               and abs(observed_perp - predicted_v_perp) <= step + 1e-9)
    return {
        "column_flight_angle_deg": math.degrees(success_map.flight_angles[column]),
        "observed_v_perp": observed_perp,
        "predicted_v_perp": predicted_v_perp,
        "grid_step": step,
        "aligned": bool(aligned),
    }


# ============================================================================
# SWEEPS
# ============================================================================

def hinge_sweep(policy: PolicyHandle, geom: RobotGeometry, surface: SurfaceSpec, stiffness_values: Sequence[float],
                damping_values: Sequence[float], grid: MapGrid, **kwargs: Any) -> Dict[Tuple[float, float], SuccessMap]:
    """One success map per (hip stiffness, damping ratio) pair, same policy and seeds"""
    if not stiffness_values or not damping_values:
        raise ValueError("stiffness and damping lists must be nonempty")
    maps = {}
    for k in stiffness_values:
        for zeta in damping_values:
            variant = replace(geom, hip_stiffness=float(k), hip_damping_ratio=float(zeta))
            logger.info(f"[Analysis] hinge sweep K={k} zeta={zeta}")
            maps[(float(k), float(zeta))] = sweep_success_map(policy, variant, surface, grid, **kwargs)
    return maps


def alpha_sweep(policy: PolicyHandle, geom: RobotGeometry, surface: SurfaceSpec, alpha_values: Sequence[float],
                grid: MapGrid, **kwargs: Any) -> Dict[float, SuccessMap]:
    """One success map per angular-acceleration limit"""
    if not alpha_values:
        raise ValueError("alpha list must be nonempty")
    maps = {}
    for alpha in alpha_values:
        logger.info(f"[Analysis] alpha sweep alpha_max={alpha}")
        maps[float(alpha)] = sweep_success_map(policy, replace(geom, alpha_max=float(alpha)), surface, grid, **kwargs)
    return maps


def mean_rate_in_band(success_map: SuccessMap, angle_band_deg: Tuple[float, float]) -> float:
    angles = np.degrees(success_map.flight_angles)
    mask = (angles >= angle_band_deg[0] - 1e-9) & (angles <= angle_band_deg[1] + 1e-9)
    if not np.any(mask):
        raise ValueError(f"no map column inside {angle_band_deg}")
    return float(success_map.rates[:, mask].mean())


# ============================================================================
# EXPORT
# ============================================================================

MAP_COLUMNS = ["speed_m_s", "flight_angle_deg", "rate_raw", "rate_smoothed", "trials", "criterion"]


def write_map_csv(path: str, success_map: SuccessMap, config_digest: str, seed: int) -> str:
    smoothed = success_map.smoothed if success_map.smoothed is not None else success_map.rates
    with open(path, "w", newline="") as f:
        f.write(f"# config_digest={config_digest} seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MAP_COLUMNS)
        for i, speed in enumerate(success_map.speeds):
            for j, angle in enumerate(success_map.flight_angles):
                writer.writerow([f"{speed:.6f}", f"{math.degrees(angle):.6f}", f"{success_map.rates[i, j]:.6f}",
                                 f"{smoothed[i, j]:.6f}", int(success_map.trials[i, j]), success_map.criterion.value])
    return path


def read_map_csv(path: str, theta_plane: float = 0.0) -> SuccessMap:
    with open(path) as f:
        rows = [r for r in csv.reader(line for line in f if not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    if header != MAP_COLUMNS or not body:
        raise GridMismatch(f"{path} is not a success-map CSV")
    speeds = sorted({float(r[0]) for r in body})
    angles = sorted({float(r[1]) for r in body})
    rates = np.zeros((len(speeds), len(angles)))
    smoothed = np.zeros_like(rates)
    trials = np.zeros_like(rates, dtype=int)
    criteria = {r[5] for r in body}
    if len(criteria) != 1 or len(body) != rates.size:
        raise GridMismatch(f"{path} does not hold a single complete grid")
    for r in body:
        i, j = speeds.index(float(r[0])), angles.index(float(r[1]))
        rates[i, j], smoothed[i, j], trials[i, j] = float(r[2]), float(r[3]), int(r[4])
    return SuccessMap(np.array(speeds), np.radians(angles), rates, trials, SuccessCriterion(criteria.pop()),
                      theta_plane, smoothed)


def write_map_sidecar(path: str, success_map: SuccessMap, geom: RobotGeometry, surface: SurfaceSpec,
                      config_digest: str, seed: int) -> str:
    sidecar = {
        "config_digest": config_digest,
        "seed": seed,
        "criterion": success_map.criterion.value,
        "sigma_cells": success_map.sigma_cells,
        "geometry": geom.to_dict(),
        "surface": surface.to_dict(),
    }
    with open(path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return path


def write_threshold_csv(path: str, curve: ThresholdCurve, config_digest: str, seed: int) -> str:
    with open(path, "w", newline="") as f:
        f.write(f"# config_digest={config_digest} seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["alpha_max_rad_s2", "v_perp_min_m_s"])
        for alpha, v in zip(curve.alpha_values, curve.v_perp_min):
            writer.writerow([f"{alpha:.3f}", "above_range" if v is None else f"{v:.4f}"])
    return path


def write_comparison_csv(path: str, a: SuccessMap, comparison: MapComparison, header: str) -> str:
    with open(path, "w", newline="") as f:
        f.write(f"# {header} mean_abs_diff={comparison.mean_abs_diff:.6f} max_abs_diff={comparison.max_abs_diff:.6f}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["speed_m_s", "flight_angle_deg", "abs_diff"])
        for i, speed in enumerate(a.speeds):
            for j, angle in enumerate(a.flight_angles):
                writer.writerow([f"{speed:.6f}", f"{math.degrees(angle):.6f}", f"{comparison.abs_diff[i, j]:.6f}"])
    return path
